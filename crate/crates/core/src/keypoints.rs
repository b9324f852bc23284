//! Keypoint sets in pixel coordinates (origin top-left, x right, y down).

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn default_visible() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    /// Pairs left/right-distinct points; must be an involution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_permutation: Option<Vec<usize>>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        Self { points, flip_permutation: None }
    }

    pub fn with_permutation(points: Vec<Keypoint>, perm: Vec<usize>) -> Result<Self> {
        check_involution(&perm, points.len())?;
        Ok(Self { points, flip_permutation: Some(perm) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Relabel points through the flip permutation (no-op without one).
    pub fn permuted(&self) -> KeypointSet {
        match &self.flip_permutation {
            None => self.clone(),
            Some(perm) => KeypointSet {
                points: perm.iter().map(|&p| self.points[p]).collect(),
                flip_permutation: self.flip_permutation.clone(),
            },
        }
    }

    /// Parse the on-disk format: a JSON array of `{x, y, visible}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let points: Vec<Keypoint> = serde_json::from_str(text)?;
        Ok(Self::new(points))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.points)?)
    }
}

pub fn check_involution(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return invalid(format!("flip permutation has {} entries for {n} points", perm.len()));
    }
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || perm[p] != i {
            return invalid("flip permutation is not an involution");
        }
    }
    Ok(())
}
