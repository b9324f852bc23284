//! Keypoint-transfer PCK, PCK curves and the toy benchmark harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspond::{congeal_points, transfer_aligned, uncongeal_points, Aligner};
use crate::error::invalid;
use crate::generator::{Generator, ToyGenerator};
use crate::keypoints::KeypointSet;
use crate::par::{self, Execution};
use crate::trainer::Model;
use crate::warp::identity_grid;
use crate::Result;

/// Target bounding box `(x, y, height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub width: f64,
}

impl BBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self { x: 0.0, y: 0.0, height: height as f64, width: width as f64 }
    }

    pub fn radius(&self, alpha: f64) -> f64 {
        alpha * self.height.max(self.width)
    }
}

/// Correct and scored point counts for one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PckCounts {
    pub correct: usize,
    pub scored: usize,
}

impl PckCounts {
    pub fn fraction(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.correct as f64 / self.scored as f64)
    }
}

/// Score only points visible in both `pred` and `gt`.
pub fn pck_counts(pred: &KeypointSet, gt: &KeypointSet, bbox: &BBox, alpha: f64) -> Result<PckCounts> {
    if pred.len() != gt.len() {
        return invalid(format!("prediction has {} points, ground truth {}", pred.len(), gt.len()));
    }
    if !(alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    let radius = bbox.radius(alpha);
    let mut c = PckCounts::default();
    for (p, g) in pred.points.iter().zip(&gt.points) {
        if !(p.visible && g.visible) {
            continue;
        }
        c.scored += 1;
        if (p.x - g.x).hypot(p.y - g.y) <= radius {
            c.correct += 1;
        }
    }
    Ok(c)
}

/// Fraction of mutually visible points within `alpha * max(H, W)` of the
/// ground truth; `None` when nothing is scored.
pub fn pck_transfer(pred: &KeypointSet, gt: &KeypointSet, bbox: &BBox, alpha: f64) -> Result<Option<f64>> {
    Ok(pck_counts(pred, gt, bbox, alpha)?.fraction())
}

/// A predicted keypoint set with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub pred: KeypointSet,
    pub gt: KeypointSet,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub pck: Option<f64>,
    pub n_points: usize,
}

/// PCK at each alpha, pooled over all scored points of all pairs.
pub fn pck_curve(pairs: &[ScoredPair], alphas: &[f64]) -> Result<Vec<CurvePoint>> {
    if pairs.is_empty() || alphas.is_empty() {
        return invalid("pck_curve needs at least one pair and one alpha");
    }
    alphas
        .iter()
        .map(|&alpha| {
            let mut total = PckCounts::default();
            for p in pairs {
                let c = pck_counts(&p.pred, &p.gt, &p.bbox, alpha)?;
                total.correct += c.correct;
                total.scored += c.scored;
            }
            Ok(CurvePoint { alpha, pck: total.fraction(), n_points: total.scored })
        })
        .collect()
}

/// One record of a query manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckQuery {
    pub source_id: String,
    pub target_id: String,
    pub source: KeypointSet,
    pub target: KeypointSet,
    pub bbox: BBox,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Precomputed prediction; when absent the model transfers `source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<KeypointSet>,
}

fn default_alpha() -> f64 {
    0.1
}

pub fn read_queries(text: &str) -> Result<Vec<PckQuery>> {
    let qs: Vec<PckQuery> = serde_json::from_str(text)?;
    for q in &qs {
        if !(q.alpha > 0.0) {
            return invalid(format!("query {} -> {} has a non-positive alpha", q.source_id, q.target_id));
        }
        if q.source.len() != q.target.len() {
            return invalid(format!("query {} -> {} has mismatched keypoint counts", q.source_id, q.target_id));
        }
    }
    Ok(qs)
}

/// `alpha,pck,n_points` rows; an unscored alpha leaves `pck` empty.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("alpha,pck,n_points\n");
    for p in curve {
        let pck = p.pck.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", p.alpha, pck, p.n_points));
    }
    s
}

/// Two-column tab separated curve for plotting tools.
pub fn curve_tsv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("# alpha\tpck\n");
    for p in curve {
        if let Some(v) = p.pck {
            s.push_str(&format!("{}\t{v:.6}\n", p.alpha));
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyBenchmark {
    pub pairs: usize,
    pub alpha: f64,
    pub pck: Option<f64>,
    /// PCK of predicting each source point at the same pixel in the target.
    pub identity_pck: Option<f64>,
    pub n_points: usize,
    pub curve: Vec<CurvePoint>,
}

/// Default alpha grid for reported curves.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| 10f64.powf(-2.0 + i as f64 / 10.0)).collect()
}

/// Ground truth for a toy pair: target points, scored only where the point
/// is visible in both renders.
fn mutual_gt(src: &KeypointSet, dst: &KeypointSet) -> KeypointSet {
    let mut gt = dst.clone();
    for (g, s) in gt.points.iter_mut().zip(&src.points) {
        g.visible = g.visible && s.visible;
    }
    gt
}

/// Every prediction is scored; ones the model flagged as not visible count
/// as misses.
fn misses_scored(pred: &KeypointSet) -> KeypointSet {
    let mut p = pred.clone();
    for k in p.points.iter_mut() {
        if !k.visible {
            k.x = f64::NAN;
            k.y = f64::NAN;
        }
        k.visible = true;
    }
    p
}

/// Score transfers between given latent pairs. Ground truth comes from the
/// generator's own keypoint placement, which is exact for its warp. The
/// baseline predicts each source point at the same pixel of the target.
pub fn benchmark_pairs(
    aligner: &Aligner,
    generator: &ToyGenerator,
    pairs: &[(Vec<f64>, Vec<f64>)],
    alpha: f64,
    exec: Execution,
) -> Result<ToyBenchmark> {
    let r = generator.resolution();
    let bbox = BBox::full(r, r);
    // The baseline goes through the same pixel snapping as a real transfer.
    let id = identity_grid(r, r)?;
    let scored = par::map(exec, pairs, |(wa, wb)| -> Result<(ScoredPair, ScoredPair)> {
        let (xa, xb) = (generator.synthesize(wa)?, generator.synthesize(wb)?);
        let (ka, kb) = (generator.keypoints(wa)?, generator.keypoints(wb)?);
        let (la, lb) = (aligner.align(&xa)?, aligner.align(&xb)?);
        let gt = mutual_gt(&ka, &kb);
        let pred = misses_scored(&transfer_aligned(&la, &lb, &ka));
        let baseline = misses_scored(&uncongeal_points(&id, &congeal_points(&id, &ka)));
        Ok((ScoredPair { pred, gt: gt.clone(), bbox }, ScoredPair { pred: baseline, gt, bbox }))
    });
    let (mut model, mut baseline) = (Vec::new(), Vec::new());
    for s in scored {
        let (m, b) = s?;
        model.push(m);
        baseline.push(b);
    }
    if model.is_empty() {
        return invalid("benchmark needs at least one pair");
    }
    let pck = pck_curve(&model, &[alpha])?.remove(0);
    let identity = pck_curve(&baseline, &[alpha])?.remove(0);
    Ok(ToyBenchmark {
        pairs: pairs.len(),
        alpha,
        pck: pck.pck,
        identity_pck: identity.pck,
        n_points: pck.n_points,
        curve: pck_curve(&model, &default_alphas())?,
    })
}

/// Sample `n_pairs` latent pairs from the model's generator with a seeded
/// stream and score transfers at `alpha`.
pub fn run_toy_benchmark(model: &Model, n_pairs: usize, alpha: f64, seed: u64, exec: Execution) -> Result<ToyBenchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<_> = (0..n_pairs)
        .map(|_| (model.generator.sample_latent_with(&mut rng), model.generator.sample_latent_with(&mut rng)))
        .collect();
    benchmark_pairs(&Aligner::from_model(model), &model.generator, &pairs, alpha, exec)
}
