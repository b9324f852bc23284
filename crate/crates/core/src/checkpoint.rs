//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! The archive is `GGCK`, a u32 version, a u32 entry count, then for each
//! entry (sorted by name): u32 name length, UTF-8 name, u32 rank, u32 dims,
//! and the values as little-endian f32.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::invalid;
use crate::generator::{LatentBasis, TargetLatent, ToyGenerator};
use crate::stn::{Classifier, WarpNetwork};
use crate::trainer::Model;
use crate::warp::Padding;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GGCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub clusters: usize,
    pub padding: Padding,
    pub cutoff: usize,
    pub n_components: usize,
    pub resolution: usize,
    pub recursion: usize,
    pub flips: bool,
    pub step: usize,
    pub classifier_classes: Option<usize>,
    pub tensors: Vec<String>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub type Archive = BTreeMap<String, TensorEntry>;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_archive<W: Write>(mut w: W, archive: &Archive) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, FORMAT_VERSION as usize)?;
    put_u32(&mut w, archive.len())?;
    for (name, t) in archive {
        if t.dims.iter().product::<usize>() != t.values.len() {
            return invalid(format!("tensor {name} has inconsistent shape"));
        }
        put_u32(&mut w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, t.dims.len())?;
        for &d in &t.dims {
            put_u32(&mut w, d)?;
        }
        for &v in &t.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Archive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor archive (bad magic)".into()));
    }
    let version = get_u32(&mut r)?;
    if version as u32 != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = get_u32(&mut r)?;
    let mut out = Archive::new();
    for _ in 0..count {
        let len = get_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = get_u32(&mut r)?;
        let dims = (0..rank).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        out.insert(name, TensorEntry { dims, values });
    }
    Ok(out)
}

fn params_into(archive: &mut Archive, prefix: &str, params: &crate::nn::ParamSet) {
    for e in &params.entries {
        archive.insert(
            format!("{prefix}.{}", e.name),
            TensorEntry { dims: e.shape.clone(), values: params.values[e.range()].to_vec() },
        );
    }
}

fn params_from(archive: &Archive, prefix: &str, params: &mut crate::nn::ParamSet) -> Result<()> {
    for e in params.entries.clone() {
        let name = format!("{prefix}.{}", e.name);
        let t = archive.get(&name).ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.dims != e.shape {
            return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.dims, e.shape)));
        }
        params.values[e.range()].copy_from_slice(&t.values);
    }
    Ok(())
}

fn take<'a>(archive: &'a Archive, name: &str) -> Result<&'a TensorEntry> {
    archive.get(name).ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
}

/// Build the manifest and tensor archive for a model.
pub fn to_archive(model: &Model) -> (Manifest, Archive) {
    let mut archive = Archive::new();
    params_into(&mut archive, "network", &model.network.params);
    let d = model.basis.dim();
    archive.insert("basis.mean".into(), TensorEntry { dims: vec![d], values: model.basis.mean.clone() });
    archive.insert(
        "basis.directions".into(),
        TensorEntry {
            dims: vec![model.basis.directions.len(), d],
            values: model.basis.directions.iter().flatten().copied().collect(),
        },
    );
    archive.insert(
        "basis.eigenvalues".into(),
        TensorEntry { dims: vec![model.basis.eigenvalues.len()], values: model.basis.eigenvalues.clone() },
    );
    let n = model.config.n_components;
    archive.insert(
        "targets".into(),
        TensorEntry {
            dims: vec![model.targets.len(), n],
            values: model.targets.iter().flat_map(|t| t.coefficients.clone()).collect(),
        },
    );
    if let Some(c) = &model.classifier {
        params_into(&mut archive, "classifier", &c.params);
    }
    let cfg = &model.config;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        clusters: cfg.clusters,
        padding: cfg.network.padding,
        cutoff: cfg.cutoff,
        n_components: cfg.n_components,
        resolution: cfg.network.resolution,
        recursion: cfg.recursion,
        flips: cfg.flips,
        step: model.step,
        classifier_classes: model.classifier.as_ref().map(|c| c.classes),
        tensors: archive.keys().cloned().collect(),
        config: cfg.clone(),
    };
    (manifest, archive)
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (manifest, archive) = to_archive(model);
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut buf = Vec::new();
    write_archive(&mut buf, &archive)?;
    std::fs::write(dir.join("tensors.bin"), buf)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.format_version)));
    }
    Ok(m)
}

pub fn from_archive(manifest: &Manifest, archive: &Archive) -> Result<Model> {
    for name in &manifest.tensors {
        take(archive, name)?;
    }
    let config = manifest.config.clone();
    config.validate()?;
    let generator = ToyGenerator::new(config.toy.clone())?;
    let mut network = WarpNetwork::new(config.network.clone())?;
    params_from(archive, "network", &mut network.params)?;
    let mean = take(archive, "basis.mean")?.values.clone();
    let dirs = take(archive, "basis.directions")?;
    if dirs.dims.len() != 2 || dirs.dims[1] != mean.len() {
        return Err(Error::Format("basis directions have the wrong shape".into()));
    }
    let directions = dirs.values.chunks(mean.len().max(1)).map(<[f64]>::to_vec).collect();
    let eigenvalues = take(archive, "basis.eigenvalues")?.values.clone();
    let basis = LatentBasis { mean, directions, eigenvalues };
    let t = take(archive, "targets")?;
    if t.dims != [config.clusters, config.n_components] {
        return Err(Error::Format("targets have the wrong shape".into()));
    }
    let targets = (0..config.clusters)
        .map(|k| TargetLatent {
            coefficients: t.values[k * config.n_components..(k + 1) * config.n_components].to_vec(),
        })
        .collect();
    let classifier = match manifest.classifier_classes {
        None => None,
        Some(classes) => {
            let mut c = Classifier::from_network(&network, classes, 0);
            params_from(archive, "classifier", &mut c.params)?;
            Some(c)
        }
    };
    Ok(Model { config, generator, basis, network, targets, classifier, step: manifest.step })
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let bytes = std::fs::read(dir.join("tensors.bin"))?;
    let archive = read_archive(&bytes[..])?;
    from_archive(&manifest, &archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_and_magic() {
        let mut a = Archive::new();
        a.insert("b".into(), TensorEntry { dims: vec![2], values: vec![1.5, -2.0] });
        a.insert("a".into(), TensorEntry { dims: vec![1, 0], values: vec![] });
        let mut buf = Vec::new();
        write_archive(&mut buf, &a).unwrap();
        assert_eq!(&buf[..4], b"GGCK");
        assert_eq!(read_archive(&buf[..]).unwrap(), a);
        buf[0] = b'X';
        assert!(read_archive(&buf[..]).is_err());
    }
}
