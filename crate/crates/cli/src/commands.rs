use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gangealing::config::TrainConfig;
use gangealing::correspond::{propagate_batch, track_video, transfer_points, Aligner};
use gangealing::datapipe::{
    align_dataset, decode_overlay, filter_dataset, image_id, list_images, load_dir, load_image, report_csv, save_png,
    write_aligned, AlignLimits, ManifestEntry,
};
use gangealing::evalkit::{curve_csv, pck_curve, read_queries, ScoredPair};
use gangealing::keypoints::KeypointSet;
use gangealing::par::Execution;
use gangealing::trainer::{train, TrainOutputs};
use serde::Serialize;

use crate::{load_model, Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Train { config, out } => {
            let mut cfg = TrainConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
            if cli.sequential {
                cfg.execution = Execution::Sequential;
            }
            let model = train(cfg, TrainOutputs::to_dir(&out))?;
            println!("trained {} steps; checkpoint in {}", model.step, out.join("final").display());
        }
        Command::Congeal { ckpt, input, output } => congeal(&ckpt.checkpoint, &input, &output, exec)?,
        Command::Transfer { ckpt, image_a, image_b, keypoints, out } => {
            let model = load_model(&ckpt.checkpoint)?;
            let r = model.config.network.resolution;
            let (a, b) = (load_image(&image_a, Some(r))?, load_image(&image_b, Some(r))?);
            let pts = KeypointSet::from_json(&fs::read_to_string(&keypoints)?)?;
            let moved = transfer_points(&Aligner::from_model(&model), &a, &b, &pts)?;
            emit(&moved.to_json()?, out.as_deref())?;
        }
        Command::Propagate { ckpt, overlay, input, output, video } => {
            let model = load_model(&ckpt.checkpoint)?;
            let overlay = decode_overlay(&fs::read(&overlay)?)?;
            let items = load_dir(&input, model.config.network.resolution, exec)?;
            let aligner = Aligner::from_model(&model);
            let images: Vec<_> = items.iter().map(|(_, x)| x.clone()).collect();
            let out = if video {
                track_video(&aligner, &overlay, &images, exec)?.into_iter().map(|f| f.composited).collect()
            } else {
                propagate_batch(&aligner, &overlay, &images, exec)?
            };
            fs::create_dir_all(&output)?;
            for ((id, _), img) in items.iter().zip(&out) {
                save_png(img, &output.join(format!("{id}.png")))?;
            }
            println!("propagated onto {} images", out.len());
        }
        Command::Filter { ckpt, input, keep, out } => {
            let model = load_model(&ckpt.checkpoint)?;
            let items = load_dir(&input, model.config.network.resolution, exec)?;
            let outcome = filter_dataset(&Aligner::from_model(&model), &items, keep, exec)?;
            fs::create_dir_all(&out)?;
            let entries: Vec<ManifestEntry> = outcome
                .rows
                .iter()
                .map(|r| ManifestEntry {
                    id: r.id.clone(),
                    file: None,
                    kept: r.kept,
                    reason: (!r.kept).then(|| r.reason.clone()),
                    score: Some(r.score),
                    zoom: None,
                    extrapolation: None,
                })
                .collect();
            fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
            fs::write(out.join("report.csv"), report_csv(&outcome.rows))?;
            fs::write(out.join("kept.txt"), outcome.kept.join("\n") + "\n")?;
            println!("kept {} of {}", outcome.kept.len(), items.len());
        }
        Command::Align { ckpt, input, output, zoom_limit, extrapolation_limit, recursion } => {
            let model = load_model(&ckpt.checkpoint)?;
            let items = load_dir(&input, model.config.network.resolution, exec)?;
            let limits = AlignLimits { zoom_limit, extrapolation_limit, recursion };
            let aligned = align_dataset(&model.network, &items, &limits, exec)?;
            let entries = write_aligned(&output, &aligned)?;
            println!("kept {} of {}", entries.iter().filter(|e| e.kept).count(), entries.len());
        }
        Command::Evaluate { checkpoint, queries, alphas, images, csv } => {
            evaluate(checkpoint.as_deref(), &queries, alphas, images.as_deref(), csv.as_deref())?
        }
        Command::Serve { ckpt, port, host, gallery, template_samples } => {
            let state = crate::serve::State::load(&ckpt.checkpoint, gallery.as_deref(), template_samples, exec)?;
            crate::serve::run(state, &host, port)?;
        }
    }
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct CongealEntry {
    id: String,
    file: String,
    cluster: usize,
    flipped: bool,
}

fn congeal(checkpoint: &Path, input: &Path, output: &Path, exec: Execution) -> Result<()> {
    let model = load_model(checkpoint)?;
    let items = load_dir(input, model.config.network.resolution, exec)?;
    let aligner = Aligner::from_model(&model);
    fs::create_dir_all(output)?;
    let mut entries = Vec::new();
    for (id, x) in &items {
        let a = aligner.align(x)?;
        let file = format!("{id}.png");
        save_png(a.congealed(), &output.join(&file))?;
        entries.push(CongealEntry { id: id.clone(), file, cluster: a.cluster(), flipped: a.flipped });
    }
    fs::write(output.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
    println!("congealed {} images", entries.len());
    Ok(())
}

fn find_image(index: &BTreeMap<String, PathBuf>, id: &str) -> Result<PathBuf> {
    index.get(id).cloned().with_context(|| format!("no image with id {id:?}"))
}

fn evaluate(
    checkpoint: Option<&Path>,
    queries: &Path,
    mut alphas: Vec<f64>,
    images: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let qs = read_queries(&fs::read_to_string(queries).with_context(|| format!("reading {}", queries.display()))?)?;
    if alphas.is_empty() {
        alphas = qs.iter().map(|q| q.alpha).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
    }
    if alphas.iter().any(|a| !(*a > 0.0)) {
        bail!("alphas must be positive");
    }
    let model = if qs.iter().any(|q| q.prediction.is_none()) {
        let Some(ckpt) = checkpoint else {
            bail!("queries without predictions need --checkpoint");
        };
        Some(load_model(ckpt)?)
    } else {
        None
    };
    let dir = images.map(Path::to_path_buf).unwrap_or_else(|| queries.parent().unwrap_or(Path::new(".")).to_path_buf());
    let index: BTreeMap<String, PathBuf> = match &model {
        Some(_) => list_images(&dir)?.into_iter().map(|p| (image_id(&p), p)).collect(),
        None => BTreeMap::new(),
    };
    let mut pairs = Vec::with_capacity(qs.len());
    for q in &qs {
        let pred = match (&q.prediction, &model) {
            (Some(p), _) => p.clone(),
            (None, Some(m)) => {
                let r = m.config.network.resolution;
                let a = load_image(&find_image(&index, &q.source_id)?, Some(r))?;
                let b = load_image(&find_image(&index, &q.target_id)?, Some(r))?;
                transfer_points(&Aligner::from_model(m), &a, &b, &q.source)?
            }
            (None, None) => unreachable!(),
        };
        pairs.push(ScoredPair { pred, gt: q.target.clone(), bbox: q.bbox });
    }
    let curve = pck_curve(&pairs, &alphas)?;
    for p in &curve {
        match p.pck {
            Some(v) => println!("alpha={} pck={v:?} n_points={}", p.alpha, p.n_points),
            None => println!("alpha={} pck=none n_points=0", p.alpha),
        }
    }
    if let Some(path) = csv {
        fs::write(path, curve_csv(&curve))?;
    }
    Ok(())
}
