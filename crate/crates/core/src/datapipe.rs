//! Image I/O plus dataset filtering by flow smoothness and similarity-only
//! alignment with zoom and extrapolation rejection.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::correspond::{Aligner, Overlay};
use crate::error::invalid;
use crate::par::{self, Execution};
use crate::stn::{flip_input, WarpNetwork};
use crate::tensor::Tensor;
use crate::warp::{grid_from_matrix, tv_loss, SimilarityParams};
use crate::Result;

pub const DEFAULT_ZOOM_LIMIT: f64 = 2.0;
pub const DEFAULT_EXTRAPOLATION_LIMIT: f64 = 0.25;
pub const REPORT_HEADER: &str = "id,score,flip,kept,reason";

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Center-crop to a square and resize to `resolution`.
fn harmonize(img: DynamicImage, resolution: Option<usize>) -> DynamicImage {
    let Some(r) = resolution else { return img };
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    if side as usize == r {
        cropped
    } else {
        cropped.resize_exact(r as u32, r as u32, FilterType::Triangle)
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.idx(c, y as usize, x as usize);
            t.data[i] = to_unit(p[c]);
        }
    }
    t
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.channels != 3 {
        return invalid("expected a 3-channel image");
    }
    Ok(RgbImage::from_fn(t.width as u32, t.height as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_byte(t.at(c, y as usize, x as usize))))
    }))
}

/// Decode PNG or JPEG bytes into `[-1, 1]` RGB, optionally harmonized to a
/// square resolution.
pub fn decode_image(bytes: &[u8], resolution: Option<usize>) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?;
    Ok(rgb_to_tensor(&harmonize(img, resolution).to_rgb8()))
}

pub fn load_image(path: &Path, resolution: Option<usize>) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?, resolution)
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    tensor_to_rgb(t)?.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

/// RGBA bytes to an overlay: colors in `[-1, 1]`, opacity in `[0, 1]`.
pub fn decode_overlay(bytes: &[u8]) -> Result<Overlay> {
    let img = image::load_from_memory(bytes)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(4, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.idx(c, y as usize, x as usize);
            t.data[i] = to_unit(p[c]);
        }
        let i = t.idx(3, y as usize, x as usize);
        t.data[i] = p[3] as f64 / 255.0;
    }
    Overlay::new(t)
}

pub fn encode_overlay(overlay: &Overlay) -> Result<Vec<u8>> {
    let t = &overlay.image;
    let img = RgbaImage::from_fn(t.width as u32, t.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = (t.at(3, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgba([to_byte(t.at(0, y, x)), to_byte(t.at(1, y, x)), to_byte(t.at(2, y, x)), a])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// PNG and JPEG files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load every image of a directory as `(id, image)` pairs.
pub fn load_dir(dir: &Path, resolution: usize, exec: Execution) -> Result<Vec<(String, Tensor)>> {
    let paths = list_images(dir)?;
    par::map(exec, &paths, |p| Ok((image_id(p), load_image(p, Some(resolution))?))).into_iter().collect()
}

/// Originals followed by mirrored copies with a `_flip` suffix.
pub fn mirror_augment(items: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    let mut out = items.to_vec();
    out.extend(items.iter().map(|(id, x)| (format!("{id}_flip"), flip_input(x))));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub id: String,
    pub score: f64,
    pub flip_used: bool,
}

/// TV of the flow the aligner predicts for `image` (after its flip choice).
pub fn smoothness_score(aligner: &Aligner, id: &str, image: &Tensor) -> Result<SmoothnessReport> {
    let a = aligner.align(image)?;
    Ok(SmoothnessReport { id: id.to_string(), score: tv_loss(&a.result.flow)?, flip_used: a.flipped })
}

/// Number of items kept out of `n` at `keep_fraction`.
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of the `keep_fraction` lowest scores, ordered by score then id.
pub fn select_smoothest(reports: &[SmoothnessReport], keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return invalid("keep fraction must lie in (0, 1]");
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].score.total_cmp(&reports[b].score).then_with(|| reports[a].id.cmp(&reports[b].id)));
    order.truncate(keep_count(reports.len(), keep_fraction));
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub score: f64,
    pub flip: bool,
    pub kept: bool,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    /// Kept ids in ranking order.
    pub kept: Vec<String>,
    /// One row per input, in input order.
    pub rows: Vec<ReportRow>,
}

/// Rank precomputed scores and keep the smoothest fraction.
pub fn filter_reports(reports: &[SmoothnessReport], keep_fraction: f64) -> Result<FilterOutcome> {
    let order = select_smoothest(reports, keep_fraction)?;
    let mut kept_flag = vec![false; reports.len()];
    for &i in &order {
        kept_flag[i] = true;
    }
    let rows = reports
        .iter()
        .zip(&kept_flag)
        .map(|(r, &kept)| ReportRow {
            id: r.id.clone(),
            score: r.score,
            flip: r.flip_used,
            kept,
            reason: if kept { String::new() } else { "filtered".into() },
        })
        .collect();
    Ok(FilterOutcome { kept: order.iter().map(|&i| reports[i].id.clone()).collect(), rows })
}

pub fn filter_dataset(
    aligner: &Aligner,
    images: &[(String, Tensor)],
    keep_fraction: f64,
    exec: Execution,
) -> Result<FilterOutcome> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return invalid("keep fraction must lie in (0, 1]");
    }
    let reports: Vec<SmoothnessReport> =
        par::map(exec, images, |(id, x)| smoothness_score(aligner, id, x)).into_iter().collect::<Result<_>>()?;
    filter_reports(&reports, keep_fraction)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.id, r.score, r.flip, r.kept, r.reason));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLimits {
    /// Largest tolerated fraction of output pixels sampled outside the source.
    pub extrapolation_limit: f64,
    /// Largest tolerated magnification of the similarity crop.
    pub zoom_limit: f64,
    pub recursion: usize,
}

impl Default for AlignLimits {
    fn default() -> Self {
        Self { extrapolation_limit: DEFAULT_EXTRAPOLATION_LIMIT, zoom_limit: DEFAULT_ZOOM_LIMIT, recursion: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rejection {
    Zoom,
    Extrapolation,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zoom => "zoom",
            Self::Extrapolation => "extrapolation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedImage {
    pub id: String,
    /// Magnification of the crop: the inverse of the similarity scale.
    pub zoom: f64,
    /// Fraction of output pixels whose source lies outside the image.
    pub extrapolation: f64,
    pub rejection: Option<Rejection>,
    /// The oriented crop, present only when accepted.
    pub image: Option<Tensor>,
}

/// Check a similarity crop against the limits; zoom is tested first.
pub fn judge_crop(sim: &SimilarityParams, resolution: usize, limits: &AlignLimits) -> Result<(f64, f64, Option<Rejection>)> {
    let zoom = 1.0 / sim.scale;
    let extrapolation = grid_from_matrix(&sim.matrix, resolution, resolution)?.out_of_bounds_fraction();
    let rejection = if !(zoom <= limits.zoom_limit) {
        Some(Rejection::Zoom)
    } else if !(extrapolation <= limits.extrapolation_limit) {
        Some(Rejection::Extrapolation)
    } else {
        None
    };
    Ok((zoom, extrapolation, rejection))
}

/// Similarity-only alignment (with recursion) of every image.
pub fn align_dataset(
    network: &WarpNetwork,
    images: &[(String, Tensor)],
    limits: &AlignLimits,
    exec: Execution,
) -> Result<Vec<AlignedImage>> {
    if !(limits.extrapolation_limit > 0.0 && limits.zoom_limit > 0.0) {
        return invalid("alignment limits must be positive");
    }
    let r = network.resolution();
    par::map(exec, images, |(id, x)| {
        let (crop, m) = network.recursive_align(x, 0, limits.recursion.max(1))?;
        let sim = SimilarityParams::from_matrix(&m);
        let (zoom, extrapolation, rejection) = judge_crop(&sim, r, limits)?;
        Ok(AlignedImage {
            id: id.clone(),
            zoom,
            extrapolation,
            rejection,
            image: rejection.is_none().then_some(crop),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: Option<String>,
    pub kept: bool,
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrapolation: Option<f64>,
}

/// Write accepted crops as PNG plus `manifest.json` and `report.csv`.
pub fn write_aligned(dir: &Path, aligned: &[AlignedImage]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for a in aligned {
        let file = match &a.image {
            Some(img) => {
                let name = format!("{}.png", a.id);
                save_png(img, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let reason = a.rejection.map(|r| r.to_string());
        rows.push(ReportRow {
            id: a.id.clone(),
            score: a.extrapolation,
            flip: false,
            kept: a.rejection.is_none(),
            reason: reason.clone().unwrap_or_default(),
        });
        entries.push(ManifestEntry {
            id: a.id.clone(),
            file,
            kept: a.rejection.is_none(),
            reason,
            score: None,
            zoom: Some(a.zoom),
            extrapolation: Some(a.extrapolation),
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
    std::fs::write(dir.join("report.csv"), report_csv(&rows))?;
    Ok(entries)
}
