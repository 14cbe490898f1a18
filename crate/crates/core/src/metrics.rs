//! Evaluation metrics (masked PSNR, box SSIM, CLIP-style similarities) and
//! the benchmark harness over a dataset directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Embedder};
use crate::image_io::{load_mask_png, load_png, ImageIoError};
use crate::render::Camera;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("box {0:?} smaller than the 11x11 SSIM window or out of bounds")]
    BoxTooSmall(BBox),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("missing scene {0}")]
    MissingScene(String),
    #[error("camera mismatch in scene {scene}: {detail}")]
    CameraMismatch { scene: String, detail: String },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.row_max + 1 - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max + 1 - self.col_min
    }
}

/// Soft masks count a pixel when its value is at least 0.5.
pub const MASK_THRESHOLD: f64 = 0.5;

fn check_shapes<T: Real>(a: &Array3<T>, b: &Array3<T>) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// PSNR (peak 1) over masked pixels; `f64::INFINITY` when they match exactly.
pub fn psnr_part<T: Real>(pred: &Array3<T>, gt: &Array3<T>, mask: &Array2<T>) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    let (h, w, c) = pred.dim();
    if mask.dim() != (h, w) {
        return Err(MetricsError::ShapeMismatch(pred.shape().to_vec(), mask.shape().to_vec()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]].as_f64() >= MASK_THRESHOLD {
                for k in 0..c {
                    let d = pred[[y, x, k]].as_f64() - gt[[y, x, k]].as_f64();
                    sum += d * d;
                }
                n += c;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(a: ArrayView2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = a.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..SSIM_WINDOW).map(|i| taps[i] * a[[y, x + i]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..SSIM_WINDOW).map(|i| taps[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images over all valid 11×11 windows.
pub fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let taps = gaussian_taps();
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid((&a * &a).view(), &taps);
    let bb = filter_valid((&b * &b).view(), &taps);
    let ab = filter_valid((&a * &b).view(), &taps);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

/// SSIM inside `bbox`, averaged over channels.
pub fn ssim_part<T: Real>(pred: &Array3<T>, gt: &Array3<T>, bbox: BBox) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    let (h, w, c) = pred.dim();
    if bbox.row_min > bbox.row_max
        || bbox.col_min > bbox.col_max
        || bbox.row_max >= h
        || bbox.col_max >= w
        || bbox.height() < SSIM_WINDOW
        || bbox.width() < SSIM_WINDOW
    {
        return Err(MetricsError::BoxTooSmall(bbox));
    }
    let crop = |img: &Array3<T>, k: usize| {
        img.slice(s![bbox.row_min..=bbox.row_max, bbox.col_min..=bbox.col_max, k])
            .mapv(|v| v.as_f64())
    };
    let total: f64 = (0..c).map(|k| ssim_channel(crop(pred, k).view(), crop(gt, k).view())).sum();
    Ok(total / c as f64)
}

/// Tight box around pixels at or above the mask threshold.
pub fn bbox_from_mask<T: Real>(mask: &Array2<T>) -> Result<BBox, MetricsError> {
    let mut b: Option<BBox> = None;
    for ((y, x), v) in mask.indexed_iter() {
        if v.as_f64() >= MASK_THRESHOLD {
            b = Some(match b {
                None => BBox {
                    row_min: y,
                    col_min: x,
                    row_max: y,
                    col_max: x,
                },
                Some(b) => BBox {
                    row_min: b.row_min.min(y),
                    col_min: b.col_min.min(x),
                    row_max: b.row_max.max(y),
                    col_max: b.col_max.max(x),
                },
            });
        }
    }
    b.ok_or(MetricsError::EmptyMask)
}

/// Grows `b` symmetrically (clamped to the image) until it spans at least
/// one SSIM window.
pub fn pad_bbox(b: BBox, height: usize, width: usize) -> BBox {
    fn grow(lo: usize, hi: usize, len: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (lo, hi);
        while hi + 1 - lo < SSIM_WINDOW.min(len) {
            if lo > 0 {
                lo -= 1;
            }
            if hi + 1 - lo < SSIM_WINDOW.min(len) && hi + 1 < len {
                hi += 1;
            }
        }
        (lo, hi)
    }
    let (row_min, row_max) = grow(b.row_min, b.row_max, height);
    let (col_min, col_max) = grow(b.col_min, b.col_max, width);
    BBox {
        row_min,
        col_min,
        row_max,
        col_max,
    }
}

/// `(cos + 1) / 2` of two vectors.
pub fn normalized_cosine(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricsError::Backend(BackendError("zero embedding".into())));
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((cos + 1.0) / 2.0)
}

fn to_f32<T: Real>(a: &Array3<T>) -> Array3<f32> {
    a.mapv(|v| v.as_f32())
}

/// Text-image similarity in `[0,1]`.
pub fn ctis<T: Real>(image: &Array3<T>, prompt: &str, embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    let i = embedder.embed_image(&to_f32(image))?;
    let t = embedder.embed_text(prompt)?;
    normalized_cosine(&i, &t)
}

/// Image-image similarity in `[0,1]`.
pub fn dtis<T: Real>(image_tgt: &Array3<T>, image_init: &Array3<T>, embedder: &dyn Embedder) -> Result<f64, MetricsError> {
    let a = embedder.embed_image(&to_f32(image_tgt))?;
    let b = embedder.embed_image(&to_f32(image_init))?;
    normalized_cosine(&a, &b)
}

/// Published averages for the two-step DDS method on the benchmark, used to
/// format comparison reports.
pub const REFERENCE_OURS_AVG: MetricsRow = MetricsRow {
    scene: String::new(),
    psnr_part: 8.863,
    ssim_part: 0.540,
    ctis: Some(0.627),
    dtis: Some(0.509),
    views: 0,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_part: f64,
    pub ssim_part: f64,
    pub ctis: Option<f64>,
    pub dtis: Option<f64>,
    pub views: usize,
}

fn ser_db<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub embedder: Option<String>,
    pub scenes: Vec<MetricsRow>,
    pub average: MetricsRow,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl MetricsReport {
    /// One metric per row, one scene per column, average last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.scenes {
            out.push(',');
            out.push_str(&r.scene);
        }
        out.push_str(",avg\n");
        let rows: [(&str, Box<dyn Fn(&MetricsRow) -> String>); 4] = [
            ("psnr_part", Box::new(|r| fmt_num(r.psnr_part))),
            ("ssim_part", Box::new(|r| fmt_num(r.ssim_part))),
            ("ctis", Box::new(|r| fmt_opt(r.ctis))),
            ("dtis", Box::new(|r| fmt_opt(r.dtis))),
        ];
        for (name, f) in rows.iter() {
            out.push_str(name);
            for r in self.scenes.iter().chain(std::iter::once(&self.average)) {
                out.push(',');
                out.push_str(&f(r));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), MetricsError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::File::create(dir.join("report.csv"))?.write_all(self.to_csv().as_bytes())?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| MetricsError::Malformed(e.to_string()))?;
        fs::write(dir.join("report.json"), json)?;
        Ok(())
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>, MetricsError> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Directory of the ground-truth composite views of one scene.
pub fn object_scene_dir(root: &Path, scene: &str) -> PathBuf {
    root.join(scene).join("object_scene")
}

/// Evaluates every scene of `dataset_root` against `outputs/{scene}/images`.
///
/// Ground truth lives in `{scene}/object_scene/{images,masks}/<id>.png` with
/// camera ids listed in `cameras.json` (an object of id → camera). CTIS uses
/// the text in `{scene}/prompt.txt` when present.
pub fn run_benchmark(
    dataset_root: &Path,
    outputs: &Path,
    embedder: Option<&dyn Embedder>,
) -> Result<MetricsReport, MetricsError> {
    let mut scenes: Vec<String> = Vec::new();
    for entry in fs::read_dir(dataset_root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            scenes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    scenes.sort();
    if scenes.is_empty() {
        return Err(MetricsError::Malformed(format!("no scenes under {}", dataset_root.display())));
    }

    let mut rows = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let gt_dir = object_scene_dir(dataset_root, scene);
        let cams_path = gt_dir.join("cameras.json");
        let cams_text = fs::read_to_string(&cams_path)
            .map_err(|e| MetricsError::Malformed(format!("{}: {e}", cams_path.display())))?;
        let cams: BTreeMap<String, Camera<f64>> = serde_json::from_str(&cams_text)
            .map_err(|e| MetricsError::Malformed(format!("{}: {e}", cams_path.display())))?;
        let pred_dir = outputs.join(scene).join("images");
        if !pred_dir.is_dir() {
            return Err(MetricsError::MissingScene(scene.clone()));
        }
        let ids: BTreeSet<String> = cams.keys().cloned().collect();
        let pred_ids = png_stems(&pred_dir)?;
        if ids != pred_ids {
            let missing: Vec<_> = ids.difference(&pred_ids).cloned().collect();
            let extra: Vec<_> = pred_ids.difference(&ids).cloned().collect();
            return Err(MetricsError::CameraMismatch {
                scene: scene.clone(),
                detail: format!("missing {missing:?}, unexpected {extra:?}"),
            });
        }
        if ids.is_empty() {
            return Err(MetricsError::CameraMismatch {
                scene: scene.clone(),
                detail: "no cameras".into(),
            });
        }
        let prompt = fs::read_to_string(dataset_root.join(scene).join("prompt.txt"))
            .ok()
            .map(|s| s.trim().to_string());

        let (mut psnr, mut ssim, mut ct, mut dt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for id in &ids {
            let gt: Array3<f64> = load_png(gt_dir.join("images").join(format!("{id}.png")))?;
            let mask: Array2<f64> = load_mask_png(gt_dir.join("masks").join(format!("{id}.png")))?;
            let pred: Array3<f64> = load_png(pred_dir.join(format!("{id}.png")))?;
            let cam = &cams[id];
            if pred.dim() != gt.dim() || (cam.height, cam.width) != (gt.dim().0, gt.dim().1) {
                return Err(MetricsError::CameraMismatch {
                    scene: scene.clone(),
                    detail: format!("view {id} resolution disagrees with its camera"),
                });
            }
            psnr.push(psnr_part(&pred, &gt, &mask)?);
            let b = pad_bbox(bbox_from_mask(&mask)?, gt.dim().0, gt.dim().1);
            ssim.push(ssim_part(&pred, &gt, b)?);
            if let Some(e) = embedder {
                if let Some(p) = &prompt {
                    ct.push(ctis(&pred, p, e)?);
                }
                dt.push(dtis(&pred, &gt, e)?);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(MetricsRow {
            scene: scene.clone(),
            psnr_part: mean(&psnr),
            ssim_part: mean(&ssim),
            ctis: (!ct.is_empty()).then(|| mean(&ct)),
            dtis: (!dt.is_empty()).then(|| mean(&dt)),
            views: ids.len(),
        });
    }

    let n = rows.len() as f64;
    let average = MetricsRow {
        scene: "avg".into(),
        psnr_part: rows.iter().map(|r| r.psnr_part).sum::<f64>() / n,
        ssim_part: rows.iter().map(|r| r.ssim_part).sum::<f64>() / n,
        ctis: mean_opt(rows.iter().map(|r| r.ctis)),
        dtis: mean_opt(rows.iter().map(|r| r.dtis)),
        views: rows.iter().map(|r| r.views).sum(),
    };
    Ok(MetricsReport {
        embedder: embedder.map(|e| e.name()),
        scenes: rows,
        average,
    })
}
