//! Panel metrics: dialog-box F1, embedding similarities, text alignment and
//! a Fréchet distance, all behind pluggable scorer traits.

use std::fmt::Write as _;
use std::sync::Mutex;

use candle_core::{DType, Device};
use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{sample_training_pair, Bucket, BucketSet, PanelRef, DEFAULT_BUCKETS};
use crate::dataset::Dataset;
use crate::diffusion::{generate_panel, FeatureAdapter, Model, PanelSpec, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::encoders::{ConvEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{crop, images_to_tensor, prepare_reference};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Greedy one-to-one matching in descending IoU order; a pair matches when
/// its IoU reaches `threshold`. Both sets empty scores 1, exactly one empty 0.
pub fn dialog_f1(predicted: &[BBox], truth: &[BBox], threshold: f64) -> F1Score {
    if predicted.is_empty() && truth.is_empty() {
        return F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    if predicted.is_empty() || truth.is_empty() {
        return F1Score {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let v = p.iou(t);
            if v >= threshold {
                pairs.push((v, i, j));
            }
        }
    }
    // Ties broken by index so the result is order-independent only through IoU.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_t = vec![false; truth.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / truth.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score { precision, recall, f1 }
}

/// Image to feature vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Agreement between an image and a caption.
pub trait TextScorer: Send + Sync {
    fn score(&self, img: &RgbImage, caption: &str) -> Result<f64>;
}

/// Finds dialog regions in a generated panel.
pub trait DialogDetector: Send + Sync {
    fn detect(&self, img: &RgbImage) -> Result<Vec<BBox>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between each generated character region and its
/// reference. `None` when there are no characters.
pub fn character_similarity(
    generated: &RgbImage,
    boxes: &[BBox],
    references: &[RgbImage],
    embedder: &dyn Embedder,
) -> Result<Option<f64>> {
    if boxes.len() != references.len() {
        return Err(Error::validation(
            "references",
            format!("{} references for {} boxes", references.len(), boxes.len()),
        ));
    }
    if boxes.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (i, (b, r)) in boxes.iter().zip(references).enumerate() {
        if !b.is_proper() || !b.within(generated.width(), generated.height()) {
            return Err(Error::validation(format!("boxes[{i}]"), "outside the generated image"));
        }
        sum += cosine(&embedder.embed(&crop(generated, b))?, &embedder.embed(r)?);
    }
    Ok(Some(sum / boxes.len() as f64))
}

pub fn image_similarity(a: &RgbImage, b: &RgbImage, embedder: &dyn Embedder) -> Result<f64> {
    Ok(cosine(&embedder.embed(a)?, &embedder.embed(b)?))
}

/// Fixed-seed convolutional embedder (square-padded, resized input).
pub struct ToyEmbedder {
    encoder: ConvEncoder,
    size: u32,
}

impl ToyEmbedder {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = EncoderConfig::default();
        let ps = ParamStore::new(seed, DType::F32);
        Ok(ToyEmbedder {
            encoder: ConvEncoder::new(&ps, "embedder", &cfg)?,
            size: cfg.crop_size as u32,
        })
    }
}

impl Embedder for ToyEmbedder {
    fn embed(&self, img: &RgbImage) -> Result<Vec<f64>> {
        let x = prepare_reference(img, self.size);
        let t = images_to_tensor(&[&x], DType::F32, &Device::Cpu)?;
        let e = self.encoder.forward(&t)?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(e.to_vec1::<f64>()?)
    }
}

/// Reports connected near-white regions on a coarse grid as dialog boxes.
#[derive(Debug, Clone, Copy)]
pub struct BrightRegionDetector {
    pub cell: u32,
    /// Minimum mean channel value of a bright cell.
    pub threshold: f64,
    /// Smallest region kept, in cells.
    pub min_cells: usize,
}

impl Default for BrightRegionDetector {
    fn default() -> Self {
        BrightRegionDetector {
            cell: 8,
            threshold: 230.0,
            min_cells: 2,
        }
    }
}

impl DialogDetector for BrightRegionDetector {
    fn detect(&self, img: &RgbImage) -> Result<Vec<BBox>> {
        let c = self.cell.max(1);
        let (gw, gh) = ((img.width() / c) as usize, (img.height() / c) as usize);
        let mut bright = vec![false; gw * gh];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut s = 0.0;
                for y in 0..c {
                    for x in 0..c {
                        let p = img.get_pixel(gx as u32 * c + x, gy as u32 * c + y).0;
                        s += p.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
                    }
                }
                bright[gy * gw + gx] = s / (c * c) as f64 >= self.threshold;
            }
        }
        let mut seen = vec![false; gw * gh];
        let mut out = Vec::new();
        for start in 0..gw * gh {
            if !bright[start] || seen[start] {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let mut stack = vec![start];
            seen[start] = true;
            let mut n = 0;
            while let Some(i) = stack.pop() {
                n += 1;
                let (x, y) = (i % gw, i / gw);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let mut push = |j: usize| {
                    if bright[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < gw {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - gw);
                }
                if y + 1 < gh {
                    push(i + gw);
                }
            }
            if n >= self.min_cells {
                let s = |v: usize| v as u32 * c;
                out.push(BBox::new(s(x0), s(y0), s(x1), s(y1)));
            }
        }
        Ok(out)
    }
}

/// Scores a caption by how much of the image is covered by the colors it
/// names: cosine between the caption's color-word indicator and the image's
/// nearest-palette-color histogram.
pub struct PaletteTextScorer {
    palette: Vec<(String, [u8; 3])>,
}

impl PaletteTextScorer {
    pub fn new(palette: Vec<(String, [u8; 3])>) -> Self {
        PaletteTextScorer { palette }
    }
}

impl TextScorer for PaletteTextScorer {
    fn score(&self, img: &RgbImage, caption: &str) -> Result<f64> {
        let words: Vec<String> = caption.split_whitespace().map(|w| w.to_lowercase()).collect();
        let named: Vec<f64> = self
            .palette
            .iter()
            .map(|(n, _)| if words.iter().any(|w| w == n) { 1.0 } else { 0.0 })
            .collect();
        let mut hist = vec![0.0; self.palette.len()];
        for p in img.pixels() {
            let d = |c: &[u8; 3]| -> i32 { (0..3).map(|k| (p.0[k] as i32 - c[k] as i32).pow(2)).sum() };
            if let Some((k, _)) = self.palette.iter().enumerate().min_by_key(|(_, (_, c))| d(c)) {
                hist[k] += 1.0;
            }
        }
        Ok(cosine(&named, &hist))
    }
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let fit = |xs: &[Vec<f64>]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = xs.len();
        let d = xs.first().map(|x| x.len()).unwrap_or(0);
        if n < 2 || d == 0 {
            return Err(Error::Config("Fréchet distance needs at least two samples".into()));
        }
        let m = DMatrix::from_fn(n, d, |i, j| xs[i][j]);
        let mean = m.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok((mean, cov))
    };
    let (m1, s1) = fit(a)?;
    let (m2, s2) = fit(b)?;
    if m1.len() != m2.len() {
        return Err(Error::shape("frechet_distance", "embedding widths differ"));
    }
    let sqrt_psd = |m: &DMatrix<f64>| {
        let sym = (m + m.transpose()) * 0.5;
        let e = sym.symmetric_eigen();
        let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
    };
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1));
    let diff = &m1 - &m2;
    Ok((diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross.trace()).max(0.0))
}

/// Scorers available to an evaluation run; missing ones leave their metric
/// unavailable.
#[derive(Default)]
pub struct Oracles<'a> {
    pub embedder: Option<&'a dyn Embedder>,
    pub text: Option<&'a dyn TextScorer>,
    pub detector: Option<&'a dyn DialogDetector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iou_threshold: f64,
    /// Fewest samples for which a Fréchet distance is reported.
    pub fid_floor: usize,
    pub matching: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            steps: 50,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            iou_threshold: 0.5,
            fid_floor: 50,
            matching: "greedy-descending-iou".into(),
        }
    }
}

impl EvalOptions {
    pub fn config_hash(&self) -> String {
        let v = serde_json::to_value(self).expect("options serialize");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: Option<f64>,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub panels: usize,
    pub metrics: Vec<Metric>,
}

pub const METRICS: [&str; 5] = ["fid", "text_alignment", "image_similarity", "character_similarity", "dialog_f1"];

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).and_then(|m| m.value)
    }

    /// Every reported value lies in its metric's range.
    pub fn check_ranges(&self) -> Result<()> {
        for m in &self.metrics {
            let Some(v) = m.value else { continue };
            let ok = match m.name.as_str() {
                "fid" => v >= 0.0 && v.is_finite(),
                "dialog_f1" => (0.0..=1.0).contains(&v),
                _ => (-1.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::validation(m.name.clone(), format!("value {v} out of range")));
            }
        }
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for m in &self.metrics {
            let w = m.name.len().max(8);
            let _ = write!(head, "| {:<w$} ", m.name);
            let v = m.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = write!(row, "| {v:<w$} ");
        }
        let mut out = format!("{head}|\n{row}|\n");
        let _ = writeln!(out, "panels: {}  config: {}", self.panels, &self.config_hash[..12.min(self.config_hash.len())]);
        for m in self.metrics.iter().filter(|m| m.note.is_some()) {
            let _ = writeln!(out, "note: {}: {}", m.name, m.note.as_deref().unwrap_or(""));
        }
        out
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Generation request reproducing a dataset panel at its bucket size, with
/// references cropped from the same page (source choice as in training).
pub fn panel_spec(
    model: &Model,
    ds: &Dataset,
    r: PanelRef,
    buckets: &BucketSet,
    self_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PanelSpec, Bucket)> {
    let page = &ds.pages()[r.page];
    let panel = &page.panels[r.panel];
    let sample = sample_training_pair(page, r.panel, self_rate, rng)?.capped(model.n_c());
    let bucket = buckets.assign(panel.bbox.width(), panel.bbox.height());
    let size = (bucket.width, bucket.height);
    let local = |b: &BBox| b.relative_to(&panel.bbox).rescale(panel.size(), size);
    let crop_size = model.config.encoder.crop_size as u32;
    let mut spec = PanelSpec::new(panel.caption.clone(), size.0, size.1);
    spec.characters = sample
        .sources
        .iter()
        .zip(&sample.character_boxes)
        .map(|(s, b)| (ds.reference(r.page, &s.bbox, crop_size), local(b)))
        .collect();
    spec.dialogs = sample.dialog_boxes.iter().map(local).collect();
    Ok((spec, bucket))
}

/// Generate one panel per eval record (references drawn from other panels of
/// the same page where possible) and score it with the given oracles.
pub fn run_eval(
    model: &Model,
    adapter: Option<&dyn FeatureAdapter>,
    eval: &Dataset,
    oracles: &Oracles,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let buckets = BucketSet::new(DEFAULT_BUCKETS.to_vec(), model.config.size_multiple())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut text, mut image, mut chars, mut f1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut gen_emb, mut real_emb) = (Vec::new(), Vec::new());
    let refs = eval.panel_refs();
    for (k, r) in refs.iter().enumerate() {
        let panel = &eval.pages()[r.page].panels[r.panel];
        let (mut spec, bucket) = panel_spec(model, eval, *r, &buckets, 0.0, &mut rng)?;
        let (references, boxes): (Vec<RgbImage>, Vec<BBox>) = spec.characters.iter().cloned().unzip();
        spec.alpha = opts.alpha;
        spec.beta = opts.beta;
        spec.steps = opts.steps;
        spec.seed = opts.seed.wrapping_add(k as u64);
        let generated = generate_panel(model, adapter, &spec)?;
        let real = eval.panel_image(*r, bucket);
        if let Some(t) = oracles.text {
            text.push(t.score(&generated, &panel.caption)?);
        }
        if let Some(e) = oracles.embedder {
            let g = e.embed(&generated)?;
            let rl = e.embed(&real)?;
            image.push(cosine(&g, &rl));
            gen_emb.push(g);
            real_emb.push(rl);
            if let Some(s) = character_similarity(&generated, &boxes, &references, e)? {
                chars.push(s);
            }
        }
        if let Some(d) = oracles.detector {
            f1.push(dialog_f1(&d.detect(&generated)?, &spec.dialogs, opts.iou_threshold).f1);
        }
    }
    let unavailable = |name: &str, oracle: bool| {
        (!oracle).then(|| format!("no {name} oracle provided"))
    };
    let fid = if oracles.embedder.is_some() && gen_emb.len() >= opts.fid_floor.max(2) {
        Some(frechet_distance(&gen_emb, &real_emb)?)
    } else {
        None
    };
    let fid_note = if oracles.embedder.is_none() {
        unavailable("embedder", false)
    } else if fid.is_none() {
        Some(format!(
            "{} samples is below the floor of {}; not reported",
            gen_emb.len(),
            opts.fid_floor
        ))
    } else if gen_emb.len() < 10 * gen_emb.first().map(|e| e.len()).unwrap_or(0) {
        Some("small sample: covariance estimate is rank deficient".into())
    } else {
        None
    };
    let metrics = vec![
        Metric {
            name: "fid".into(),
            value: fid,
            samples: gen_emb.len(),
            note: fid_note,
        },
        Metric {
            name: "text_alignment".into(),
            value: mean(&text),
            samples: text.len(),
            note: unavailable("text", oracles.text.is_some()),
        },
        Metric {
            name: "image_similarity".into(),
            value: mean(&image),
            samples: image.len(),
            note: unavailable("embedder", oracles.embedder.is_some()),
        },
        Metric {
            name: "character_similarity".into(),
            value: mean(&chars),
            samples: chars.len(),
            note: unavailable("embedder", oracles.embedder.is_some()),
        },
        Metric {
            name: "dialog_f1".into(),
            value: mean(&f1),
            samples: f1.len(),
            note: unavailable("detector", oracles.detector.is_some()),
        },
    ];
    let report = MetricReport {
        config_hash: opts.config_hash(),
        panels: refs.len(),
        metrics,
    };
    report.check_ranges()?;
    Ok(report)
}

/// Detector that replays a fixed list of answers, one per call.
pub struct ScriptedDetector {
    answers: Mutex<std::collections::VecDeque<Vec<BBox>>>,
}

impl ScriptedDetector {
    pub fn new(answers: Vec<Vec<BBox>>) -> Self {
        ScriptedDetector {
            answers: Mutex::new(answers.into()),
        }
    }
}

impl DialogDetector for ScriptedDetector {
    fn detect(&self, _img: &RgbImage) -> Result<Vec<BBox>> {
        Ok(self.answers.lock().unwrap().pop_front().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn f1_hand_cases() {
        let a = BBox::new(0, 0, 10, 10);
        let b = BBox::new(20, 20, 30, 30);
        assert_eq!(dialog_f1(&[a, b], &[a, b], 0.5).f1, 1.0);
        assert_eq!(dialog_f1(&[a], &[b], 0.5).f1, 0.0);
        assert_eq!(dialog_f1(&[], &[], 0.5).f1, 1.0);
        assert_eq!(dialog_f1(&[a], &[], 0.5).f1, 0.0);
        // IoU 0.6: [0,0,10,10] vs [0,0,6,10] -> 60/100.
        let t = BBox::new(0, 0, 6, 10);
        assert!((a.iou(&t) - 0.6).abs() < 1e-12);
        let s = dialog_f1(&[a, b], &[t], 0.5);
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn detector_finds_white_rectangle() {
        let mut img = RgbImage::from_pixel(64, 64, Rgb([40, 90, 120]));
        crate::synthetic::fill_rect(&mut img, &BBox::new(16, 8, 48, 24), [255, 255, 255]);
        let found = BrightRegionDetector::default().detect(&img).unwrap();
        assert_eq!(found, vec![BBox::new(16, 8, 48, 24)]);
    }

    #[test]
    fn frechet_of_identical_sets_is_zero() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        assert!(frechet_distance(&xs, &xs).unwrap() < 1e-9);
        let shifted: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 2.0, x[1]]).collect();
        assert!((frechet_distance(&xs, &shifted).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn character_similarity_missing_when_empty() {
        let e = ToyEmbedder::new(0).unwrap();
        let img = RgbImage::new(32, 32);
        assert_eq!(character_similarity(&img, &[], &[], &e).unwrap(), None);
    }
}
