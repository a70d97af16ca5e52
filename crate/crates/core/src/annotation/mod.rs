//! Page/panel annotation model, corpus loading and validation, and splits.
//!
//! One JSON document per page:
//!
//! ```json
//! {"page_id": "p0", "series": "s0", "image": "p0.png", "width": 256, "height": 256,
//!  "panels": [{"bbox": [0,0,128,128], "caption": "...",
//!              "characters": [{"id": 0, "bbox": [4,4,60,100]}],
//!              "dialogs": [{"bbox": [70,4,120,40]}]}]}
//! ```
//!
//! Coordinates are absolute page pixels. Character and dialog boxes are clipped
//! to their panel on load; the clipped form is the canonical form.

mod buckets;
mod sampling;

pub use buckets::{bucket_batches, shuffled_epoch, Batch, BatchSizing, Bucket, BucketSet, PanelRef, DEFAULT_BUCKETS};
pub use sampling::{sample_training_pair, SourceCrop, SourceOrigin, TrainingSample};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacterInstance {
    /// Page-local identity; only comparable within one page.
    pub id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogEntry {
    bbox: BBox,
}

mod dialog_list {
    use super::DialogEntry;
    use crate::geometry::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[BBox], s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<DialogEntry> = v.iter().map(|&bbox| DialogEntry { bbox }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BBox>, D::Error> {
        Ok(Vec::<DialogEntry>::deserialize(d)?
            .into_iter()
            .map(|e| e.bbox)
            .collect())
    }
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelAnnotation {
    pub bbox: BBox,
    pub caption: String,
    #[serde(default)]
    pub characters: Vec<CharacterInstance>,
    #[serde(default, with = "dialog_list")]
    pub dialogs: Vec<BBox>,
    /// Set when an empty caption is intentional.
    #[serde(default, skip_serializing_if = "is_false")]
    pub caption_optional: bool,
}

impl PanelAnnotation {
    pub fn size(&self) -> (u32, u32) {
        (self.bbox.width(), self.bbox.height())
    }

    /// Character boxes relative to the panel's top-left corner.
    pub fn local_character_boxes(&self) -> Vec<BBox> {
        self.characters.iter().map(|c| c.bbox.relative_to(&self.bbox)).collect()
    }

    pub fn local_dialog_boxes(&self) -> Vec<BBox> {
        self.dialogs.iter().map(|d| d.relative_to(&self.bbox)).collect()
    }

    /// Indices of the characters kept under a cap of `n_c`: the `n_c` largest
    /// boxes by area (earlier index wins ties), returned in original order.
    pub fn capped_character_indices(&self, n_c: usize) -> Vec<usize> {
        capped_indices(&self.characters.iter().map(|c| c.bbox).collect::<Vec<_>>(), n_c)
    }
}

pub(crate) fn capped_indices(boxes: &[BBox], n_c: usize) -> Vec<usize> {
    if boxes.len() <= n_c {
        return (0..boxes.len()).collect();
    }
    log::warn!(
        "panel has {} characters, keeping the {} largest",
        boxes.len(),
        n_c
    );
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].area().cmp(&boxes[a].area()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(n_c).collect();
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageAnnotation {
    pub page_id: String,
    pub series: String,
    #[serde(rename = "image")]
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// Reading order (right-to-left, top-to-bottom) as stored.
    pub panels: Vec<PanelAnnotation>,
}

impl PageAnnotation {
    /// Parse one page document, reporting the serde field path on failure.
    pub fn from_json(file: &str, bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            file: file.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("page annotation serializes")
    }

    /// Enforce the box invariants and clip character/dialog boxes to their
    /// panel. Returns the canonical page.
    pub fn canonicalize(mut self) -> Result<Self> {
        let where_ = |suffix: String| format!("page {}: {}", self.page_id, suffix);
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(where_("size".into()), "page has zero area"));
        }
        if self.page_id.is_empty() {
            return Err(Error::validation(where_("page_id".into()), "empty page id"));
        }
        for (pi, panel) in self.panels.iter_mut().enumerate() {
            let pb = panel.bbox;
            if !pb.is_proper() || !pb.within(self.width, self.height) {
                return Err(Error::validation(
                    format!("page {}: panels[{pi}].bbox", self.page_id),
                    format!("panel box {:?} is degenerate or outside the {}x{} page", <[u32; 4]>::from(pb), self.width, self.height),
                ));
            }
            if panel.caption.trim().is_empty() && !panel.caption_optional {
                return Err(Error::validation(
                    format!("page {}: panels[{pi}].caption", self.page_id),
                    "empty caption without caption_optional",
                ));
            }
            for (ci, ch) in panel.characters.iter_mut().enumerate() {
                ch.bbox = clip_box(ch.bbox, &pb).ok_or_else(|| {
                    Error::validation(
                        format!("page {}: panels[{pi}].characters[{ci}].bbox", self.page_id),
                        format!("box {:?} is degenerate or outside its panel", <[u32; 4]>::from(ch.bbox)),
                    )
                })?;
            }
            for (di, d) in panel.dialogs.iter_mut().enumerate() {
                *d = clip_box(*d, &pb).ok_or_else(|| {
                    Error::validation(
                        format!("page {}: panels[{pi}].dialogs[{di}].bbox", self.page_id),
                        format!("box {:?} is degenerate or outside its panel", <[u32; 4]>::from(*d)),
                    )
                })?;
            }
        }
        Ok(self)
    }
}

fn clip_box(b: BBox, panel: &BBox) -> Option<BBox> {
    if !b.is_proper() {
        return None;
    }
    b.intersection(panel)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pages: usize,
    pub panels: usize,
    pub char_instances: usize,
    pub dialogs: usize,
    pub series: usize,
}

/// Immutable collection of validated pages.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    root: Option<PathBuf>,
    pages: Vec<PageAnnotation>,
}

impl Corpus {
    /// Validate in-memory pages (image files are not checked).
    pub fn from_pages(pages: Vec<PageAnnotation>) -> Result<Self> {
        let pages = pages
            .into_iter()
            .map(PageAnnotation::canonicalize)
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { root: None, pages })
    }

    pub fn pages(&self) -> &[PageAnnotation] {
        &self.pages
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn image_path(&self, page: &PageAnnotation) -> PathBuf {
        match &self.root {
            Some(r) => r.join(&page.image_path),
            None => PathBuf::from(&page.image_path),
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let mut series: Vec<&str> = self.pages.iter().map(|p| p.series.as_str()).collect();
        series.sort_unstable();
        series.dedup();
        let panels = self.pages.iter().flat_map(|p| &p.panels);
        let (mut np, mut nc, mut nd) = (0, 0, 0);
        for panel in panels {
            np += 1;
            nc += panel.characters.len();
            nd += panel.dialogs.len();
        }
        CorpusStats {
            pages: self.pages.len(),
            panels: np,
            char_instances: nc,
            dialogs: nd,
            series: series.len(),
        }
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Corpus {
        Corpus {
            root: self.root.clone(),
            pages: self
                .pages
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, p)| p.clone())
                .collect(),
        }
    }
}

/// Load every `*.json` page document directly under `root`.
pub fn load_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    let mut pages = Vec::with_capacity(files.len());
    let mut seen = BTreeMap::new();
    for file in files {
        let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let name = file.display().to_string();
        let page = PageAnnotation::from_json(&name, &bytes)?.canonicalize()?;
        if let Some(prev) = seen.insert(page.page_id.clone(), name.clone()) {
            return Err(Error::validation(
                format!("{name}: page_id"),
                format!("duplicate page id {} (also in {prev})", page.page_id),
            ));
        }
        let img = root.join(&page.image_path);
        let (w, h) = image::image_dimensions(&img).map_err(|e| Error::Image {
            path: img.clone(),
            source: e,
        })?;
        if (w, h) != (page.width, page.height) {
            return Err(Error::validation(
                format!("{name}: width/height"),
                format!("declared {}x{}, image is {w}x{h}", page.width, page.height),
            ));
        }
        pages.push(page);
    }
    Ok(Corpus {
        root: Some(root.to_path_buf()),
        pages,
    })
}

/// Hold out exactly `eval_pages_per_series` pages from every series.
///
/// Per-series page order is shuffled with a ChaCha stream seeded by `seed`;
/// the first pages of the shuffle go to eval. Both outputs keep corpus order.
pub fn make_split(corpus: &Corpus, eval_pages_per_series: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    if eval_pages_per_series == 0 {
        return Ok((corpus.clone(), corpus.subset(|_| false)));
    }
    let mut by_series: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in corpus.pages.iter().enumerate() {
        by_series.entry(p.series.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = vec![false; corpus.pages.len()];
    for (series, mut idx) in by_series {
        if idx.len() <= eval_pages_per_series {
            return Err(Error::SeriesTooSmall {
                series: series.to_string(),
                pages: idx.len(),
                required: eval_pages_per_series,
            });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..eval_pages_per_series] {
            eval[i] = true;
        }
    }
    Ok((corpus.subset(|i| !eval[i]), corpus.subset(|i| eval[i])))
}
