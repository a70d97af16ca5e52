//! A corpus together with its decoded page images.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;

use crate::annotation::{load_corpus, make_split, Bucket, Corpus, PageAnnotation, PanelRef};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{character_crop, load_rgb, panel_crop};

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    corpus: Corpus,
    images: Vec<Arc<RgbImage>>,
}

impl Dataset {
    /// Pair a corpus with one image per page (same order).
    pub fn new(corpus: Corpus, images: Vec<RgbImage>) -> Result<Self> {
        if images.len() != corpus.pages().len() {
            return Err(Error::validation(
                "images",
                format!("{} images for {} pages", images.len(), corpus.pages().len()),
            ));
        }
        for (page, img) in corpus.pages().iter().zip(&images) {
            if img.dimensions() != (page.width, page.height) {
                return Err(Error::validation(
                    format!("{}: width/height", page.page_id),
                    format!(
                        "declared {}x{}, image is {}x{}",
                        page.width,
                        page.height,
                        img.width(),
                        img.height()
                    ),
                ));
            }
        }
        Ok(Dataset {
            corpus,
            images: images.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let corpus = load_corpus(root)?;
        let images = corpus
            .pages()
            .iter()
            .map(|p| load_rgb(&corpus.image_path(p)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(corpus, images)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn pages(&self) -> &[PageAnnotation] {
        self.corpus.pages()
    }

    pub fn image(&self, page: usize) -> &RgbImage {
        &self.images[page]
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn panel_refs(&self) -> Vec<PanelRef> {
        self.pages()
            .iter()
            .enumerate()
            .flat_map(|(page, p)| (0..p.panels.len()).map(move |panel| PanelRef { page, panel }))
            .collect()
    }

    /// Panel pixels resized to a bucket.
    pub fn panel_image(&self, r: PanelRef, bucket: Bucket) -> RgbImage {
        let bbox = self.pages()[r.page].panels[r.panel].bbox;
        panel_crop(&self.images[r.page], &bbox, bucket.width, bucket.height)
    }

    /// Panel pixels at native size.
    pub fn panel_native(&self, r: PanelRef) -> RgbImage {
        let bbox = self.pages()[r.page].panels[r.panel].bbox;
        panel_crop(&self.images[r.page], &bbox, bbox.width(), bbox.height())
    }

    /// Square, white-padded reference crop of a page-space box.
    pub fn reference(&self, page: usize, bbox: &BBox, size: u32) -> RgbImage {
        character_crop(&self.images[page], bbox, size)
    }

    /// Train/eval split by series; see [`make_split`].
    pub fn split(&self, eval_pages_per_series: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, eval) = make_split(&self.corpus, eval_pages_per_series, seed)?;
        Ok((self.subset(train), self.subset(eval)))
    }

    fn subset(&self, corpus: Corpus) -> Dataset {
        let images = corpus
            .pages()
            .iter()
            .map(|p| {
                let i = self
                    .pages()
                    .iter()
                    .position(|q| q.page_id == p.page_id)
                    .expect("split pages come from this corpus");
                self.images[i].clone()
            })
            .collect();
        Dataset { corpus, images }
    }

    /// Write one JSON document and one PNG per page under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (page, img) in self.pages().iter().zip(&self.images) {
            let json = dir.join(format!("{}.json", page.page_id));
            std::fs::write(&json, page.to_json()).map_err(|e| Error::io(&json, e))?;
            let png = dir.join(&page.image_path);
            img.save(&png).map_err(|e| Error::Image { path: png, source: e })?;
        }
        Ok(())
    }
}
