use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{capped_indices, PageAnnotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceOrigin {
    /// Drawn as the target panel's own crop.
    SelfPanel,
    /// Another occurrence of the same character on the same page.
    SamePage,
    /// No other occurrence existed; the target crop was used instead.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCrop {
    pub character_id: u32,
    pub panel_index: usize,
    /// Page-space box to crop the reference from.
    pub bbox: BBox,
    pub origin: SourceOrigin,
}

impl SourceCrop {
    /// Counts toward the self-source fraction.
    pub fn is_self(&self) -> bool {
        matches!(self.origin, SourceOrigin::SelfPanel | SourceOrigin::Fallback)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub page_id: String,
    pub panel_index: usize,
    pub caption: String,
    /// One source per target character, aligned with `character_boxes`.
    pub sources: Vec<SourceCrop>,
    /// Page-space boxes of the target panel's characters.
    pub character_boxes: Vec<BBox>,
    pub dialog_boxes: Vec<BBox>,
    /// At least one character had to fall back to its target crop.
    pub fallback: bool,
}

impl TrainingSample {
    /// Keep the `n_c` largest target characters (and their sources).
    pub fn capped(mut self, n_c: usize) -> Self {
        let keep = capped_indices(&self.character_boxes, n_c);
        if keep.len() != self.character_boxes.len() {
            self.sources = keep.iter().map(|&i| self.sources[i].clone()).collect();
            self.character_boxes = keep.iter().map(|&i| self.character_boxes[i]).collect();
        }
        self
    }
}

/// Pick a source crop for every character of the target panel.
///
/// With probability `self_rate` the source is the character's own box in the
/// target panel; otherwise it is drawn uniformly from the occurrences of the
/// same page-local id in other panels of the page. Characters with no other
/// occurrence fall back to the target crop.
pub fn sample_training_pair<R: Rng + ?Sized>(
    page: &PageAnnotation,
    panel_index: usize,
    self_rate: f64,
    rng: &mut R,
) -> Result<TrainingSample> {
    let target = page.panels.get(panel_index).ok_or(Error::OutOfRange {
        index: panel_index,
        len: page.panels.len(),
    })?;
    if !(0.0..=1.0).contains(&self_rate) {
        return Err(Error::Config(format!("self_rate {self_rate} outside [0, 1]")));
    }
    let mut sources = Vec::with_capacity(target.characters.len());
    let mut fallback = false;
    for ch in &target.characters {
        let own = SourceCrop {
            character_id: ch.id,
            panel_index,
            bbox: ch.bbox,
            origin: SourceOrigin::SelfPanel,
        };
        // Draw unconditionally so the stream consumed per character is fixed.
        let take_self = rng.gen::<f64>() < self_rate;
        if take_self {
            sources.push(own);
            continue;
        }
        let others: Vec<(usize, BBox)> = page
            .panels
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != panel_index)
            .flat_map(|(j, p)| {
                p.characters
                    .iter()
                    .filter(|c| c.id == ch.id)
                    .map(move |c| (j, c.bbox))
            })
            .collect();
        if others.is_empty() {
            fallback = true;
            sources.push(SourceCrop {
                origin: SourceOrigin::Fallback,
                ..own
            });
        } else {
            let (j, bbox) = others[rng.gen_range(0..others.len())];
            sources.push(SourceCrop {
                character_id: ch.id,
                panel_index: j,
                bbox,
                origin: SourceOrigin::SamePage,
            });
        }
    }
    Ok(TrainingSample {
        page_id: page.page_id.clone(),
        panel_index,
        caption: target.caption.clone(),
        sources,
        character_boxes: target.characters.iter().map(|c| c.bbox).collect(),
        dialog_boxes: target.dialogs.clone(),
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{CharacterInstance, PanelAnnotation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn panel(x: u32, chars: &[(u32, u32)]) -> PanelAnnotation {
        PanelAnnotation {
            bbox: BBox::new(x, 0, x + 100, 100),
            caption: "c".into(),
            characters: chars
                .iter()
                .map(|&(id, off)| CharacterInstance {
                    id,
                    bbox: BBox::new(x + off, 10, x + off + 20, 50),
                })
                .collect(),
            dialogs: vec![],
            caption_optional: false,
        }
    }

    fn fixture() -> PageAnnotation {
        PageAnnotation {
            page_id: "p".into(),
            series: "s".into(),
            image_path: "p.png".into(),
            width: 300,
            height: 100,
            // Character 0 appears in panels 0 and 1; character 1 only in panel 0;
            // character 2 appears in panels 1 and 2.
            panels: vec![panel(0, &[(0, 5), (1, 50)]), panel(100, &[(0, 30), (2, 60)]), panel(200, &[(2, 0)])],
        }
    }

    #[test]
    fn self_rate_one_always_self() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_training_pair(&page, 0, 1.0, &mut rng).unwrap();
            for (src, tb) in s.sources.iter().zip(&s.character_boxes) {
                assert_eq!(src.origin, SourceOrigin::SelfPanel);
                assert_eq!(&src.bbox, tb);
            }
        }
    }

    #[test]
    fn self_rate_zero_uses_the_other_occurrence() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = sample_training_pair(&page, 0, 0.0, &mut rng).unwrap();
            assert_eq!(s.sources[0].panel_index, 1);
            assert_eq!(s.sources[0].bbox, page.panels[1].characters[0].bbox);
            assert_eq!(s.sources[1].origin, SourceOrigin::Fallback);
            assert!(s.fallback);
        }
    }

    #[test]
    fn exhaustive_no_self_when_alternative_exists() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for pi in 0..page.panels.len() {
            for _ in 0..20 {
                let s = sample_training_pair(&page, pi, 0.0, &mut rng).unwrap();
                for (k, src) in s.sources.iter().enumerate() {
                    let id = page.panels[pi].characters[k].id;
                    let has_alt = page
                        .panels
                        .iter()
                        .enumerate()
                        .any(|(j, p)| j != pi && p.characters.iter().any(|c| c.id == id));
                    if has_alt {
                        assert_ne!(src.panel_index, pi);
                        assert_eq!(src.character_id, id);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_panel() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_training_pair(&page, 3, 0.5, &mut rng).is_err());
    }

    #[test]
    fn monte_carlo_half_rate() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            let s = sample_training_pair(&page, 2, 0.5, &mut rng).unwrap();
            hits += s.sources[0].is_self() as usize;
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn capping_keeps_sources_aligned() {
        let page = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_training_pair(&page, 1, 1.0, &mut rng).unwrap().capped(1);
        assert_eq!(s.sources.len(), 1);
        assert_eq!(s.sources[0].bbox, s.character_boxes[0]);
    }
}
