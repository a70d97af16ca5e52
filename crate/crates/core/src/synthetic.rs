//! Procedurally drawn fixture corpora.
//!
//! Panels are flat mid-tone backgrounds with block-figure characters and
//! plain white dialog rectangles. Every box is aligned to the 8-pixel latent
//! grid so the fixed codec represents them exactly.

use image::{Rgb, RgbImage};

use crate::annotation::{CharacterInstance, Corpus, PageAnnotation, PanelAnnotation};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::geometry::BBox;

const BACKGROUNDS: [(&str, [u8; 3]); 10] = [
    ("crimson", [170, 40, 50]),
    ("olive", [120, 130, 40]),
    ("teal", [40, 130, 130]),
    ("navy", [40, 50, 140]),
    ("plum", [130, 60, 130]),
    ("amber", [200, 140, 40]),
    ("slate", [90, 100, 110]),
    ("moss", [60, 110, 60]),
    ("rust", [160, 80, 40]),
    ("indigo", [80, 40, 160]),
];

const FIGURES: [(&str, [u8; 3]); 6] = [
    ("black", [15, 15, 15]),
    ("yellow", [230, 210, 40]),
    ("cyan", [60, 210, 220]),
    ("orange", [240, 120, 20]),
    ("pink", [230, 120, 180]),
    ("lime", [140, 230, 60]),
];

const PLACES: [&str; 10] = [
    "harbor", "rooftop", "forest", "station", "classroom", "market", "bridge", "temple", "alley", "garden",
];

/// Named colors used by the fixtures (backgrounds, figures, dialog white).
pub fn palette() -> Vec<(String, [u8; 3])> {
    BACKGROUNDS
        .iter()
        .chain(FIGURES.iter())
        .map(|(n, c)| (n.to_string(), *c))
        .chain(std::iter::once(("white".to_string(), [255, 255, 255])))
        .collect()
}

pub fn fill_rect(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    for y in b.y0..b.y1.min(img.height()) {
        for x in b.x0..b.x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn fill_ellipse(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let cx = (b.x0 + b.x1) as f64 / 2.0;
    let cy = (b.y0 + b.y1) as f64 / 2.0;
    let rx = b.width() as f64 / 2.0;
    let ry = b.height() as f64 / 2.0;
    for y in b.y0..b.y1.min(img.height()) {
        for x in b.x0..b.x1.min(img.width()) {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// A block figure filling `b`: head on top, body below, a stripe whose
/// height marks the figure's identity.
pub fn draw_figure(img: &mut RgbImage, b: &BBox, color: [u8; 3], stripe: u32) {
    let head_h = b.height() / 3;
    let inset = b.width() / 4;
    let head = BBox::new(b.x0 + inset, b.y0, b.x1 - inset, b.y0 + head_h);
    fill_ellipse(img, &head, color);
    let body = BBox::new(b.x0, b.y0 + head_h, b.x1, b.y1);
    fill_rect(img, &body, color);
    let band = [255 - color[0], 255 - color[1], 255 - color[2]];
    let sy = body.y0 + (stripe % 4 + 1) * body.height() / 6;
    fill_rect(img, &BBox::new(body.x0, sy, body.x1, (sy + 4).min(body.y1)), band);
}

pub fn draw_dialog(img: &mut RgbImage, b: &BBox) {
    fill_rect(img, b, [255, 255, 255]);
}

struct Figure {
    id: u32,
    bbox: BBox,
    color: usize,
}

fn panel(page: &mut RgbImage, origin: BBox, bg: usize, figures: &[Figure], dialogs: &[BBox], place: &str) -> PanelAnnotation {
    fill_rect(page, &origin, BACKGROUNDS[bg].1);
    let at = |b: &BBox| b.offset(origin.x0, origin.y0);
    let mut words = vec![BACKGROUNDS[bg].0.to_string(), place.to_string()];
    let mut characters = Vec::new();
    for f in figures {
        draw_figure(page, &at(&f.bbox), FIGURES[f.color].1, f.color as u32);
        words.push(format!("{} figure", FIGURES[f.color].0));
        characters.push(CharacterInstance {
            id: f.id,
            bbox: at(&f.bbox),
        });
    }
    for d in dialogs {
        draw_dialog(page, &at(d));
    }
    if !dialogs.is_empty() {
        words.push("speech".into());
    }
    PanelAnnotation {
        bbox: origin,
        caption: words.join(" "),
        characters,
        dialogs: dialogs.iter().map(at).collect(),
        caption_optional: false,
    }
}

fn build(pages: Vec<(PageAnnotation, RgbImage)>) -> Result<Dataset> {
    let (pages, images): (Vec<_>, Vec<_>) = pages.into_iter().unzip();
    Dataset::new(Corpus::from_pages(pages)?, images)
}

/// Ten single-panel 128x128 pages, each visually and textually distinct.
pub fn overfit_fixture() -> Result<Dataset> {
    let mut pages = Vec::new();
    for i in 0..10usize {
        let mut img = RgbImage::new(128, 128);
        let left = i % 2 == 0;
        let x0 = if left { 8 } else { 72 };
        let mut figures = vec![Figure {
            id: 0,
            bbox: BBox::new(x0, 40 + 8 * (i as u32 % 3), x0 + 48, 120),
            color: i % FIGURES.len(),
        }];
        if i % 3 == 0 {
            let x1 = if left { 80 } else { 16 };
            figures.push(Figure {
                id: 1,
                bbox: BBox::new(x1, 64, x1 + 32, 120),
                color: (i + 3) % FIGURES.len(),
            });
        }
        let dx = if left { 72 } else { 8 };
        let dialogs = [BBox::new(dx, 8, dx + 48, 32)];
        let ann = panel(&mut img, BBox::new(0, 0, 128, 128), i, &figures, &dialogs, PLACES[i]);
        let page = PageAnnotation {
            page_id: format!("overfit-{i:02}"),
            series: format!("series-{}", i % 2),
            image_path: format!("overfit-{i:02}.png"),
            width: 128,
            height: 128,
            panels: vec![ann],
        };
        pages.push((page, img));
    }
    build(pages)
}

/// Ten 256x128 pages of two panels each. The same character (page-local id
/// 0) appears in both panels at a different size and place, giving twenty
/// cross-panel (source, target) pairs.
pub fn pair_fixture() -> Result<Dataset> {
    let mut pages = Vec::new();
    for i in 0..10usize {
        let mut img = RgbImage::new(256, 128);
        let color = i % FIGURES.len();
        let big = Figure {
            id: 0,
            bbox: BBox::new(16 + 8 * (i as u32 % 4), 24, 80 + 8 * (i as u32 % 4), 128),
            color,
        };
        let small = Figure {
            id: 0,
            bbox: BBox::new(64, 72, 96, 120),
            color,
        };
        // Reading order is right to left, so the right panel comes first.
        let right = panel(
            &mut img,
            BBox::new(128, 0, 256, 128),
            i,
            &[big],
            &[BBox::new(88, 8, 120, 32)],
            PLACES[i],
        );
        let left = panel(
            &mut img,
            BBox::new(0, 0, 128, 128),
            (i + 5) % BACKGROUNDS.len(),
            &[small],
            &[],
            PLACES[(i + 5) % PLACES.len()],
        );
        let page = PageAnnotation {
            page_id: format!("pair-{i:02}"),
            series: format!("series-{}", i % 2),
            image_path: format!("pair-{i:02}.png"),
            width: 256,
            height: 128,
            panels: vec![right, left],
        };
        pages.push((page, img));
    }
    build(pages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_fixture_shape() {
        let d = overfit_fixture().unwrap();
        let s = d.corpus().stats();
        assert_eq!((s.pages, s.panels, s.dialogs), (10, 10, 10));
        let mut caps: Vec<&str> = d.pages().iter().map(|p| p.panels[0].caption.as_str()).collect();
        caps.sort_unstable();
        caps.dedup();
        assert_eq!(caps.len(), 10);
    }

    #[test]
    fn pair_fixture_shares_ids() {
        let d = pair_fixture().unwrap();
        assert_eq!(d.corpus().stats().panels, 20);
        for p in d.pages() {
            assert_eq!(p.panels[0].characters[0].id, p.panels[1].characters[0].id);
            assert_ne!(p.panels[0].characters[0].bbox.area(), p.panels[1].characters[0].bbox.area());
        }
    }

    #[test]
    fn dialogs_are_white() {
        let d = overfit_fixture().unwrap();
        let b = d.pages()[0].panels[0].dialogs[0];
        assert_eq!(d.image(0).get_pixel(b.x0, b.y0).0, [255, 255, 255]);
    }
}
