//! Mechanical page assembly: generated panels pasted at their page boxes on a
//! white canvas, each framed by a black border.

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::diffusion::PanelSpecDoc;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const BORDER: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptPanel {
    /// Placement on the page; the panel is generated at this size.
    pub bbox: BBox,
    pub spec: PanelSpecDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageScript {
    pub width: u32,
    pub height: u32,
    pub panels: Vec<ScriptPanel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageMetadata {
    pub width: u32,
    pub height: u32,
    /// Script indices in reading order.
    pub reading_order: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl PageScript {
    pub fn from_json(source: &str, bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            file: source.to_string(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    /// Panels present, inside the page, pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let boxes: Vec<BBox> = self.panels.iter().map(|p| p.bbox).collect();
        validate_layout(self.width, self.height, &boxes)
    }

    /// Panel specs sized to their page boxes.
    pub fn panel_specs(&self) -> Vec<PanelSpecDoc> {
        self.panels
            .iter()
            .map(|p| PanelSpecDoc {
                width: p.bbox.width(),
                height: p.bbox.height(),
                ..p.spec.clone()
            })
            .collect()
    }

    pub fn metadata(&self) -> PageMetadata {
        let boxes: Vec<BBox> = self.panels.iter().map(|p| p.bbox).collect();
        PageMetadata {
            width: self.width,
            height: self.height,
            reading_order: reading_order(&boxes),
            boxes,
        }
    }
}

pub fn validate_layout(width: u32, height: u32, boxes: &[BBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::validation("panels", "a page needs at least one panel"));
    }
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_proper() || !b.within(width, height) {
            return Err(Error::validation(
                format!("panels[{i}].bbox"),
                format!("box is empty or outside the {width}x{height} page"),
            ));
        }
        if b.width() <= 2 * BORDER || b.height() <= 2 * BORDER {
            return Err(Error::validation(format!("panels[{i}].bbox"), "box is too small to frame"));
        }
        for (j, o) in boxes.iter().enumerate().take(i) {
            if b.intersects(o) {
                return Err(Error::validation(
                    format!("panels[{i}].bbox"),
                    format!("overlaps panels[{j}].bbox"),
                ));
            }
        }
    }
    Ok(())
}

/// Rows top to bottom (a panel starts a new row when it begins below every
/// panel of the current row), right to left within a row.
pub fn reading_order(boxes: &[BBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by_key(|&i| (boxes[i].y0, std::cmp::Reverse(boxes[i].x1)));
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut row_bottom = 0;
    for i in idx {
        match rows.last_mut() {
            Some(row) if boxes[i].y0 < row_bottom => {
                row.push(i);
                row_bottom = row_bottom.max(boxes[i].y1);
            }
            _ => {
                rows.push(vec![i]);
                row_bottom = boxes[i].y1;
            }
        }
    }
    rows.into_iter()
        .flat_map(|mut r| {
            r.sort_by_key(|&i| std::cmp::Reverse(boxes[i].x1));
            r
        })
        .collect()
}

/// Paste panels (already at their box size, else resized) and draw borders.
pub fn composite_page(width: u32, height: u32, panels: &[(BBox, RgbImage)]) -> Result<RgbImage> {
    let boxes: Vec<BBox> = panels.iter().map(|(b, _)| *b).collect();
    validate_layout(width, height, &boxes)?;
    let mut page = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (b, img) in panels {
        let img = if img.dimensions() == (b.width(), b.height()) {
            img.clone()
        } else {
            imageops::resize(img, b.width(), b.height(), imageops::FilterType::Triangle)
        };
        imageops::replace(&mut page, &img, b.x0 as i64, b.y0 as i64);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let ring = x < b.x0 + BORDER || x >= b.x1 - BORDER || y < b.y0 + BORDER || y >= b.y1 - BORDER;
                if ring {
                    page.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
        }
    }
    Ok(page)
}
