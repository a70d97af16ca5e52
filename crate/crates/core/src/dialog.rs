//! Dialog layout conditioning: a single trainable channel vector added to the
//! post-first-conv latent wherever a dialog box covers a cell center.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_box, BBox};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl DialogMask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DialogMask {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn union(&self, other: &DialogMask) -> Result<DialogMask> {
        if self.resolution() != other.resolution() {
            return Err(Error::shape("dialog mask", "union of masks at different resolutions"));
        }
        Ok(DialogMask {
            rows: self.rows,
            cols: self.cols,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// `(1, 1, rows, cols)` tensor of 0/1.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f32> = self.cells.iter().map(|&c| c as u8 as f32).collect();
        Ok(Tensor::from_vec(data, (1, 1, self.rows, self.cols), device)?.to_dtype(dtype)?)
    }
}

/// Union of the dialog boxes rasterized by cell-center membership. Boxes that
/// cover no cell center contribute nothing.
pub fn build_dialog_mask(dialog_boxes: &[BBox], panel_size: (u32, u32), latent: (usize, usize)) -> Result<DialogMask> {
    let (rows, cols) = latent;
    let mut mask = DialogMask::zeros(rows, cols);
    for (k, b) in dialog_boxes.iter().enumerate() {
        if !b.within(panel_size.0, panel_size.1) {
            return Err(Error::validation(
                format!("dialogs[{k}].bbox"),
                format!("box outside the {}x{} panel", panel_size.0, panel_size.1),
            ));
        }
        for (cell, inside) in mask.cells.iter_mut().zip(rasterize_box(b, panel_size, latent, false)) {
            *cell |= inside;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct DialogEmbedding {
    pub e_d: Tensor,
}

impl DialogEmbedding {
    pub fn new(ps: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(DialogEmbedding {
            e_d: ps.get(&format!("{name}.e_d"), &[channels], Init::Zeros)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.e_d.dim(0).unwrap_or(0)
    }
}

/// `z + e_d[c] * mask[y, x]` with `z: (B, C, H, W)`, `e_d: (C,)` and
/// `mask: (B|1, 1, H, W)`.
pub fn inject_dialog_tensor(z: &Tensor, e_d: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = z.dims4()?;
    let (_, mc, mh, mw) = mask.dims4()?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::shape(
            "inject_dialog",
            format!("mask is {mh}x{mw}, latent is {h}x{w}"),
        ));
    }
    if e_d.dims() != [c] {
        return Err(Error::shape(
            "inject_dialog",
            format!("embedding width {:?} does not match {c} channels", e_d.dims()),
        ));
    }
    let delta = mask.broadcast_mul(&e_d.reshape((1, c, 1, 1))?)?;
    Ok(z.broadcast_add(&delta)?)
}

/// Typed form: one mask per batch element.
pub fn inject_dialog(z: &Tensor, emb: &DialogEmbedding, masks: &[DialogMask]) -> Result<Tensor> {
    let b = z.dim(0)?;
    if masks.len() != b {
        return Err(Error::shape("inject_dialog", format!("{} masks for batch {b}", masks.len())));
    }
    let parts = masks
        .iter()
        .map(|m| m.to_tensor(z.dtype(), z.device()))
        .collect::<Result<Vec<_>>>()?;
    inject_dialog_tensor(z, &emb.e_d, &Tensor::cat(&parts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full() {
        assert_eq!(build_dialog_mask(&[], (64, 64), (4, 4)).unwrap().count(), 0);
        assert_eq!(build_dialog_mask(&[BBox::new(0, 0, 64, 32)], (64, 32), (4, 8)).unwrap().count(), 32);
    }

    #[test]
    fn quadrant() {
        let m = build_dialog_mask(&[BBox::new(0, 0, 32, 32)], (64, 64), (4, 4)).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.get(r, c), r < 2 && c < 2);
            }
        }
    }

    #[test]
    fn overlap_adds_once() {
        let dev = Device::Cpu;
        let m = build_dialog_mask(&[BBox::new(0, 0, 16, 16), BBox::new(0, 0, 16, 8)], (16, 16), (2, 2)).unwrap();
        let z = Tensor::zeros((1, 2, 2, 2), DType::F64, &dev).unwrap();
        let e = DialogEmbedding {
            e_d: Tensor::new(&[1.5f64, -2.0], &dev).unwrap(),
        };
        let out = inject_dialog(&z, &e, &[m]).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn shape_errors() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 2, 2, 2), DType::F64, &dev).unwrap();
        let e = Tensor::zeros(3, DType::F64, &dev).unwrap();
        let m = DialogMask::zeros(2, 2).to_tensor(DType::F64, &dev).unwrap();
        assert!(inject_dialog_tensor(&z, &e, &m).is_err());
        let e = Tensor::zeros(2, DType::F64, &dev).unwrap();
        let m = DialogMask::zeros(3, 2).to_tensor(DType::F64, &dev).unwrap();
        assert!(inject_dialog_tensor(&z, &e, &m).is_err());
    }
}
