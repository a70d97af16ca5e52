//! Image crops, tensor conversion and the fixed pixel <-> latent codec.

use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8())
}

/// Pad to a square canvas with white, content centered.
pub fn square_pad_white(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == h {
        return img.clone();
    }
    let side = w.max(h);
    let mut out = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    imageops::replace(&mut out, img, ((side - w) / 2) as i64, ((side - h) / 2) as i64);
    out
}

pub fn crop(img: &RgbImage, bbox: &BBox) -> RgbImage {
    imageops::crop_imm(img, bbox.x0, bbox.y0, bbox.width(), bbox.height()).to_image()
}

/// Crop a character reference: cut the box, pad square with white, resize.
pub fn character_crop(page: &RgbImage, bbox: &BBox, size: u32) -> RgbImage {
    prepare_reference(&crop(page, bbox), size)
}

/// Square-pad and resize an arbitrary reference image to the encoder input.
pub fn prepare_reference(img: &RgbImage, size: u32) -> RgbImage {
    let sq = square_pad_white(img);
    if sq.width() == size {
        sq
    } else {
        imageops::resize(&sq, size, size, FilterType::Triangle)
    }
}

pub fn panel_crop(page: &RgbImage, bbox: &BBox, width: u32, height: u32) -> RgbImage {
    let c = crop(page, bbox);
    if c.dimensions() == (width, height) {
        c
    } else {
        imageops::resize(&c, width, height, FilterType::Triangle)
    }
}

/// Stack images into `(N, 3, H, W)` with values in `[-1, 1]`.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or_else(|| Error::shape("images_to_tensor", "no images"))?;
    let mut data = Vec::with_capacity(images.len() * 3 * (w * h) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::shape("images_to_tensor", "images differ in size"));
        }
        for c in 0..3 {
            for px in img.pixels() {
                data.push(px.0[c] as f32 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`] for one `(3, H, W)` tensor.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_image", format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    let to_u8 = |x: f32| (((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(v[i]), to_u8(v[plane + i]), to_u8(v[2 * plane + i])])
    }))
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding to memory cannot fail");
    buf.into_inner()
}

/// Fixed 8x average-pool encoder and nearest-unpool decoder standing in for a
/// learned VAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub factor: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec { factor: 8 }
    }
}

impl LatentCodec {
    pub fn latent_size(&self, width: u32, height: u32) -> (usize, usize) {
        (height as usize / self.factor, width as usize / self.factor)
    }

    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        Ok(pixels.avg_pool2d(self.factor)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = latent.dims4()?;
        Ok(latent.upsample_nearest2d(h * self.factor, w * self.factor)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_centers_on_white() {
        let img = RgbImage::from_pixel(4, 2, Rgb([0, 0, 0]));
        let sq = square_pad_white(&img);
        assert_eq!(sq.dimensions(), (4, 4));
        assert_eq!(sq.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(sq.get_pixel(0, 1).0, [0, 0, 0]);
        assert_eq!(sq.get_pixel(3, 3).0, [255, 255, 255]);
    }

    #[test]
    fn tensor_image_round_trip() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        let t = images_to_tensor(&[&img], DType::F32, &Device::Cpu).unwrap();
        let back = tensor_to_image(&t.squeeze(0).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn codec_constant_blocks_round_trip() {
        let img = RgbImage::from_fn(16, 16, |x, y| if (x / 8 + y / 8) % 2 == 0 { Rgb([255; 3]) } else { Rgb([0; 3]) });
        let codec = LatentCodec::default();
        let t = images_to_tensor(&[&img], DType::F32, &Device::Cpu).unwrap();
        let z = codec.encode(&t).unwrap();
        assert_eq!(z.dims(), &[1, 3, 2, 2]);
        let back = tensor_to_image(&codec.decode(&z).unwrap().squeeze(0).unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
