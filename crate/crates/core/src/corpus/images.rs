use candle_core::{DType, Device, Tensor};

use super::{DatasetManifest, Record};
use crate::error::Result;
use crate::rng::SplitMix64;

/// Decoded images held as a flat `N x 3 x S x S` buffer in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub size: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// Loads one image, center-cropped to a square and resized to `size`.
pub fn load_image(path: &std::path::Path, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let img = if w != h {
        image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image()
    } else {
        img
    };
    let img = if side as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = vec![0f32; 3 * size * size];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest, records: &[Record], size: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(records.len() * 3 * size * size);
        for r in records {
            data.extend(load_image(&manifest.resolve(r), size)?);
        }
        Ok(Self {
            size,
            data,
            labels: records.iter().map(|r| r.class_id).collect(),
            ids: records.iter().map(|r| r.sample_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        3 * self.size * self.size
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.data[i * self.stride()..(i + 1) * self.stride()]
    }

    /// Gathers `indices` into a batch tensor, flipping each image
    /// horizontally and vertically with probability 1/2 when `flip_rng` is set.
    pub fn batch(
        &self,
        indices: &[usize],
        flip_rng: Option<&mut SplitMix64>,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let s = self.size;
        let mut out = Vec::with_capacity(indices.len() * self.stride());
        let mut rng = flip_rng;
        for &i in indices {
            let src = self.sample(i);
            let (fh, fv) = match rng.as_deref_mut() {
                Some(r) => (r.bernoulli(0.5), r.bernoulli(0.5)),
                None => (false, false),
            };
            for c in 0..3 {
                for y in 0..s {
                    let sy = if fv { s - 1 - y } else { y };
                    for x in 0..s {
                        let sx = if fh { s - 1 - x } else { x };
                        out.push(src[(c * s + sy) * s + sx]);
                    }
                }
            }
        }
        let t = Tensor::from_vec(out, (indices.len(), 3, s, s), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn all(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, None, dtype, device)
    }
}

/// Writes a `3 x S x S` tensor in `[-1, 1]` as an 8-bit PNG.
pub fn save_tensor_png(t: &Tensor, path: &std::path::Path) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    debug_assert_eq!(c, 3);
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (ch, p) in px.iter_mut().enumerate() {
                let val = v[(ch * h + y) * w + x].clamp(-1.0, 1.0);
                *p = ((val + 1.0) * 127.5).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    super::texture::write_png(path, &img)
}
