//! Image batches and their PNG representation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::ImageEncoder;

use crate::error::{arg_err, config_err, Error, Result};

/// A batch of images, `[batch, channels, H, W]`, values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pixels: Tensor,
}

impl ImageBatch {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let dims = pixels.dims();
        if dims.len() != 4 {
            return Err(config_err!("image batch must be rank 4, got {dims:?}"));
        }
        if dims[2] != dims[3] {
            return Err(config_err!("images must be square, got {}x{}", dims[2], dims[3]));
        }
        Ok(Self { pixels })
    }

    /// From channel-last `[batch, H, W, channels]`.
    pub fn from_nhwc(t: &Tensor) -> Result<Self> {
        Self::new(t.permute((0, 3, 1, 2))?.contiguous()?)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn to_nhwc(&self) -> Result<Tensor> {
        Ok(self.pixels.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn len(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dims()[1]
    }

    pub fn resolution(&self) -> usize {
        self.pixels.dims()[2]
    }

    pub fn detach(&self) -> Self {
        Self {
            pixels: self.pixels.detach(),
        }
    }

    pub fn get(&self, index: usize) -> Result<Self> {
        if index >= self.len() {
            return Err(arg_err!("image index {index} out of range for batch of {}", self.len()));
        }
        Self::new(self.pixels.narrow(0, index, 1)?)
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.pixels.narrow(0, start, len)?)
    }

    pub fn cat(batches: &[&ImageBatch]) -> Result<Self> {
        let ts: Vec<&Tensor> = batches.iter().map(|b| &b.pixels).collect();
        Self::new(Tensor::cat(&ts, 0)?)
    }

    /// Checks the batch against an expected channel count and resolution.
    pub fn expect_shape(&self, channels: usize, resolution: usize) -> Result<()> {
        if self.channels() != channels || self.resolution() != resolution {
            return Err(config_err!(
                "expected {channels}x{resolution}x{resolution} images, got {}x{}x{}",
                self.channels(),
                self.resolution(),
                self.resolution()
            ));
        }
        Ok(())
    }

    /// Writes image `index` as a 16-bit PNG (RGB for three channels,
    /// grayscale for one).
    pub fn save_png(&self, index: usize, path: &Path) -> Result<()> {
        let img = self.get(index)?;
        let (c, r) = (img.channels(), img.resolution());
        let values: Vec<f32> = img
            .pixels
            .to_dtype(DType::F32)?
            .permute((0, 2, 3, 1))?
            .flatten_all()?
            .to_vec1()?;
        let bytes: Vec<u8> = values.iter().flat_map(|&v| to_sample(v).to_ne_bytes()).collect();
        let color = match c {
            1 => image::ExtendedColorType::L16,
            3 => image::ExtendedColorType::Rgb16,
            _ => return Err(config_err!("cannot store {c}-channel image as PNG")),
        };
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(&bytes, r as u32, r as u32, color)
            .map_err(|e| Error::format(path, e.to_string()))?;
        crate::io_util::write_atomic(path, &buf)
    }

    /// Loads PNG files into one batch. All files must share a resolution;
    /// 8-bit files are widened to 16 bits.
    pub fn load_pngs<P: AsRef<Path>>(paths: &[P], channels: usize) -> Result<Self> {
        let mut data = Vec::new();
        let mut res = None;
        for p in paths {
            let p = p.as_ref();
            let img = image::open(p).map_err(|e| Error::format(p, format!("unreadable image: {e}")))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            if w != h {
                return Err(Error::format(p, format!("image is {w}x{h}, expected square")));
            }
            match res {
                None => res = Some(w),
                Some(r) if r != w => {
                    return Err(Error::format(p, format!("resolution {w} differs from batch resolution {r}")))
                }
                _ => {}
            }
            let raw: Vec<u16> = match channels {
                1 => img.to_luma16().into_raw(),
                3 => img.to_rgb16().into_raw(),
                _ => return Err(config_err!("unsupported channel count {channels}")),
            };
            data.extend(raw.into_iter().map(from_sample));
        }
        let r = res.ok_or_else(|| arg_err!("no images to load"))?;
        let t = Tensor::from_vec(data, (paths.len(), r, r, channels), &Device::Cpu)?;
        Self::from_nhwc(&t)
    }
}

pub fn to_sample(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round()) as u16
}

pub fn from_sample(b: u16) -> f32 {
    b as f32 / 65535.0 * 2.0 - 1.0
}
