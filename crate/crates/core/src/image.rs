//! Planar `f64` images in `[channels, height, width]` layout, plus PNG/PNM IO.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Size(format!("{channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape("image", &[channels, height, width], &[data.len()]));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates.
    ///
    /// Pixel centres sit on integer coordinates. Returns `None` outside
    /// `[0, width-1] × [0, height-1]`.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = if fx == 0.0 {
            self.get(c, y0, x0)
        } else {
            self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx
        };
        if fy == 0.0 {
            return Some(top);
        }
        let bottom = if fx == 0.0 {
            self.get(c, y1, x0)
        } else {
            self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx
        };
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Size(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Size(format!("resize to {height}x{width}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = if height > 1 {
            (self.height - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let sx = if width > 1 {
            (self.width - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            let fy = (y as f64 * sy).min((self.height - 1) as f64);
            let fx = (x as f64 * sx).min((self.width - 1) as f64);
            self.sample_bilinear(c, fx, fy).unwrap_or(0.0)
        }))
    }

    /// Channel mean, as a single-channel image.
    pub fn to_gray(&self) -> Image {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.channels as f64);
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image dimensions are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        match t.shape() {
            [c, h, w] => Image::new(*c, *h, *w, t.data().to_vec()),
            other => Err(Error::shape("image", other, &[0, 0, 0])),
        }
    }

    /// Quantise `[0, 1]` values to 8 bits and write. The format follows the
    /// extension (`.png`, `.pgm`, `.ppm`); 1 channel is grey, 3 is RGB.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| quant(v)).collect();
                image::GrayImage::from_raw(w, h, buf)
                    .expect("buffer sized from dimensions")
                    .save(path)?;
            }
            3 => {
                let n = self.height * self.width;
                let mut buf = Vec::with_capacity(3 * n);
                for i in 0..n {
                    for c in 0..3 {
                        buf.push(quant(self.data[c * n + i]));
                    }
                }
                image::RgbImage::from_raw(w, h, buf)
                    .expect("buffer sized from dimensions")
                    .save(path)?;
            }
            c => return Err(Error::Param(format!("cannot encode {c}-channel image"))),
        }
        Ok(())
    }

    /// Load as RGB scaled to `[0, 1]`.
    pub fn load_rgb(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Ok(Image::from_fn(3, h, w, |c, y, x| {
            f64::from(raw[(y * w + x) * 3 + c]) / 255.0
        }))
    }
}
