//! Spectral energy concentration of an image.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::Image;

/// `|F(u, v)|²` of a `h × w` real plane by direct DFT, `[h, w]` row-major.
pub fn power_spectrum(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || plane.len() != h * w {
        return Err(Error::Size(format!("{} samples for a {h}x{w} plane", plane.len())));
    }
    let twiddle = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (a.cos(), a.sin())
            })
            .collect()
    };
    let (tw_h, tw_w) = (twiddle(h), twiddle(w));
    // Row transforms, then column transforms: separable and still exact.
    let mut rows = vec![(0.0, 0.0); h * w];
    for y in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..w {
                let (c, s) = tw_w[(v * x) % w];
                let p = plane[y * w + x];
                re += p * c;
                im += p * s;
            }
            rows[y * w + v] = (re, im);
        }
    }
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                let (c, s) = tw_h[(u * y) % h];
                let (a, b) = rows[y * w + v];
                re += a * c - b * s;
                im += a * s + b * c;
            }
            out[u * w + v] = re * re + im * im;
        }
    }
    Ok(out)
}

/// Share of spectral energy within `radius_fraction` of the zero frequency.
///
/// Frequencies are folded to `[-1/2, 1/2)` cycles per sample on each axis and
/// the radius is normalised so that 1 reaches the spectrum corners; `r = 1`
/// therefore covers everything. Colour images are reduced to grey first.
/// A spectrum with no energy (after optional DC removal) counts as fully
/// concentrated.
pub fn low_freq_ratio(img: &Image, radius_fraction: f64, exclude_dc: bool) -> Result<f64> {
    if !(radius_fraction > 0.0 && radius_fraction <= 1.0) {
        return Err(Error::Param(format!(
            "radius_fraction must lie in (0, 1], got {radius_fraction}"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(Error::Size(format!("{h}x{w} image is too small for a spectrum")));
    }
    let gray = img.to_gray();
    let power = power_spectrum(gray.data(), h, w)?;
    let fold = |k: usize, n: usize| {
        let f = k as f64 / n as f64;
        if f >= 0.5 {
            f - 1.0
        } else {
            f
        }
    };
    let corner = 0.5f64.hypot(0.5);
    let (mut inside, mut total) = (0.0, 0.0);
    for u in 0..h {
        for v in 0..w {
            if exclude_dc && u == 0 && v == 0 {
                continue;
            }
            let e = power[u * w + v];
            total += e;
            if fold(u, h).hypot(fold(v, w)) / corner <= radius_fraction {
                inside += e;
            }
        }
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok((inside / total).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_all_dc() {
        let img = Image::from_fn(3, 8, 8, |_, _, _| 0.7);
        assert!((low_freq_ratio(&img, 0.1, false).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_sits_at_nyquist() {
        let img = Image::from_fn(1, 8, 8, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
        let p = power_spectrum(img.data(), 8, 8).unwrap();
        assert!((p[4 * 8 + 4] - 64.0f64.powi(2)).abs() < 1e-6);
        assert!(low_freq_ratio(&img, 0.25, false).unwrap() < 1e-20);
        // 0/1 board: DC carries half the energy unless excluded.
        let board = Image::from_fn(1, 8, 8, |_, y, x| ((x + y) % 2) as f64);
        assert!((low_freq_ratio(&board, 0.25, false).unwrap() - 0.5).abs() < 1e-12);
        assert!(low_freq_ratio(&board, 0.25, true).unwrap() < 1e-20);
    }

    #[test]
    fn full_radius_covers_everything() {
        let img = Image::from_fn(1, 6, 10, |_, y, x| ((x * 7 + y * 3) % 5) as f64);
        assert!((low_freq_ratio(&img, 1.0, false).unwrap() - 1.0).abs() < 1e-12);
        assert!(low_freq_ratio(&img, 0.0, false).is_err());
        assert!(low_freq_ratio(&Image::zeros(1, 1, 5), 0.5, false).is_err());
    }
}
