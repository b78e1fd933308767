//! Procedural aerial-like scenes: coloured rectangles scattered over a
//! smoothly shaded ground plane, seen either straight down or obliquely.
//!
//! The oblique camera maps image rows to ground depth with a pinhole model,
//! so far rows (top of the frame) cover a wider ground span and objects there
//! shrink.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Vertical,
    Oblique,
    /// Either, chosen per image with equal odds.
    Mixed,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    u0: f64,
    v0: f64,
    u1: f64,
    v1: f64,
    colour: [f64; 3],
}

/// Ground-plane scene in world units over `[0, extent]²`.
#[derive(Debug, Clone)]
pub struct Scene {
    extent: f64,
    base: [f64; 3],
    tint: [f64; 3],
    rects: Vec<Rect>,
}

fn colour<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Scene {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, extent: f64, objects: usize) -> Scene {
        let base = colour(rng, 0.25, 0.6);
        let tint = colour(rng, -0.2, 0.2);
        let rects = (0..objects)
            .map(|_| {
                let w = rng.gen_range(0.06..0.22);
                let h = rng.gen_range(0.06..0.22);
                let u0 = rng.gen_range(0.0..extent - w);
                let v0 = rng.gen_range(0.0..extent - h);
                Rect {
                    u0,
                    v0,
                    u1: u0 + w,
                    v1: v0 + h,
                    colour: colour(rng, 0.05, 0.95),
                }
            })
            .collect();
        Scene {
            extent,
            base,
            tint,
            rects,
        }
    }

    /// Radiance at world point `(u, v)`; later rectangles occlude earlier ones.
    pub fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        if let Some(r) = self
            .rects
            .iter()
            .rev()
            .find(|r| u >= r.u0 && u < r.u1 && v >= r.v0 && v < r.v1)
        {
            return r.colour;
        }
        let t = (0.5 * (u + v) / self.extent).clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = (self.base[k] + self.tint[k] * t).clamp(0.0, 1.0);
        }
        c
    }
}

/// Oblique camera: relative ground depth of the top row versus the bottom.
pub const OBLIQUE_DEPTH_RATIO: f64 = 4.0;
const SUPERSAMPLE: usize = 2;

fn render(scene: &Scene, size: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut img = Image::zeros(3, size, size);
    let n = SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = (x as f64 + (sx as f64 + 0.5) / n) / size as f64;
                    let fy = (y as f64 + (sy as f64 + 0.5) / n) / size as f64;
                    let (u, v) = map(fx, fy);
                    let c = scene.shade(u, v);
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                img.set(c, y, x, a / (n * n));
            }
        }
    }
    img
}

/// Straight-down view of the unit square of `scene`.
pub fn render_vertical(scene: &Scene, size: usize) -> Image {
    render(scene, size, |fx, fy| (fx, fy))
}

/// Tilted view: row `fy` (0 at the top) sees ground at depth
/// `1 / (1/r + (1 − 1/r)·fy)` for depth ratio `r`, with lateral spread
/// growing in proportion to depth.
pub fn render_oblique(scene: &Scene, size: usize) -> Image {
    let r = OBLIQUE_DEPTH_RATIO;
    let near = 1.0;
    render(scene, size, move |fx, fy| {
        let depth = near / (1.0 / r + (1.0 - 1.0 / r) * fy);
        let u = 0.5 * scene.extent + (fx - 0.5) * depth;
        let v = scene.extent - depth;
        (u, v)
    })
}

fn objects_for(rng: &mut ChaCha8Rng, extent: f64) -> usize {
    // Constant object density per unit area.
    let per_unit = rng.gen_range(10.0..18.0);
    (per_unit * extent * extent).round() as usize
}

pub fn synth_image(size: usize, view: ViewKind, rng: &mut ChaCha8Rng) -> Image {
    let view = match view {
        ViewKind::Mixed if rng.gen_bool(0.5) => ViewKind::Vertical,
        ViewKind::Mixed => ViewKind::Oblique,
        v => v,
    };
    match view {
        ViewKind::Vertical => {
            let n = objects_for(rng, 1.0);
            render_vertical(&Scene::random(rng, 1.0, n), size)
        }
        _ => {
            let extent = OBLIQUE_DEPTH_RATIO + 0.5;
            let n = objects_for(rng, extent);
            render_oblique(&Scene::random(rng, extent, n), size)
        }
    }
}

/// `n` images of side `size`, each from its own seed stream so any subset can
/// be regenerated independently.
pub fn synth_dataset(n: usize, size: usize, view: ViewKind, seed: u64) -> Result<Vec<Image>> {
    if n == 0 || size == 0 {
        return Err(Error::Config(format!("need n >= 1 and size >= 1, got n={n}, size={size}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_image(size, view, &mut rng)
        })
        .collect())
}
