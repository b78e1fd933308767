//! Keystone pair generation for contrastive pre-training.
//!
//! The four image corners are moved to destination points, the projective
//! transform between the two quads is solved exactly, the image is warped
//! with inverse-mapped bilinear sampling, and matching crops of the original
//! and the warped image form a positive pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Four corners in (top-left, top-right, bottom-right, bottom-left) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoints([Point; 4]);

/// Twice the signed area of the triangle `abc`.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

impl QuadPoints {
    /// Rejects quads with any three (nearly) collinear points.
    pub fn new(points: [Point; 4]) -> Result<Self> {
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Degenerate("non-finite coordinate".into()));
        }
        let scale = points
            .iter()
            .flat_map(|p| [p.x.abs(), p.y.abs()])
            .fold(1.0, f64::max);
        for skip in 0..4 {
            let tri: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| points[i]).collect();
            if cross(tri[0], tri[1], tri[2]).abs() <= 1e-12 * scale * scale {
                return Err(Error::Degenerate(format!("three collinear points in {points:?}")));
            }
        }
        Ok(QuadPoints(points))
    }

    /// Pixel-centre corners of a `width × height` image.
    pub fn image_corners(width: usize, height: usize) -> Result<Self> {
        let (w, h) = ((width as f64) - 1.0, (height as f64) - 1.0);
        Self::new([
            Point::new(0.0, 0.0),
            Point::new(w, 0.0),
            Point::new(w, h),
            Point::new(0.0, h),
        ])
    }

    pub fn points(&self) -> &[Point; 4] {
        &self.0
    }
}

/// How the bottom edge is moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstVariant {
    /// `u2 = αx2 + (1−α)x3`, `u3 = αx3 + (1−α)x2`. For α < ½ the bottom
    /// corners trade places, which sends most of the frame past the horizon.
    Printed,
    /// `u2 = (1−α)x2 + αx3`, `u3 = (1−α)x3 + αx2`: the bottom edge shrinks
    /// toward its midpoint by a fraction α from each side.
    #[default]
    Keystone,
}

/// Destination corners: the top edge stays, the bottom corners slide
/// horizontally. All y-coordinates are preserved.
pub fn make_dst_points_with(src: &QuadPoints, alpha: f64, variant: DstVariant) -> Result<QuadPoints> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Param(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let [p0, p1, p2, p3] = src.0;
    let (w2, w3) = match variant {
        DstVariant::Printed => (alpha, 1.0 - alpha),
        DstVariant::Keystone => (1.0 - alpha, alpha),
    };
    let u2 = w2 * p2.x + w3 * p3.x;
    let u3 = w2 * p3.x + w3 * p2.x;
    QuadPoints::new([p0, p1, Point::new(u2, p2.y), Point::new(u3, p3.y)])
}

/// Destination corners exactly as the bottom-edge mapping is printed.
pub fn make_dst_points(src: &QuadPoints, alpha: f64) -> Result<QuadPoints> {
    make_dst_points_with(src, alpha, DstVariant::Printed)
}

/// Transform coefficient, uniform on `[0.05, 0.35]`.
pub fn sample_alpha<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(ALPHA_MIN..=ALPHA_MAX)
}

/// 3×3 projective matrix with the bottom-right entry fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn adjugate(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 2, 1, 2), -c(0, 2, 1, 2), c(0, 1, 1, 2)],
        [-c(1, 2, 0, 2), c(0, 2, 0, 2), -c(0, 1, 0, 2)],
        [c(1, 2, 0, 1), -c(0, 2, 0, 1), c(0, 1, 0, 1)],
    ]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Scale an arbitrary projective matrix so its bottom-right entry is 1.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        let mag = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        if !(s.abs() > 1e-12 * mag) || !s.is_finite() {
            return Err(Error::Estimation(format!(
                "bottom-right entry {s} cannot be normalised to 1"
            )));
        }
        let mut out = m;
        out.iter_mut().flatten().for_each(|v| *v /= s);
        out[2][2] = 1.0;
        let h = Homography { m: out };
        let mag = out.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        if h.det().abs() <= 1e-14 * mag.powi(3) {
            return Err(Error::Estimation("singular matrix".into()));
        }
        Ok(h)
    }

    /// From the eight free coefficients `m11 m12 m13 m21 m22 m23 m31 m32`.
    pub fn from_coefficients(c: [f64; 8]) -> Result<Self> {
        Self::from_matrix([[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], 1.0]])
    }

    pub fn coefficients(&self) -> [f64; 8] {
        let m = &self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1]]
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        det3(&self.m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        Homography::from_matrix(adjugate(&self.m))
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(matmul3(&self.m, &other.m))
    }

    /// `(u, v)` from `M·(x, y, 1)` with perspective division.
    pub fn apply(&self, p: Point) -> Result<Point> {
        project(&self.m, p).ok_or(Error::Horizon { x: p.x, y: p.y })
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn project(m: &[[f64; 3]; 3], p: Point) -> Option<Point> {
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if w.abs() < 1e-12 {
        return None;
    }
    Some(Point::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// Similarity taking the points to zero centroid and mean distance √2.
fn normalizer(pts: &[Point; 4]) -> [[f64; 3]; 3] {
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]]
}

fn inverse_normalizer(t: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let s = t[0][0];
    [[1.0 / s, 0.0, -t[0][2] / s], [0.0, 1.0 / s, -t[1][2] / s], [0.0, 0.0, 1.0]]
}

/// Solve `A·x = b` in place by Gaussian elimination with partial pivoting.
fn solve_linear<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    let scale = a.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// The homography taking each `src` corner to the matching `dst` corner.
///
/// Four correspondences give eight equations in the eight unknowns, so the
/// least-squares problem is square and solved exactly. Both point sets are
/// first moved to a centred, unit-scale frame to keep the system well
/// conditioned.
pub fn solve_homography(src: &QuadPoints, dst: &QuadPoints) -> Result<Homography> {
    let ts = normalizer(&src.0);
    let td = normalizer(&dst.0);
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for i in 0..4 {
        let p = project(&ts, src.0[i]).expect("affine");
        let q = project(&td, dst.0[i]).expect("affine");
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * i] = u;
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * i + 1] = v;
    }
    let m = solve_linear(a, b)
        .ok_or_else(|| Error::Estimation("singular correspondence system".into()))?;
    let normalized = [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], 1.0]];
    let full = matmul3(&inverse_normalizer(&td), &matmul3(&normalized, &ts));
    Homography::from_matrix(full)
}

/// Inverse-mapping warp with bilinear sampling. Returns the warped image and
/// a per-pixel flag marking outputs whose source location was inside the
/// input; the rest are zero-filled.
pub fn warp_image_with_mask(img: &Image, m: &Homography) -> Result<(Image, Vec<bool>)> {
    let mag = m.m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if m.det().abs() <= 1e-14 * mag.powi(3).max(1.0) {
        return Err(Error::Estimation("non-invertible homography".into()));
    }
    // The adjugate is the inverse up to scale, which perspective division ignores.
    let inv = adjugate(&m.m);
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(img.channels(), h, w);
    let mut valid = vec![false; h * w];
    for v in 0..h {
        for u in 0..w {
            let Some(p) = project(&inv, Point::new(u as f64, v as f64)) else {
                continue;
            };
            for c in 0..img.channels() {
                match img.sample_bilinear(c, p.x, p.y) {
                    Some(s) => {
                        out.set(c, v, u, s);
                        valid[v * w + u] = true;
                    }
                    None => break,
                }
            }
        }
    }
    Ok((out, valid))
}

pub fn warp_image(img: &Image, m: &Homography) -> Result<Image> {
    warp_image_with_mask(img, m).map(|(out, _)| out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub variant: DstVariant,
    /// Crop side as a fraction of the input side.
    pub crop_fraction: f64,
    /// Output side length; `None` keeps the input size.
    pub output_size: Option<usize>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            variant: DstVariant::Keystone,
            crop_fraction: 0.5,
            output_size: None,
        }
    }
}

/// One positive pair: matching crops of the original and the warped image.
#[derive(Debug, Clone)]
pub struct Pair {
    pub original: Image,
    pub transformed: Image,
    pub alpha: f64,
    pub homography: Homography,
}

/// Top-left corner of the fully valid `ch × cw` window closest to the image
/// centre (ties broken in row-major order).
fn best_valid_window(valid: &[bool], h: usize, w: usize, ch: usize, cw: usize) -> Option<(usize, usize)> {
    let mut integral = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] = usize::from(valid[y * w + x])
                + integral[y * (w + 1) + x + 1]
                + integral[(y + 1) * (w + 1) + x]
                - integral[y * (w + 1) + x];
        }
    }
    let count = |t: usize, l: usize| {
        integral[(t + ch) * (w + 1) + l + cw] + integral[t * (w + 1) + l]
            - integral[t * (w + 1) + l + cw]
            - integral[(t + ch) * (w + 1) + l]
    };
    let (cy, cx) = ((h - ch) as f64 / 2.0, (w - cw) as f64 / 2.0);
    let mut best: Option<((usize, usize), f64)> = None;
    for t in 0..=h - ch {
        for l in 0..=w - cw {
            if count(t, l) != ch * cw {
                continue;
            }
            let d = (t as f64 - cy).powi(2) + (l as f64 - cx).powi(2);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some(((t, l), d));
            }
        }
    }
    best.map(|(pos, _)| pos)
}

/// Build a positive pair with a fixed transform coefficient.
pub fn make_pair_with_alpha(img: &Image, alpha: f64, cfg: &PairConfig) -> Result<Pair> {
    if !(cfg.crop_fraction > 0.0 && cfg.crop_fraction <= 1.0) {
        return Err(Error::Param(format!(
            "crop_fraction must lie in (0, 1], got {}",
            cfg.crop_fraction
        )));
    }
    let (h, w) = (img.height(), img.width());
    let ch = (h as f64 * cfg.crop_fraction).round() as usize;
    let cw = (w as f64 * cfg.crop_fraction).round() as usize;
    if ch < 2 || cw < 2 {
        return Err(Error::Size(format!(
            "{h}x{w} image leaves a {ch}x{cw} crop at fraction {}",
            cfg.crop_fraction
        )));
    }
    let src = QuadPoints::image_corners(w, h)?;
    let dst = make_dst_points_with(&src, alpha, cfg.variant)?;
    let homography = solve_homography(&src, &dst)?;
    let (warped, valid) = warp_image_with_mask(img, &homography)?;
    let (top, left) = best_valid_window(&valid, h, w, ch, cw).ok_or_else(|| {
        Error::Size(format!(
            "no {ch}x{cw} window of the warped image is free of fill (alpha = {alpha})"
        ))
    })?;
    let out = cfg.output_size.unwrap_or(h.max(w));
    let original = img.crop((h - ch) / 2, (w - cw) / 2, ch, cw)?.resize(out, out)?;
    let transformed = warped.crop(top, left, ch, cw)?.resize(out, out)?;
    Ok(Pair {
        original,
        transformed,
        alpha,
        homography,
    })
}

/// Build a positive pair with a freshly drawn transform coefficient.
pub fn make_pair<R: Rng + ?Sized>(img: &Image, rng: &mut R, cfg: &PairConfig) -> Result<Pair> {
    let alpha = sample_alpha(rng);
    make_pair_with_alpha(img, alpha, cfg)
}

/// Index-aligned originals and transformed views: `(i, i)` are positives,
/// every `(i, j ≠ i)` a negative.
#[derive(Debug, Clone, Default)]
pub struct PairBatch {
    pub originals: Vec<Image>,
    pub transformed: Vec<Image>,
    pub coefficients: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn push(&mut self, pair: Pair) {
        self.originals.push(pair.original);
        self.transformed.push(pair.transformed);
        self.coefficients.push(pair.alpha);
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i == j
    }
}
