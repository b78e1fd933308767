//! Oblique viewing geometry.
//!
//! A camera at height `H` looks at a vertical target of height `h` standing
//! at horizontal distance `l`. The angle `α` subtended by the target grows
//! from zero directly beneath the camera, peaks at `l* = √(H(H−h))`, and
//! decays back to zero at infinity.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    camera_height: f64,
    target_height: f64,
}

impl ViewGeometry {
    /// Requires `camera_height > target_height > 0`.
    pub fn new(camera_height: f64, target_height: f64) -> Result<Self> {
        let valid = camera_height.is_finite()
            && target_height.is_finite()
            && target_height > 0.0
            && camera_height > target_height;
        if !valid {
            return Err(Error::Domain(format!(
                "need H > h > 0, got H = {camera_height}, h = {target_height}"
            )));
        }
        Ok(ViewGeometry {
            camera_height,
            target_height,
        })
    }

    pub fn camera_height(&self) -> f64 {
        self.camera_height
    }

    pub fn target_height(&self) -> f64 {
        self.target_height
    }

    /// `(a, b) = (H, H − h)`.
    fn ab(&self) -> (f64, f64) {
        (self.camera_height, self.camera_height - self.target_height)
    }
}

fn check_distance(l: f64) -> Result<()> {
    if !(l >= 0.0) || !l.is_finite() {
        return Err(Error::Domain(format!("distance must be finite and >= 0, got {l}")));
    }
    Ok(())
}

/// `cos α = (ab + l²) / (√(a²+l²)·√(b²+l²))`.
pub fn cos_alpha(g: &ViewGeometry, l: f64) -> Result<f64> {
    check_distance(l)?;
    let (a, b) = g.ab();
    let l2 = l * l;
    let value = (a * b + l2) / ((a * a + l2).sqrt() * (b * b + l2).sqrt());
    // Rounding can push the ratio a hair above 1 near l = 0 or l → ∞.
    Ok(value.min(1.0))
}

/// Viewing angle in radians, in `[0, π/2)`.
///
/// Evaluated as `atan2(h·l, l² + H(H−h))`; `acos` of [`cos_alpha`] loses
/// half the digits for the small angles typical of tall cameras.
pub fn viewing_angle(g: &ViewGeometry, l: f64) -> Result<f64> {
    check_distance(l)?;
    let (a, b) = g.ab();
    Ok((g.target_height * l).atan2(l * l + a * b))
}

/// Closed-form `d(cos α)/dl`.
pub fn d_cos_alpha_dl(g: &ViewGeometry, l: f64) -> Result<f64> {
    check_distance(l)?;
    let (a, b) = g.ab();
    let l2 = l * l;
    let pa = a * a + l2;
    let pb = b * b + l2;
    let num = 2.0 * l * pa * pb - l * (a * b + l2) * (a * a + b * b + 2.0 * l2);
    Ok(num / (pa.powf(1.5) * pb.powf(1.5)))
}

/// `dα/dl = −(d cos α/dl) / sin α`; taken as 0 where `sin α = 0` (only at `l = 0`).
pub fn d_alpha_dl(g: &ViewGeometry, l: f64) -> Result<f64> {
    let c = cos_alpha(g, l)?;
    let s = (1.0 - c * c).max(0.0).sqrt();
    if s == 0.0 {
        return Ok(0.0);
    }
    Ok(-d_cos_alpha_dl(g, l)? / s)
}

/// Distance at which the target subtends the largest angle.
pub fn optimal_distance(g: &ViewGeometry) -> f64 {
    let (a, b) = g.ab();
    (a * b).sqrt()
}

/// One row of a distance sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AngleSample {
    pub distance: f64,
    pub alpha: f64,
    pub d_alpha: f64,
}

/// `n` evenly spaced samples on `[0, max_distance]`.
pub fn sweep(g: &ViewGeometry, max_distance: f64, n: usize) -> Result<Vec<AngleSample>> {
    check_distance(max_distance)?;
    if n < 2 {
        return Err(Error::Param("sweep needs at least 2 samples".into()));
    }
    (0..n)
        .map(|i| {
            let l = max_distance * i as f64 / (n - 1) as f64;
            Ok(AngleSample {
                distance: l,
                alpha: viewing_angle(g, l)?,
                d_alpha: d_alpha_dl(g, l)?,
            })
        })
        .collect()
}
