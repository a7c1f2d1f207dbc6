//! Classic alpha compositing along a ray.
//!
//! Not differentiable; used as a reference renderer and as the ground truth
//! integrator for synthetic scenes.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VrError {
    #[error("point {index}: negative density {sigma}")]
    NegativeDensity { index: usize, sigma: f64 },
    #[error("point {index}: non-positive interval length {delta}")]
    BadDelta { index: usize, delta: f64 },
}

/// Density, interval length and linear colour of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRadiance {
    pub sigma: f64,
    pub delta: f64,
    pub colour: [f64; 3],
}

impl PointRadiance {
    pub fn new(sigma: f64, delta: f64, colour: [f64; 3]) -> Self {
        Self { sigma, delta, colour }
    }

    fn optical_depth(&self) -> f64 {
        self.sigma * self.delta
    }
}

fn validate(points: &[PointRadiance]) -> Result<(), VrError> {
    for (index, p) in points.iter().enumerate() {
        if !(p.sigma >= 0.0) {
            return Err(VrError::NegativeDensity { index, sigma: p.sigma });
        }
        if !(p.delta > 0.0) {
            return Err(VrError::BadDelta { index, delta: p.delta });
        }
    }
    Ok(())
}

/// `T_i = exp(-Σ_{j<i} σ_j δ_j)` for points ordered front to back.
pub fn transmittance(points: &[PointRadiance]) -> Result<Vec<f64>, VrError> {
    validate(points)?;
    let mut acc = 0.0f64;
    Ok(points
        .iter()
        .map(|p| {
            let t = (-acc).exp();
            acc += p.optical_depth();
            t
        })
        .collect())
}

/// Per-point compositing weights `T_i (1 - exp(-σ_i δ_i))`.
pub fn weights(points: &[PointRadiance]) -> Result<Vec<f64>, VrError> {
    let trans = transmittance(points)?;
    Ok(points.iter().zip(trans).map(|(p, t)| t * -(-p.optical_depth()).exp_m1()).collect())
}

/// `Σ w_i c_i` in linear RGB.
pub fn composite(points: &[PointRadiance]) -> Result<[f64; 3], VrError> {
    let w = weights(points)?;
    let mut rgb = [0.0; 3];
    for (p, wi) in points.iter().zip(w) {
        for (c, v) in rgb.iter_mut().zip(p.colour) {
            *c += wi * v;
        }
    }
    Ok(rgb)
}
