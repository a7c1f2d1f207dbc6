//! Camera rays, conic-frustum samples and their integrated positional encoding,
//! and attention-driven resampling of a ray for the fine network.

use log::warn;
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Real, Unary, Var};

/// Floor applied to the normalized resampling weights before renormalizing.
pub const ATTENTION_PDF_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("pixel ({row}, {col}) is outside a {width}x{height} image")]
    OutOfBounds { row: usize, col: usize, width: usize, height: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("sampling config: {0}")]
    Config(String),
    #[error("degenerate interval [{t0}, {t1}]")]
    DegenerateInterval { t0: f64, t1: f64 },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

/// Pinhole camera with a camera-to-world pose (Blender convention: looks down -z).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub pose: Matrix4<f64>,
}

impl Camera {
    pub fn new(width: usize, height: usize, focal: f64, pose: Matrix4<f64>) -> Result<Self, SamplingError> {
        if width == 0 || height == 0 {
            return Err(SamplingError::InvalidCamera(format!("image size {width}x{height}")));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(SamplingError::InvalidCamera(format!("focal {focal}")));
        }
        let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        if !(err <= 1e-4) {
            return Err(SamplingError::InvalidCamera(format!("rotation block not orthonormal (error {err:.2e})")));
        }
        Ok(Self { width, height, focal, pose })
    }

    /// Focal length in pixels from a horizontal field of view.
    pub fn focal_from_fov(width: usize, camera_angle_x: f64) -> f64 {
        0.5 * width as f64 / (0.5 * camera_angle_x).tan()
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// `r(t) = o + t d`; `radius` is the cone radius per unit `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub radius: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    pub fn view_dir(&self) -> Vector3<f64> {
        self.direction.normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TInterval {
    pub t0: f64,
    pub t1: f64,
}

impl TInterval {
    pub fn mid(&self) -> f64 {
        0.5 * (self.t0 + self.t1)
    }

    pub fn width(&self) -> f64 {
        self.t1 - self.t0
    }
}

/// Gaussian approximation of a conic frustum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicFrustumGaussian {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub interval: TInterval,
}

/// Rays through pixel centers.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>, SamplingError> {
    let rot = camera.pose.fixed_view::<3, 3>(0, 0).into_owned();
    let origin = camera.origin();
    let (w, h, f) = (camera.width as f64, camera.height as f64, camera.focal);
    let radius = (1.0 / f) / 12f64.sqrt();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(SamplingError::OutOfBounds { row, col, width: camera.width, height: camera.height });
            }
            let cam = Vector3::new((col as f64 + 0.5 - 0.5 * w) / f, -(row as f64 + 0.5 - 0.5 * h) / f, -1.0);
            Ok(Ray { origin, direction: rot * cam, radius })
        })
        .collect()
}

/// `n` contiguous intervals partitioning `[near, far]`.
///
/// With `jitter`, each interior edge moves uniformly within the half-bins around
/// its grid position, so the partition property is kept.
pub fn stratified_intervals<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Result<Vec<TInterval>, SamplingError> {
    if n < 2 {
        return Err(SamplingError::Config(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(0.0 < near && near < far) {
        return Err(SamplingError::Config(format!("require 0 < near < far, got {near}, {far}")));
    }
    let step = (far - near) / n as f64;
    let mut edges: Vec<f64> = (0..=n).map(|i| near + step * i as f64).collect();
    edges[n] = far;
    if let Some(rng) = jitter {
        for e in edges.iter_mut().take(n).skip(1) {
            let u: f64 = rng.random();
            *e += (u - 0.5) * step;
        }
    }
    Ok(edges.windows(2).map(|w| TInterval { t0: w[0], t1: w[1] }).collect())
}

/// Mean and covariance of the conic frustum of `ray` over `interval`.
pub fn frustum_to_gaussian(ray: &Ray, interval: TInterval) -> Result<ConicFrustumGaussian, SamplingError> {
    let TInterval { t0, t1 } = interval;
    if !(t1 > t0) {
        return Err(SamplingError::DegenerateInterval { t0, t1 });
    }
    let t_mu = 0.5 * (t0 + t1);
    let t_delta = 0.5 * (t1 - t0);
    let (mu2, d2) = (t_mu * t_mu, t_delta * t_delta);
    let denom = 3.0 * mu2 + d2;
    let mean_t = t_mu + 2.0 * t_mu * d2 / denom;
    let var_t = d2 / 3.0 - (4.0 / 15.0) * (d2 * d2 * (12.0 * mu2 - d2)) / (denom * denom);
    let var_r = ray.radius * ray.radius * (mu2 / 4.0 + (5.0 / 12.0) * d2 - (4.0 / 15.0) * (d2 * d2) / denom);
    let d = ray.direction;
    let dd = d * d.transpose();
    let cov = dd * var_t + (Matrix3::identity() - dd / d.norm_squared()) * var_r;
    Ok(ConicFrustumGaussian { mean: ray.origin + d * mean_t, cov, interval })
}

/// Expected sinusoidal features under the Gaussian, `3 * 2 * bands` values
/// ordered axis-major, then band, then (sin, cos).
pub fn integrated_pos_enc(g: &ConicFrustumGaussian, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for j in 0..3 {
        let (mu, var) = (g.mean[j], g.cov[(j, j)]);
        let mut scale = 1.0;
        for _ in 0..bands {
            let damp = (-0.5 * scale * scale * var).exp();
            out.push((scale * mu).sin() * damp);
            out.push((scale * mu).cos() * damp);
            scale *= 2.0;
        }
    }
    out
}

/// Plain positional encoding with the same layout as [`integrated_pos_enc`].
pub fn positional_encoding(v: &Vector3<f64>, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * bands);
    for j in 0..3 {
        let mut scale = 1.0;
        for _ in 0..bands {
            out.push((scale * v[j]).sin());
            out.push((scale * v[j]).cos());
            scale *= 2.0;
        }
    }
    out
}

/// The integrated positional encoding built from graph primitives, so that it
/// can be differentiated with respect to `mean` (`[3]`) and `cov_diag` (`[3]`).
pub fn ipe_graph<T: Real>(g: &mut Graph<T>, mean: Var, cov_diag: Var, bands: usize) -> Result<Var, SamplingError> {
    let mut pieces = Vec::with_capacity(2 * bands);
    let mut scale = 1.0f64;
    for _ in 0..bands {
        let arg = g.scale(mean, T::from_f64_lossy(scale))?;
        let damp_arg = g.scale(cov_diag, T::from_f64_lossy(-0.5 * scale * scale))?;
        let damp = g.exp(damp_arg)?;
        for f in [Unary::Sin, Unary::Cos] {
            let s = g.unary(arg, f)?;
            let v = g.mul(s, damp)?;
            pieces.push(g.reshape(v, &[1, 1, 3])?);
        }
        scale *= 2.0;
    }
    // [bands * 2, 1, 3] -> [bands, 2, 3] -> [3, bands, 2]
    let stacked = g.concat(&pieces, 0)?;
    let stacked = g.reshape(stacked, &[bands, 2, 3])?;
    let axis_major = g.permute(stacked, &[2, 0, 1])?;
    Ok(g.reshape(axis_major, &[6 * bands])?)
}

/// Inverse-CDF resampling of `n_fine` intervals from attention weights over the
/// coarse intervals.
///
/// Weights are normalized, floored at [`ATTENTION_PDF_FLOOR`] and renormalized.
/// With an rng the quantiles are stratified-jittered; without one they are the
/// bin centers. The sorted samples become contiguous intervals by splitting at
/// midpoints, clamped to `[near, far]`.
pub fn resample_from_attention<R: Rng + ?Sized>(
    coarse: &[TInterval],
    attn: &[f64],
    n_fine: usize,
    near: f64,
    far: f64,
    rng: Option<&mut R>,
) -> Result<Vec<TInterval>, SamplingError> {
    if coarse.len() != attn.len() || coarse.is_empty() {
        return Err(SamplingError::Config(format!(
            "{} coarse intervals but {} attention weights",
            coarse.len(),
            attn.len()
        )));
    }
    if n_fine < 2 {
        return Err(SamplingError::Config(format!("need at least 2 fine samples, got {n_fine}")));
    }
    let total: f64 = attn.iter().map(|w| if w.is_finite() { w.max(0.0) } else { 0.0 }).sum();
    let mut w: Vec<f64> = if total > 0.0 {
        attn.iter().map(|&a| if a.is_finite() { a.max(0.0) / total } else { 0.0 }).collect()
    } else {
        warn!("attention weights sum to zero; resampling from a uniform pdf");
        vec![1.0 / attn.len() as f64; attn.len()]
    };
    w.iter_mut().for_each(|v| *v = v.max(ATTENTION_PDF_FLOOR));
    let norm: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= norm);

    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    for &v in &w {
        cdf.push(cdf.last().unwrap() + v);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let quantiles: Vec<f64> = match rng {
        Some(rng) => (0..n_fine).map(|k| (k as f64 + rng.random::<f64>()) / n_fine as f64).collect(),
        None => (0..n_fine).map(|k| (k as f64 + 0.5) / n_fine as f64).collect(),
    };
    let mut bin = 0;
    let samples: Vec<f64> = quantiles
        .iter()
        .map(|&u| {
            while bin + 1 < w.len() && cdf[bin + 1] <= u {
                bin += 1;
            }
            let frac = ((u - cdf[bin]) / w[bin]).clamp(0.0, 1.0);
            let iv = coarse[bin];
            (iv.t0 + frac * iv.width()).clamp(near, far)
        })
        .collect();

    let last = n_fine - 1;
    let mut edges = Vec::with_capacity(n_fine + 1);
    edges.push((samples[0] - 0.5 * (samples[1] - samples[0])).clamp(near, far));
    for k in 0..last {
        edges.push(0.5 * (samples[k] + samples[k + 1]));
    }
    edges.push((samples[last] + 0.5 * (samples[last] - samples[last - 1])).clamp(near, far));
    // keep intervals non-degenerate when neighbouring samples coincide numerically
    let min_width = (far - near) * 1e-9;
    for k in 1..edges.len() {
        if edges[k] < edges[k - 1] + min_width {
            edges[k] = edges[k - 1] + min_width;
        }
    }
    if edges[n_fine] > far {
        edges[n_fine] = far;
        for k in (0..n_fine).rev() {
            if edges[k] > edges[k + 1] - min_width {
                edges[k] = edges[k + 1] - min_width;
            }
        }
    }
    Ok(edges.windows(2).map(|e| TInterval { t0: e[0], t1: e[1] }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(w, h, f, Matrix4::identity()).unwrap()
    }

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let cam = identity_camera(9, 9, 10.0);
        let r = generate_rays(&cam, &[(4, 4)]).unwrap()[0];
        let d = r.direction.normalize();
        assert!((d - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((r.radius - 0.1 / 12f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn translation_shifts_origins_only() {
        let cam = identity_camera(8, 6, 7.0);
        let mut pose = Matrix4::identity();
        pose[(0, 3)] = 1.0;
        let moved = Camera::new(8, 6, 7.0, pose).unwrap();
        let px = [(0, 0), (5, 7), (2, 3)];
        for (a, b) in generate_rays(&cam, &px).unwrap().iter().zip(generate_rays(&moved, &px).unwrap()) {
            assert_eq!(b.origin - a.origin, Vector3::new(1.0, 0.0, 0.0));
            assert_eq!(a.direction, b.direction);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_range_error() {
        let cam = identity_camera(4, 4, 3.0);
        assert!(matches!(generate_rays(&cam, &[(4, 0)]), Err(SamplingError::OutOfBounds { .. })));
    }

    #[test]
    fn focal_from_blender_fov() {
        assert!((Camera::focal_from_fov(800, 0.6911112) - 1111.11).abs() < 0.01);
    }

    #[test]
    fn non_orthonormal_pose_rejected() {
        let mut pose = Matrix4::identity();
        pose[(0, 0)] = 2.0;
        assert!(Camera::new(4, 4, 3.0, pose).is_err());
        assert!(Camera::new(4, 4, 0.0, Matrix4::identity()).is_err());
    }

    #[test]
    fn stratified_uniform_partition() {
        let iv = stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 4, None).unwrap();
        let want = [(2.0, 3.0), (3.0, 4.0), (4.0, 5.0), (5.0, 6.0)];
        for (i, (a, b)) in want.iter().enumerate() {
            assert_eq!((iv[i].t0, iv[i].t1), (*a, *b));
        }
        assert!(stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 1, None).is_err());
    }

    #[test]
    fn stratified_jitter_partitions_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let iv = stratified_intervals(2.0, 6.0, 7, Some(&mut rng)).unwrap();
            assert_eq!(iv[0].t0, 2.0);
            assert_eq!(iv[6].t1, 6.0);
            for w in iv.windows(2) {
                assert_eq!(w[0].t1, w[1].t0);
            }
            assert!(iv.iter().all(|i| 2.0 <= i.t0 && i.t0 < i.t1 && i.t1 <= 6.0));
        }
        let a = stratified_intervals(2.0, 6.0, 5, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        let b = stratified_intervals(2.0, 6.0, 5, Some(&mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        assert_eq!(a, b);
    }

    fn test_ray() -> Ray {
        Ray { origin: Vector3::new(0.3, -0.2, 4.0), direction: Vector3::new(0.1, 0.2, -1.0), radius: 0.004 }
    }

    #[test]
    fn frustum_point_limit() {
        let r = test_ray();
        let g = frustum_to_gaussian(&r, TInterval { t0: 3.0, t1: 3.0 + 1e-7 }).unwrap();
        assert!((g.mean - r.at(3.0 + 5e-8)).norm() < 1e-9);
        // radial variance stays ~ (radius * t)^2 / 4, which is tiny here
        assert!(g.cov.abs().max() < 1e-4);
        assert!(matches!(
            frustum_to_gaussian(&r, TInterval { t0: 3.0, t1: 3.0 }),
            Err(SamplingError::DegenerateInterval { .. })
        ));
    }

    #[test]
    fn axial_variance_below_half_width_squared() {
        for i in 1..60 {
            for j in 1..60 {
                let t_mu = 0.1 * i as f64;
                let t_delta = t_mu * j as f64 / 60.0;
                let (mu2, d2) = (t_mu * t_mu, t_delta * t_delta);
                let denom = 3.0 * mu2 + d2;
                let var_t = d2 / 3.0 - (4.0 / 15.0) * (d2 * d2 * (12.0 * mu2 - d2)) / (denom * denom);
                assert!(var_t < d2 && var_t > 0.0, "t_mu={t_mu} t_delta={t_delta}");
            }
        }
    }

    proptest! {
        #[test]
        fn frustum_covariance_is_symmetric_psd(
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in 0.2f64..1.5,
            t0 in 0.5f64..5.0, w in 1e-4f64..2.0, radius in 1e-4f64..0.05,
        ) {
            let ray = Ray { origin: Vector3::zeros(), direction: Vector3::new(dx, dy, -dz), radius };
            let g = frustum_to_gaussian(&ray, TInterval { t0, t1: t0 + w }).unwrap();
            prop_assert!((g.cov - g.cov.transpose()).abs().max() < 1e-12);
            let eig = SymmetricEigen::new(g.cov);
            prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-9));
            prop_assert!((0..3).all(|k| g.cov[(k, k)] >= 0.0));
        }

        #[test]
        fn resampled_intervals_sorted_and_bounded(seed in 0u64..500, nf in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coarse = stratified_intervals(2.0, 6.0, 16, Some(&mut rng)).unwrap();
            let attn: Vec<f64> = (0..16).map(|_| rng.random::<f64>().powi(4)).collect();
            let fine = resample_from_attention(&coarse, &attn, nf, 2.0, 6.0, Some(&mut rng)).unwrap();
            prop_assert_eq!(fine.len(), nf);
            prop_assert!(fine.iter().all(|i| 2.0 <= i.t0 && i.t0 < i.t1 && i.t1 <= 6.0));
            for w in fine.windows(2) {
                prop_assert!(w[0].t1 <= w[1].t0 + 1e-12);
            }
        }
    }

    #[test]
    fn ipe_zero_variance_is_plain_encoding() {
        let g = ConicFrustumGaussian {
            mean: Vector3::new(0.3, -1.2, 2.5),
            cov: Matrix3::zeros(),
            interval: TInterval { t0: 1.0, t1: 2.0 },
        };
        assert_eq!(integrated_pos_enc(&g, 16), positional_encoding(&g.mean, 16));
        assert_eq!(integrated_pos_enc(&g, 16).len(), 96);
    }

    #[test]
    fn ipe_large_variance_vanishes_and_origin_case() {
        let g = ConicFrustumGaussian {
            mean: Vector3::new(0.7, 0.1, -0.4),
            cov: Matrix3::identity() * 1e6,
            interval: TInterval { t0: 1.0, t1: 2.0 },
        };
        assert!(integrated_pos_enc(&g, 8).iter().all(|v| v.abs() < 1e-100));

        let cov = Matrix3::from_diagonal(&Vector3::new(0.01, 0.002, 0.3));
        let g = ConicFrustumGaussian { mean: Vector3::zeros(), cov, interval: TInterval { t0: 1.0, t1: 2.0 } };
        let f = integrated_pos_enc(&g, 4);
        for j in 0..3 {
            for k in 0..4 {
                let base = j * 8 + k * 2;
                assert_eq!(f[base], 0.0);
                let want = (-(4f64.powi(k as i32)) * cov[(j, j)] / 2.0).exp();
                assert!((f[base + 1] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ipe_graph_matches_direct_evaluation() {
        let r = test_ray();
        let gauss = frustum_to_gaussian(&r, TInterval { t0: 3.0, t1: 3.4 }).unwrap();
        let mut g = Graph::<f64>::new();
        let mean = g.constant(&[3], gauss.mean.iter().copied().collect()).unwrap();
        let diag = g.constant(&[3], (0..3).map(|k| gauss.cov[(k, k)]).collect()).unwrap();
        let out = ipe_graph(&mut g, mean, diag, 5).unwrap();
        let direct = integrated_pos_enc(&gauss, 5);
        for (a, b) in g.value(out).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ipe_gradient_matches_finite_differences() {
        let mu0 = [0.4, -0.7, 1.3];
        let diag = [0.01, 0.03, 0.002];
        let weights: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let eval = |mu: &[f64; 3]| -> (f64, Vec<f64>) {
            let mut g = Graph::<f64>::new();
            let m = g.param(&[3], mu.to_vec()).unwrap();
            let d = g.constant(&[3], diag.to_vec()).unwrap();
            let f = ipe_graph(&mut g, m, d, 6).unwrap();
            let w = g.constant(&[36], weights.clone()).unwrap();
            let p = g.mul(f, w).unwrap();
            let s = g.sum(p).unwrap();
            g.backward(s).unwrap();
            (g.value(s)[0], g.grad(m).unwrap().to_vec())
        };
        let (_, analytic) = eval(&mu0);
        for j in 0..3 {
            let h = 1e-4;
            let mut up = mu0;
            up[j] += h;
            let mut dn = mu0;
            dn[j] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            let rel = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs());
            assert!(rel < 1e-3, "axis {j}: fd {fd} analytic {}", analytic[j]);
        }
    }

    #[test]
    fn resample_concentrates_on_peak() {
        let coarse = stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 4, None).unwrap();
        let attn = [0.0, 1.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut inside = 0;
        let mut total = 0;
        for _ in 0..1000 {
            let fine = resample_from_attention(&coarse, &attn, 16, 2.0, 6.0, Some(&mut rng)).unwrap();
            for iv in fine {
                total += 1;
                if (3.0..=4.0).contains(&iv.mid()) {
                    inside += 1;
                }
            }
        }
        assert!(inside as f64 / total as f64 >= 0.9, "{inside}/{total}");
    }

    #[test]
    fn resample_uniform_weights_is_uniform() {
        let coarse = stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 32, None).unwrap();
        let attn = vec![1.0 / 32.0; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let fine = resample_from_attention(&coarse, &attn, n, 2.0, 6.0, Some(&mut rng)).unwrap();
        let mut mids: Vec<f64> = fine.iter().map(|iv| (iv.mid() - 2.0) / 4.0).collect();
        mids.sort_by(f64::total_cmp);
        let ks = mids
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).abs().max((x - i as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn resample_zero_weights_fall_back_to_uniform() {
        let coarse = stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 8, None).unwrap();
        let fine = resample_from_attention::<ChaCha8Rng>(&coarse, &[0.0; 8], 8, 2.0, 6.0, None).unwrap();
        for (k, iv) in fine.iter().enumerate() {
            assert!((iv.mid() - (2.0 + 0.5 * (k as f64 + 0.5))).abs() < 0.3);
        }
    }

    #[test]
    fn resample_is_deterministic_given_seed() {
        let coarse = stratified_intervals::<ChaCha8Rng>(2.0, 6.0, 8, None).unwrap();
        let attn = [0.1, 0.3, 0.05, 0.05, 0.2, 0.1, 0.1, 0.1];
        let a = resample_from_attention(&coarse, &attn, 8, 2.0, 6.0, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        let b = resample_from_attention(&coarse, &attn, 8, 2.0, 6.0, Some(&mut ChaCha8Rng::seed_from_u64(4))).unwrap();
        assert_eq!(a, b);
    }
}
