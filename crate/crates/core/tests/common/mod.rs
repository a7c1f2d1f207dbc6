#![allow(dead_code)]

use able_core::diffcore::{Graph, ParamStore};
use able_core::model::{AbleModel, ModelConfig, SampleOptions};
use able_core::sampling::{generate_rays, Camera, Ray, TInterval};
use able_core::scenes::look_at_origin;
use able_core::trainer::loss_graph;
use nalgebra::Vector3;

pub fn camera(res: usize, eye: Vector3<f64>) -> Camera {
    Camera::new(res, res, res as f64 * 1.4, look_at_origin(eye)).unwrap()
}

pub fn some_rays(n: usize) -> Vec<Ray> {
    let cam = camera(8, Vector3::new(1.0, -2.0, 3.2));
    let px: Vec<_> = (0..n).map(|i| ((5 * i + 1) % 8, (3 * i + 2) % 8)).collect();
    generate_rays(&cam, &px).unwrap()
}

/// Fixed sampling for a batch, taken from one deterministic forward pass.
pub struct FrozenSamples {
    pub coarse: Vec<Vec<TInterval>>,
    pub fine: Vec<Vec<TInterval>>,
}

pub fn freeze_samples(model: &AbleModel<f64>, rays: &[Ray], near: f64, far: f64) -> FrozenSamples {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let pass = model.forward(&mut g, &p, rays, near, far, &mut SampleOptions::default()).unwrap();
    FrozenSamples { coarse: pass.coarse.intervals, fine: pass.fine.intervals }
}

/// Training loss of `params` with sampling held fixed.
pub fn frozen_loss(cfg: &ModelConfig, params: &ParamStore<f64>, rays: &[Ray], s: &FrozenSamples, gt: &[[f64; 3]]) -> f64 {
    let model = AbleModel { config: cfg.clone(), params: ParamStore::new() };
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let mut opts = SampleOptions { coarse_override: Some(&s.coarse), fine_override: Some(&s.fine), ..Default::default() };
    let pass = model.forward(&mut g, &p, rays, 2.0, 6.0, &mut opts).unwrap();
    let l = loss_graph(&mut g, pass.coarse.rgb, pass.fine.rgb, gt, rays.len()).unwrap();
    g.value(l)[0]
}

/// Analytic gradients of [`frozen_loss`] in parameter-name order.
pub fn frozen_grads(model: &AbleModel<f64>, rays: &[Ray], s: &FrozenSamples, gt: &[[f64; 3]]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut opts = SampleOptions { coarse_override: Some(&s.coarse), fine_override: Some(&s.fine), ..Default::default() };
    let pass = model.forward(&mut g, &p, rays, 2.0, 6.0, &mut opts).unwrap();
    let l = loss_graph(&mut g, pass.coarse.rgb, pass.fine.rgb, gt, rays.len()).unwrap();
    g.backward(l).unwrap();
    model.params.collect_grads(&g, &p)
}

/// Central difference of `f` at entry `idx` of parameter `name`.
pub fn central_difference(p: &mut ParamStore<f64>, name: &str, idx: usize, h: f64, f: impl Fn(&ParamStore<f64>) -> f64) -> f64 {
    let orig = p.get(name).unwrap().data()[idx];
    p.get_mut(name).unwrap().data_mut()[idx] = orig + h;
    let up = f(p);
    p.get_mut(name).unwrap().data_mut()[idx] = orig - h;
    let down = f(p);
    p.get_mut(name).unwrap().data_mut()[idx] = orig;
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
