//! Photometric loss, Adam, the learning-rate schedule and the training loop.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{write_atomic, Checkpoint, CheckpointError, DiffError, Graph, ParamStore, Real, Tensor, Var};
use crate::evalviz::psnr_from_mse;
use crate::model::{AbleModel, ModelConfig, ModelError, SampleOptions};
use crate::sampling::{generate_rays, SamplingError};
use crate::scenes::SceneDataset;

const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("loss: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<SamplingError> for TrainError {
    fn from(e: SamplingError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_rays: usize,
    pub iters: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Rays per forward/backward unit; fixed so results do not depend on threads.
    pub chunk_rays: usize,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_rays: 1024,
            iters: 25_000,
            lr_init: 5e-4,
            lr_final: 1e-4,
            warmup_iters: 1250,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            clip_norm: 5.0,
            chunk_rays: 64,
            log_every: 100,
            ckpt_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0 < self.lr_final && self.lr_final <= self.lr_init) {
            return err("require 0 < lr_final <= lr_init");
        }
        if self.warmup_iters >= self.iters {
            return err("warmup_iters must be below iters");
        }
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return err("batch_rays and chunk_rays must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return err("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be positive");
        }
        if self.log_every == 0 {
            return err("log_every must be positive");
        }
        Ok(())
    }
}

/// Learning rate at `iter`: log-linear decay from `lr_init` to `lr_final`
/// over `iters`, times a linear warmup factor.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let frac = iter as f64 / cfg.iters as f64;
    let base = (cfg.lr_init.ln() * (1.0 - frac) + cfg.lr_final.ln() * frac).exp();
    base * warmup_factor(iter, cfg)
}

pub fn warmup_factor(iter: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters == 0 {
        1.0
    } else {
        (iter as f64 / cfg.warmup_iters as f64).min(1.0)
    }
}

/// Batch mean of `|c - gt|^2 + |f - gt|^2`.
pub fn loss(rgb_coarse: &[[f64; 3]], rgb_fine: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64, TrainError> {
    if rgb_coarse.len() != gt.len() || rgb_fine.len() != gt.len() || gt.is_empty() {
        return Err(TrainError::Shape(format!("{} coarse, {} fine, {} targets", rgb_coarse.len(), rgb_fine.len(), gt.len())));
    }
    let sq = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
    let total: f64 = gt.iter().enumerate().map(|(i, g)| sq(&rgb_coarse[i], g) + sq(&rgb_fine[i], g)).sum();
    Ok(total / gt.len() as f64)
}

/// Graph form of [`loss`] over one chunk, divided by the full batch size.
pub fn loss_graph<T: Real>(g: &mut Graph<T>, coarse: Var, fine: Var, gt: &[[f64; 3]], batch: usize) -> Result<Var, TrainError> {
    if g.shape(coarse) != [gt.len(), 3] || g.shape(fine) != [gt.len(), 3] {
        return Err(TrainError::Shape(format!("predictions {:?} for {} targets", g.shape(coarse), gt.len())));
    }
    let target = g.constant(&[gt.len(), 3], gt.iter().flatten().map(|&v| T::from_f64_lossy(v)).collect())?;
    let mut terms = Vec::with_capacity(2);
    for pred in [coarse, fine] {
        let d = g.sub(pred, target)?;
        let d2 = g.mul(d, d)?;
        terms.push(g.sum(d2)?);
    }
    let total = g.add(terms[0], terms[1])?;
    Ok(g.scale(total, T::from_f64_lossy(1.0 / batch as f64))?)
}

/// Adam moments keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: ParamStore<f32> = {
            let mut z = ParamStore::new();
            for (name, t) in params.iter() {
                z.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
            }
            z
        };
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Bias-corrected Adam on every parameter with a gradient slot.
///
/// All gradients are checked before any parameter changes.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
    for (name, t) in params.iter() {
        if t.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(grad) = p.grad.as_ref() else { continue };
        let grad = grad.clone();
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::Config(format!("no Adam state for `{name}`")))?;
        let m = m.data_mut();
        let v = state.v.get_mut(name).expect("moments share keys").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Training state: model, optimizer and position in the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: AbleModel<f32>,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub iter: u64,
}

/// Loss and fine-only PSNR of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn stream_rng(seed: u64, iter: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iter << 20) | lane);
    rng
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = AbleModel::init(model_cfg, cfg.seed)?;
        let opt = OptimizerState::new(&model.params);
        Ok(Self { model, opt, cfg, iter: 0 })
    }

    fn check_dataset(&self, ds: &SceneDataset) -> Result<(), TrainError> {
        if ds.is_empty() {
            return Err(TrainError::Config("dataset has no images".into()));
        }
        Ok(())
    }

    /// One optimizer step on `batch_rays` random pixels.
    pub fn step(&mut self, ds: &SceneDataset) -> Result<StepStats, TrainError> {
        self.check_dataset(ds)?;
        let cfg = &self.cfg;
        let (w, h) = (ds.width(), ds.height());
        let mut pick = stream_rng(cfg.seed, self.iter, 0);
        let samples: Vec<(usize, usize, usize)> =
            (0..cfg.batch_rays).map(|_| (pick.random_range(0..ds.len()), pick.random_range(0..h), pick.random_range(0..w))).collect();
        let chunks: Vec<&[(usize, usize, usize)]> = samples.chunks(cfg.chunk_rays).collect();
        let model = &self.model;
        let (seed, iter, batch) = (cfg.seed, self.iter, cfg.batch_rays);
        let results: Vec<Result<(Vec<Vec<f32>>, f64, f64), TrainError>> = chunks
            .par_iter()
            .enumerate()
            .map(|(ci, chunk)| {
                let mut rays = Vec::with_capacity(chunk.len());
                let mut gt = Vec::with_capacity(chunk.len());
                for &(img, r, c) in chunk.iter() {
                    rays.push(generate_rays(&ds.cameras[img], &[(r, c)])?[0]);
                    gt.push(ds.images[img].get(r, c));
                }
                let mut rng = stream_rng(seed, iter, ci as u64 + 1);
                let mut g = Graph::new();
                let bound = model.params.bind(&mut g, true);
                let mut opts = SampleOptions { rng: Some(&mut rng), ..Default::default() };
                let pass = model.forward(&mut g, &bound, &rays, ds.near, ds.far, &mut opts)?;
                let l = loss_graph(&mut g, pass.coarse.rgb, pass.fine.rgb, &gt, batch)?;
                let fine_sq: f64 = g
                    .value(pass.fine.rgb)
                    .chunks(3)
                    .zip(&gt)
                    .map(|(p, q)| (0..3).map(|k| (p[k] as f64 - q[k]).powi(2)).sum::<f64>())
                    .sum();
                let loss_val = g.value(l)[0] as f64;
                g.backward(l)?;
                Ok((model.params.collect_grads(&g, &bound), loss_val, fine_sq))
            })
            .collect();

        let mut grads: Option<Vec<Vec<f32>>> = None;
        let (mut loss_sum, mut fine_sq) = (0.0, 0.0);
        for r in results {
            let (gr, l, f) = r?;
            loss_sum += l;
            fine_sq += f;
            match grads.as_mut() {
                None => grads = Some(gr),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(gr) {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let grads = grads.expect("batch has at least one chunk");
        for ((_, t), gr) in self.model.params.iter_mut().zip(grads) {
            t.grad = Some(gr);
        }
        let grad_norm = clip_grad_norm(&mut self.model.params, self.cfg.clip_norm);
        let lr = lr_at(self.iter, &self.cfg);
        adam_step(&mut self.model.params, &mut self.opt, lr, &self.cfg)?;
        self.model.params.zero_grads();
        self.iter += 1;
        Ok(StepStats { loss: loss_sum, psnr: psnr_from_mse(fine_sq / (3 * batch) as f64), lr, grad_norm })
    }

    /// Model, Adam moments and schedule position in one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(serde_json::json!({
            "iter": self.iter,
            "adam_step": self.opt.step,
            "train_config": self.cfg,
        }));
        for (prefix, store) in [(ADAM_M, &self.opt.m), (ADAM_V, &self.opt.v)] {
            for (name, t) in store.iter() {
                ck.push(format!("{prefix}{name}"), t.clone());
            }
        }
        ck
    }

    /// Restores a training checkpoint; the stored train config is replaced by `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = AbleModel::from_checkpoint(ck)?;
        let mut opt = OptimizerState::new(&model.params);
        for (prefix, store) in [(ADAM_M, &mut opt.m), (ADAM_V, &mut opt.v)] {
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let t = ck.get(&format!("{prefix}{name}")).ok_or_else(|| TrainError::Config(format!("checkpoint lacks {prefix}{name}")))?;
                store.insert(name, t.clone());
            }
        }
        let num = |k: &str| ck.metadata[k].as_u64().ok_or_else(|| TrainError::Config(format!("checkpoint metadata lacks `{k}`")));
        opt.step = num("adam_step")?;
        Ok(Self { model, opt, cfg, iter: num("iter")? })
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("model.ckpt"), metrics: dir.join("metrics.csv") }
    }
}

/// One CSV row per logged iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub psnr: f64,
    pub lr: f64,
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("iter,loss,psnr,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:.8},{:.4},{:.6e}\n", r.iter, r.loss, r.psnr, r.lr));
    }
    s
}

/// Runs `trainer` until `cfg.iters`, logging and checkpointing along the way.
pub fn train(trainer: &mut Trainer, ds: &SceneDataset, out: Option<&TrainOutputs>) -> Result<Vec<MetricsRow>, TrainError> {
    trainer.check_dataset(ds)?;
    let mut rows = Vec::new();
    while trainer.iter < trainer.cfg.iters {
        let stats = trainer.step(ds)?;
        let it = trainer.iter;
        if it.is_multiple_of(trainer.cfg.log_every) || it == trainer.cfg.iters {
            log::info!("iter {it} loss {:.5} psnr {:.2} lr {:.3e} |g| {:.3}", stats.loss, stats.psnr, stats.lr, stats.grad_norm);
            rows.push(MetricsRow { iter: it, loss: stats.loss, psnr: stats.psnr, lr: stats.lr });
            if let Some(o) = out {
                write_atomic(&o.metrics, metrics_csv(&rows).as_bytes())?;
            }
        }
        if let Some(o) = out {
            if trainer.cfg.ckpt_every > 0 && it.is_multiple_of(trainer.cfg.ckpt_every) && it != trainer.cfg.iters {
                trainer.to_checkpoint().save(&o.checkpoint)?;
            }
        }
    }
    if let Some(o) = out {
        trainer.to_checkpoint().save(&o.checkpoint)?;
        write_atomic(&o.metrics, metrics_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// Flat key-value run configuration: every [`ModelConfig`] and
/// [`TrainConfig`] field plus dataset location.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub downscale: usize,
}

fn known_keys<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v).expect("config serializes") {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

impl RunConfig {
    /// Parses TOML-style `key = value` lines; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        let model_keys = known_keys(&ModelConfig::default());
        let train_keys = known_keys(&TrainConfig::default());
        let mut model = toml::Table::new();
        let mut train = toml::Table::new();
        let mut cfg = RunConfig { downscale: 1, ..Default::default() };
        for (k, v) in table {
            let as_str = |v: &toml::Value| v.as_str().map(str::to_owned).ok_or_else(|| TrainError::Config(format!("`{k}` must be a string")));
            match k.as_str() {
                "dataset" => cfg.dataset = Some(as_str(&v)?.into()),
                "out_dir" => cfg.out_dir = Some(as_str(&v)?.into()),
                "downscale" => {
                    cfg.downscale = v
                        .as_integer()
                        .filter(|d| *d >= 1)
                        .ok_or_else(|| TrainError::Config("`downscale` must be a positive integer".into()))? as usize
                }
                _ if model_keys.contains(&k) => {
                    model.insert(k, v);
                }
                _ if train_keys.contains(&k) => {
                    train.insert(k, v);
                }
                _ => return Err(TrainError::Config(format!("unknown key `{k}`"))),
            }
        }
        cfg.model = model.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.train = train.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io { path: path.into(), msg: e.to_string() })?;
        Self::parse(&text).map_err(|e| TrainError::Io { path: path.into(), msg: e.to_string() })
    }

    /// Fully resolved configuration in the same key-value format.
    pub fn to_text(&self) -> String {
        let mut t = toml::Table::new();
        for part in [toml::Table::try_from(&self.model), toml::Table::try_from(&self.train)] {
            t.extend(part.expect("config serializes"));
        }
        if let Some(d) = &self.dataset {
            t.insert("dataset".into(), d.display().to_string().into());
        }
        if let Some(d) = &self.out_dir {
            t.insert("out_dir".into(), d.display().to_string().into());
        }
        t.insert("downscale".into(), (self.downscale as i64).into());
        toml::to_string(&t).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalviz::ImageBuffer;
    use crate::sampling::Camera;
    use crate::scenes::{look_at_origin, Split};
    use nalgebra::Vector3;

    fn cfg() -> TrainConfig {
        TrainConfig { iters: 250_000, ..Default::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(1250, &c) - 5e-4 * 0.2f64.powf(1250.0 / 250_000.0)).abs() < 1e-15);
        assert!((lr_at(125_000, &c) - (5e-4f64 * 1e-4).sqrt()).abs() < 1e-12);
        assert_eq!(warmup_factor(1250, &c), 1.0);
        assert!(warmup_factor(1249, &c) < 1.0);
        let mut prev = f64::INFINITY;
        for it in (1250..=250_000).step_by(977) {
            let lr = lr_at(it, &c);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig { lr_final: 1e-3, ..cfg() }.validate().is_err());
        assert!(TrainConfig { warmup_iters: 250_000, ..cfg() }.validate().is_err());
    }

    #[test]
    fn loss_examples() {
        let gt = vec![[0.2, 0.4, 0.6]; 5];
        assert_eq!(loss(&gt, &gt, &gt).unwrap(), 0.0);
        let off: Vec<_> = gt.iter().map(|g| [g[0] + 0.1, g[1], g[2]]).collect();
        assert!((loss(&gt, &off, &gt).unwrap() - 0.01).abs() < 1e-12);
        assert!(loss(&gt[..2], &gt, &gt).is_err());
    }

    #[test]
    fn loss_graph_matches_scalar_loss() {
        let gt = [[0.1, 0.5, 0.9], [0.3, 0.3, 0.3]];
        let c = [[0.2, 0.4, 0.7], [0.0, 0.3, 0.5]];
        let f = [[0.1, 0.6, 0.9], [0.4, 0.2, 0.3]];
        let mut g = Graph::new();
        let cv = g.constant(&[2, 3], c.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let fv = g.constant(&[2, 3], f.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let l = loss_graph(&mut g, cv, fv, &gt, 2).unwrap();
        assert!((g.value(l)[0] as f64 - loss(&c, &f, &gt).unwrap()).abs() < 1e-6);
    }

    fn store(grad: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        let mut t = Tensor::from_vec([4], vec![0.5, -1.0, 2.0, 0.0]).unwrap().with_grad(true);
        t.grad = Some(vec![grad; 4]);
        p.insert("w", t);
        p
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, 1e-3, &cfg()).unwrap();
        let moved: Vec<f32> = p.get("w").unwrap().data().iter().zip([0.5, -1.0, 2.0, 0.0]).map(|(a, b)| b - a).collect();
        assert!(moved.iter().all(|d| (d - 1e-3).abs() < 1e-7));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut p = store(0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, 1e-3, &cfg()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -1.0, 2.0, 0.0]);

        let mut p = store(1.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &mut s, 1e-3, &cfg()).unwrap();
        let m_before = s.m.get("w").unwrap().data().to_vec();
        p.get_mut("w").unwrap().grad = Some(vec![0.0; 4]);
        adam_step(&mut p, &mut s, 1e-3, &cfg()).unwrap();
        let m_after = s.m.get("w").unwrap().data();
        assert!(m_after.iter().zip(&m_before).all(|(a, b)| (a - 0.9 * b).abs() < 1e-7));
    }

    #[test]
    fn adam_rejects_nan_and_names_parameter() {
        let mut p = store(f32::NAN);
        let mut s = OptimizerState::new(&p);
        match adam_step(&mut p, &mut s, 1e-3, &cfg()) {
            Err(TrainError::NonFiniteGradient(n)) => assert_eq!(n, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut p = store(10.0);
        let n = clip_grad_norm(&mut p, 5.0);
        assert!((n - 20.0).abs() < 1e-9);
        assert!((p.grad_norm() - 5.0).abs() < 1e-5);
    }

    #[test]
    fn run_config_parse() {
        let c = RunConfig::parse("dim = 64\niters = 10\nwarmup_iters = 2\ndataset = \"d\"\nuse_mask = false\n").unwrap();
        assert_eq!(c.model.dim, 64);
        assert!(!c.model.use_mask);
        assert_eq!(c.train.iters, 10);
        assert_eq!(c.dataset.as_deref(), Some(Path::new("d")));
        assert!(RunConfig::parse("dimm = 3").is_err());
        assert!(RunConfig::parse("dim = \"x\"").is_err());
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
    }

    fn tiny_dataset() -> SceneDataset {
        let pose = look_at_origin(Vector3::new(0.0, 0.0, 4.0));
        let cam = Camera::new(8, 8, 10.0, pose).unwrap();
        let px = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { [0.9, 0.2, 0.1] } else { [0.1, 0.3, 0.8] }).collect();
        SceneDataset::new(vec![cam], vec![ImageBuffer::new(8, 8, px).unwrap()], Split::Train, 2.0, 6.0).unwrap()
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = tiny_dataset();
        let tc = TrainConfig { iters: 6, warmup_iters: 2, batch_rays: 16, chunk_rays: 8, ..Default::default() };
        let mut a = Trainer::new(ModelConfig::tiny(), tc.clone()).unwrap();
        for _ in 0..6 {
            a.step(&ds).unwrap();
        }
        let mut b = Trainer::new(ModelConfig::tiny(), tc.clone()).unwrap();
        for _ in 0..3 {
            b.step(&ds).unwrap();
        }
        let bytes = b.to_checkpoint().to_bytes();
        let mut c = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), tc).unwrap();
        assert_eq!(c.to_checkpoint().to_bytes(), bytes);
        for _ in 0..3 {
            c.step(&ds).unwrap();
        }
        assert_eq!(c.to_checkpoint().to_bytes(), a.to_checkpoint().to_bytes());
    }

    #[test]
    fn loss_drops_on_tiny_dataset() {
        let ds = tiny_dataset();
        let tc = TrainConfig { iters: 500, warmup_iters: 20, batch_rays: 64, chunk_rays: 64, lr_init: 5e-3, lr_final: 1e-3, ..Default::default() };
        let mut t = Trainer::new(ModelConfig::tiny(), tc).unwrap();
        let first = t.step(&ds).unwrap().loss;
        let rows = train(&mut t, &ds, None).unwrap();
        let last = rows.last().unwrap().loss;
        assert!(last * 10.0 < first, "loss {first} -> {last}");
    }
}
