//! The attention-based renderer.
//!
//! Per ray, a coarse network embeds stratified conic frustums, runs them with a
//! learned ray token through the masked AB transformer and decodes a colour from
//! the ray token plus a view-dependent colour from the learnable-embedding (LE)
//! branch. Its ray-token attention drives resampling for the fine network, whose
//! initial ray token is the coarse output ray token.

mod layers;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{BoolMatrix, Bound, Checkpoint, DiffError, Graph, ParamStore, Real, Tensor, Var};
use crate::sampling::{
    frustum_to_gaussian, integrated_pos_enc, positional_encoding, resample_from_attention, stratified_intervals, Ray,
    SamplingError, TInterval,
};

use layers::{attention, init_attention, init_linear, init_norm, linear, mlp2, norm};

/// Random source for jitter during training.
pub type SampleRng = ChaCha8Rng;

/// Standard deviation for the learned ray token and LE bank at init.
const TOKEN_INIT_STD: f64 = 0.02;
/// Output-layer bias at init so that initial colours sit inside the sRGB range.
const DIRECT_BIAS_INIT: f32 = -1.0;
const VIEWDEP_BIAS_INIT: f32 = -2.0;

pub const LE_BANK: &str = "le_bank";
pub const RAY_TOKEN_INIT: &str = "ray_token_init";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("model config: {0}")]
    Config(String),
    #[error("tone_map: negative linear input {0}")]
    NegativeRadiance(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width D.
    pub dim: usize,
    pub coarse_layers: usize,
    pub fine_layers: usize,
    pub heads: usize,
    pub ff_ratio: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Number of learnable embeddings; 0 disables the view-dependent branch.
    pub n_le: usize,
    pub view_bands: usize,
    pub pos_bands: usize,
    pub embed_layers: usize,
    pub embed_width: usize,
    pub le_blocks: usize,
    /// Front-to-back masking in the AB transformer; off means all-allowed.
    pub use_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 192,
            coarse_layers: 2,
            fine_layers: 6,
            heads: 4,
            ff_ratio: 3,
            coarse_samples: 96,
            fine_samples: 96,
            n_le: 32,
            view_bands: 16,
            pos_bands: 16,
            embed_layers: 4,
            embed_width: 192,
            le_blocks: 2,
            use_mask: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            dim: 32,
            coarse_layers: 1,
            fine_layers: 1,
            heads: 4,
            ff_ratio: 3,
            coarse_samples: 8,
            fine_samples: 8,
            n_le: 4,
            view_bands: 4,
            pos_bands: 4,
            embed_layers: 2,
            embed_width: 32,
            le_blocks: 1,
            use_mask: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return err(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        for (name, v) in [
            ("dim", self.dim),
            ("coarse_layers", self.coarse_layers),
            ("fine_layers", self.fine_layers),
            ("ff_ratio", self.ff_ratio),
            ("view_bands", self.view_bands),
            ("pos_bands", self.pos_bands),
            ("embed_layers", self.embed_layers),
            ("embed_width", self.embed_width),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if self.coarse_samples < 2 || self.fine_samples < 2 {
            return err("coarse_samples and fine_samples must be at least 2".into());
        }
        if self.n_le > 0 && self.le_blocks == 0 {
            return err("le_blocks must be at least 1 when n_le > 0".into());
        }
        Ok(())
    }

    pub fn ipe_len(&self) -> usize {
        6 * self.pos_bands
    }

    pub fn view_len(&self) -> usize {
        6 * self.view_bands
    }
}

/// Which tokens each token may attend to; index 0 is the ray token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask(Arc<BoolMatrix>);

impl AttentionMask {
    pub fn allowed(&self) -> &BoolMatrix {
        &self.0
    }

    pub fn shared(&self) -> &Arc<BoolMatrix> {
        &self.0
    }

    /// All-allowed mask over `n` volumes plus the ray token.
    pub fn unmasked(n: usize) -> Self {
        Self(Arc::new(BoolMatrix::new(n + 1, n + 1, true)))
    }

    pub fn volumes(&self) -> usize {
        self.0.rows() - 1
    }
}

/// The ray token attends everywhere; volume `i` attends to the ray token and
/// to volumes `1..=i` (itself and those in front of it).
pub fn build_ray_mask(n: usize) -> AttentionMask {
    AttentionMask(Arc::new(BoolMatrix::from_fn(n + 1, n + 1, |r, c| r == 0 || c <= r)))
}

/// Ray token plus front-to-back volume tokens, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub ray_token: Vec<T>,
    pub volume_tokens: Vec<Vec<T>>,
}

impl<T: Real> TokenSequence<T> {
    fn flatten(&self) -> Vec<T> {
        let mut v = self.ray_token.clone();
        for t in &self.volume_tokens {
            v.extend_from_slice(t);
        }
        v
    }

    fn from_flat(flat: &[T], dim: usize) -> Self {
        let mut rows = flat.chunks_exact(dim).map(<[T]>::to_vec);
        let ray_token = rows.next().unwrap_or_default();
        Self { ray_token, volume_tokens: rows.collect() }
    }

    /// `{R, v1..v_len}`.
    pub fn prefix(&self, len: usize) -> Self {
        Self { ray_token: self.ray_token.clone(), volume_tokens: self.volume_tokens[..len].to_vec() }
    }
}

/// Everything rendered for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayOutput {
    pub rgb_coarse: [f64; 3],
    pub rgb_fine: [f64; 3],
    /// Fine-network linear colour from the ray token.
    pub direct_rgb: [f64; 3],
    /// Fine-network linear colour from the LE branch.
    pub viewdep_rgb: [f64; 3],
    pub attn_coarse: Vec<f64>,
    pub attn_fine: Vec<f64>,
    pub coarse_intervals: Vec<TInterval>,
    pub fine_intervals: Vec<TInterval>,
    /// Distance to the midpoint of the most attended fine frustum.
    pub depth: f64,
    /// Distance under the fine attention distribution.
    pub expected_depth: f64,
}

/// How samples along each ray are chosen.
#[derive(Default)]
pub struct SampleOptions<'a> {
    /// Jitters stratified and resampled positions when present.
    pub rng: Option<&'a mut SampleRng>,
    pub coarse_override: Option<&'a [Vec<TInterval>]>,
    pub fine_override: Option<&'a [Vec<TInterval>]>,
}

/// Graph handles and extracted values of one network level.
pub struct LevelOutput {
    /// sRGB `[B, 3]`.
    pub rgb: Var,
    /// Linear `[B, 3]`.
    pub direct: Var,
    /// Linear `[B, 3]`; a zero constant when the LE branch is disabled.
    pub viewdep: Var,
    /// Output ray token `[B, 1, D]`.
    pub ray_token: Var,
    /// Ray-token attention over volumes per ray (heads averaged, renormalized).
    pub attn: Vec<Vec<f64>>,
    pub intervals: Vec<Vec<TInterval>>,
}

pub struct ForwardPass {
    pub coarse: LevelOutput,
    pub fine: LevelOutput,
}

/// sRGB from direct and view-dependent linear colours.
pub fn tone_map(direct: [f64; 3], viewdep: [f64; 3]) -> Result<[f64; 3], ModelError> {
    let mut out = [0.0; 3];
    for k in 0..3 {
        for v in [direct[k], viewdep[k]] {
            if v < 0.0 {
                return Err(ModelError::NegativeRadiance(v));
            }
        }
        out[k] = crate::diffcore::srgb_encode(direct[k] + viewdep[k]);
    }
    Ok(out)
}

fn tone_map_graph<T: Real>(g: &mut Graph<T>, direct: Var, viewdep: Var) -> Result<Var, DiffError> {
    let s = g.add(direct, viewdep)?;
    g.unary(s, crate::diffcore::Unary::SrgbEncode)
}

/// IPE features `[rays * n, 6 * bands]` for per-ray interval lists.
fn ipe_features<T: Real>(rays: &[Ray], intervals: &[Vec<TInterval>], bands: usize) -> Result<Vec<T>, SamplingError> {
    let mut out = Vec::with_capacity(rays.len() * intervals.first().map_or(0, Vec::len) * 6 * bands);
    for (ray, ivs) in rays.iter().zip(intervals) {
        for &iv in ivs {
            let gauss = frustum_to_gaussian(ray, iv)?;
            out.extend(integrated_pos_enc(&gauss, bands).into_iter().map(T::from_f64_lossy));
        }
    }
    Ok(out)
}

fn triple<T: Real>(v: &[T], i: usize) -> [f64; 3] {
    [v[3 * i].to_f64_lossy(), v[3 * i + 1].to_f64_lossy(), v[3 * i + 2].to_f64_lossy()]
}

/// Ray-token row of `probs` (`[B, H, n+1, n+1]`), averaged over heads,
/// without the ray-token column and renormalized.
fn ray_token_attention<T: Real>(probs: &[T], batch: usize, heads: usize, n: usize) -> Vec<Vec<f64>> {
    let row = n + 1;
    (0..batch)
        .map(|b| {
            let mut acc = vec![0.0; n];
            for h in 0..heads {
                let base = ((b * heads + h) * row) * row;
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += probs[base + 1 + j].to_f64_lossy();
                }
            }
            let total: f64 = acc.iter().sum();
            if total > 0.0 {
                acc.iter_mut().for_each(|a| *a /= total);
            } else {
                acc.iter_mut().for_each(|a| *a = 1.0 / n as f64);
            }
            acc
        })
        .collect()
}

/// Index of the largest weight; the first one on ties.
pub fn argmax(w: &[f64]) -> usize {
    w.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// Parameters plus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AbleModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn init_level<R: rand::Rng>(p: &mut ParamStore<f32>, cfg: &ModelConfig, net: &str, layers: usize, rng: &mut R) {
    let d = cfg.dim;
    let mut fan_in = cfg.ipe_len();
    for i in 0..cfg.embed_layers {
        init_linear(p, &format!("{net}/embed/{i}"), fan_in, cfg.embed_width, rng);
        fan_in = cfg.embed_width;
    }
    init_linear(p, &format!("{net}/embed/out"), fan_in, d, rng);
    for l in 0..layers {
        let b = format!("{net}/ab/{l}");
        init_norm(p, &format!("{b}/ln1"), d);
        init_attention(p, &format!("{b}/attn"), d, rng);
        init_norm(p, &format!("{b}/ln2"), d);
        init_linear(p, &format!("{b}/ff/l1"), d, cfg.ff_ratio * d, rng);
        init_linear(p, &format!("{b}/ff/l2"), cfg.ff_ratio * d, d, rng);
    }
    init_norm(p, &format!("{net}/head/ln"), d);
    init_linear(p, &format!("{net}/head/l1"), d, d, rng);
    init_linear(p, &format!("{net}/head/l2"), d, 3, rng);
    p.insert(format!("{net}/head/l2/b"), Tensor::full([3], DIRECT_BIAS_INIT).with_grad(true));
    if cfg.n_le > 0 {
        init_linear(p, &format!("{net}/le/view"), cfg.view_len(), d, rng);
        for k in 0..cfg.le_blocks {
            let b = format!("{net}/le/{k}");
            init_norm(p, &format!("{b}/cross/ln_q"), d);
            init_norm(p, &format!("{b}/cross/ln_kv"), d);
            init_attention(p, &format!("{b}/cross"), d, rng);
            init_norm(p, &format!("{b}/self/ln"), d);
            init_attention(p, &format!("{b}/self"), d, rng);
        }
        init_norm(p, &format!("{net}/le/decode/ln_q"), d);
        init_norm(p, &format!("{net}/le/decode/ln_kv"), d);
        init_attention(p, &format!("{net}/le/decode"), d, rng);
        init_norm(p, &format!("{net}/le/out/ln"), d);
        init_linear(p, &format!("{net}/le/out/l1"), d, d, rng);
        init_linear(p, &format!("{net}/le/out/l2"), d, 3, rng);
        p.insert(format!("{net}/le/out/l2/b"), Tensor::full([3], VIEWDEP_BIAS_INIT).with_grad(true));
    }
}

impl AbleModel<f32> {
    /// Fresh parameters from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert(RAY_TOKEN_INIT, Tensor::normal([config.dim], TOKEN_INIT_STD, &mut rng));
        if config.n_le > 0 {
            p.insert(LE_BANK, Tensor::normal([config.n_le, config.dim], TOKEN_INIT_STD, &mut rng));
        }
        init_level(&mut p, &config, "coarse", config.coarse_layers, &mut rng);
        init_level(&mut p, &config, "fine", config.fine_layers, &mut rng);
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from a checkpoint written by [`AbleModel::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(ckpt.metadata["model_config"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("model_config: {e}")))?;
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, t) in reference.params.iter() {
            let stored = ckpt.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name.clone(), stored.clone().with_grad(true));
        }
        Ok(Self { config, params })
    }

    /// Parameters in name order with the config and ablation flags in the header.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "model_config": self.config,
            "no_mask": !self.config.use_mask,
            "no_le": self.config.n_le == 0,
        });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
            m.extend(extra);
        }
        let mut ckpt = Checkpoint::new(meta);
        for (name, t) in self.params.iter() {
            let mut t = t.clone();
            t.grad = None;
            ckpt.push(name.clone(), t);
        }
        ckpt
    }
}

impl<T: Real> AbleModel<T> {
    pub fn cast<U: Real>(&self) -> AbleModel<U> {
        AbleModel { config: self.config.clone(), params: self.params.cast() }
    }

    /// Volume embedding MLP: `[.., 6 * pos_bands]` to `[.., D]`.
    pub fn embed_volume(&self, g: &mut Graph<T>, p: &Bound, net: &str, ipe: Var) -> Result<Var, ModelError> {
        let len = *g.shape(ipe).last().unwrap_or(&0);
        if len != self.config.ipe_len() {
            return Err(DiffError::Shape {
                op: "embed_volume",
                detail: format!("feature length {len}, expected {}", self.config.ipe_len()),
            }
            .into());
        }
        let mut h = ipe;
        for i in 0..self.config.embed_layers {
            h = linear(g, p, &format!("{net}/embed/{i}"), h)?;
            h = g.relu(h)?;
        }
        Ok(linear(g, p, &format!("{net}/embed/out"), h)?)
    }

    /// Pre-norm block `layer` of `net`: masked self-attention then feed-forward,
    /// both residual. Returns the output sequence and the attention weights.
    pub fn ab_block(&self, g: &mut Graph<T>, p: &Bound, net: &str, layer: usize, seq: Var, mask: &AttentionMask) -> Result<(Var, Var), ModelError> {
        let n = g.shape(seq)[1];
        if mask.allowed().rows() != n {
            return Err(DiffError::Shape {
                op: "ab_transformer",
                detail: format!("sequence of {n} tokens, mask for {}", mask.allowed().rows()),
            }
            .into());
        }
        let b = format!("{net}/ab/{layer}");
        let h = norm(g, p, &format!("{b}/ln1"), seq)?;
        let (a, probs) = attention(g, p, &format!("{b}/attn"), h, h, mask.shared(), self.config.heads)?;
        let z = g.add(seq, a)?;
        let h = norm(g, p, &format!("{b}/ln2"), z)?;
        let f = mlp2(g, p, &format!("{b}/ff"), h)?;
        Ok((g.add(z, f)?, probs))
    }

    /// `layers` AB blocks over `seq` (`[B, N + 1, D]`, ray token first).
    /// Returns the output sequence and the attention weights of the last block.
    pub fn ab_transformer(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        net: &str,
        seq: Var,
        mask: &AttentionMask,
        layers: usize,
    ) -> Result<(Var, Var), ModelError> {
        if layers == 0 {
            return Err(ModelError::Config("AB transformer needs at least one layer".into()));
        }
        let mut z = seq;
        let mut last = None;
        for l in 0..layers {
            let (out, probs) = self.ab_block(g, p, net, l, z, mask)?;
            z = out;
            last = Some(probs);
        }
        Ok((z, last.expect("at least one layer")))
    }

    /// Runs AB blocks `first..first + count` of `net` on plain token values (single ray).
    pub fn ab_blocks_values(
        &self,
        net: &str,
        first: usize,
        count: usize,
        seq: &TokenSequence<T>,
        mask: &AttentionMask,
    ) -> Result<TokenSequence<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let n = seq.volume_tokens.len() + 1;
        let mut z = g.constant(&[1, n, self.config.dim], seq.flatten())?;
        for l in first..first + count {
            z = self.ab_block(&mut g, &p, net, l, z, mask)?.0;
        }
        Ok(TokenSequence::from_flat(g.value(z), self.config.dim))
    }

    /// Non-negative linear colour from the ray token (`[B, D]` to `[B, 3]`).
    pub fn direct_colour_head(&self, g: &mut Graph<T>, p: &Bound, net: &str, ray_token: Var) -> Result<Var, ModelError> {
        let h = norm(g, p, &format!("{net}/head/ln"), ray_token)?;
        let out = mlp2(g, p, &format!("{net}/head"), h)?;
        Ok(g.softplus(out)?)
    }

    /// Fourier-encoded unit view direction projected to the token width.
    pub fn encode_view_token(&self, g: &mut Graph<T>, p: &Bound, net: &str, dirs: &[nalgebra::Vector3<f64>]) -> Result<Var, ModelError> {
        let mut feats = Vec::with_capacity(dirs.len() * self.config.view_len());
        for d in dirs {
            let n = d.norm();
            let unit = if (n - 1.0).abs() > 1e-4 {
                log::warn!("view direction with norm {n} renormalized");
                d / n
            } else {
                *d
            };
            feats.extend(positional_encoding(&unit, self.config.view_bands).into_iter().map(T::from_f64_lossy));
        }
        let x = g.constant(&[dirs.len(), self.config.view_len()], feats)?;
        Ok(linear(g, p, &format!("{net}/le/view"), x)?)
    }

    /// View-dependent linear colour (`[B, 3]`) decoded from the LE bank after it
    /// cross-attends to `volume_tokens` (`[B, N, D]`). Zeros when `n_le == 0`.
    pub fn le_transformer(&self, g: &mut Graph<T>, p: &Bound, net: &str, volume_tokens: Var, view_token: Option<Var>) -> Result<Var, ModelError> {
        let batch = g.shape(volume_tokens)[0];
        let n_vol = g.shape(volume_tokens)[1];
        let cfg = &self.config;
        let (Some(view), true) = (view_token, cfg.n_le > 0) else {
            return Ok(g.constant(&[batch, 3], vec![T::zero(); batch * 3])?);
        };
        let d = cfg.dim;
        let bank = p.get(LE_BANK)?;
        let mut le = g.expand(bank, batch)?;
        let cross_mask = Arc::new(BoolMatrix::new(cfg.n_le, n_vol, true));
        let self_mask = Arc::new(BoolMatrix::new(cfg.n_le, cfg.n_le, true));
        let decode_mask = Arc::new(BoolMatrix::new(1, cfg.n_le, true));
        for k in 0..cfg.le_blocks {
            let b = format!("{net}/le/{k}");
            let q = norm(g, p, &format!("{b}/cross/ln_q"), le)?;
            let kv = norm(g, p, &format!("{b}/cross/ln_kv"), volume_tokens)?;
            let (a, _) = attention(g, p, &format!("{b}/cross"), q, kv, &cross_mask, cfg.heads)?;
            le = g.add(le, a)?;
            let h = norm(g, p, &format!("{b}/self/ln"), le)?;
            let (a, _) = attention(g, p, &format!("{b}/self"), h, h, &self_mask, cfg.heads)?;
            le = g.add(le, a)?;
        }
        let view = g.reshape(view, &[batch, 1, d])?;
        let q = norm(g, p, &format!("{net}/le/decode/ln_q"), view)?;
        let kv = norm(g, p, &format!("{net}/le/decode/ln_kv"), le)?;
        let (a, _) = attention(g, p, &format!("{net}/le/decode"), q, kv, &decode_mask, cfg.heads)?;
        let t = g.add(view, a)?;
        let t = g.reshape(t, &[batch, d])?;
        let h = norm(g, p, &format!("{net}/le/out/ln"), t)?;
        let out = mlp2(g, p, &format!("{net}/le/out"), h)?;
        Ok(g.softplus(out)?)
    }

    fn level(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        net: &str,
        rays: &[Ray],
        intervals: Vec<Vec<TInterval>>,
        ray_token: Var,
        layers: usize,
    ) -> Result<LevelOutput, ModelError> {
        let cfg = &self.config;
        let (b, d) = (rays.len(), cfg.dim);
        let n = intervals[0].len();
        if intervals.iter().any(|iv| iv.len() != n) {
            return Err(ModelError::Config("rays in a batch must share the sample count".into()));
        }
        let feats = ipe_features::<T>(rays, &intervals, cfg.pos_bands)?;
        let x = g.constant(&[b * n, cfg.ipe_len()], feats)?;
        let vol = self.embed_volume(g, p, net, x)?;
        let vol = g.reshape(vol, &[b, n, d])?;
        let seq = g.concat(&[ray_token, vol], 1)?;
        let mask = if cfg.use_mask { build_ray_mask(n) } else { AttentionMask::unmasked(n) };
        let (z, probs) = self.ab_transformer(g, p, net, seq, &mask, layers)?;
        let out_token = g.slice(z, 1, 0, 1)?;
        let volumes = g.slice(z, 1, 1, n)?;
        let attn = ray_token_attention(g.value(probs), b, cfg.heads, n);
        let flat_token = g.reshape(out_token, &[b, d])?;
        let direct = self.direct_colour_head(g, p, net, flat_token)?;
        let view = if cfg.n_le > 0 {
            let dirs: Vec<_> = rays.iter().map(Ray::view_dir).collect();
            Some(self.encode_view_token(g, p, net, &dirs)?)
        } else {
            None
        };
        let viewdep = self.le_transformer(g, p, net, volumes, view)?;
        let rgb = tone_map_graph(g, direct, viewdep)?;
        Ok(LevelOutput { rgb, direct, viewdep, ray_token: out_token, attn, intervals })
    }

    /// Coarse and fine passes for a batch of rays sharing `[near, far]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        rays: &[Ray],
        near: f64,
        far: f64,
        opts: &mut SampleOptions<'_>,
    ) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        let b = rays.len();
        if b == 0 {
            return Err(ModelError::Config("empty ray batch".into()));
        }
        let coarse_iv = match opts.coarse_override {
            Some(iv) => iv.to_vec(),
            None => (0..b)
                .map(|_| stratified_intervals(near, far, cfg.coarse_samples, opts.rng.as_deref_mut()))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let init = p.get(RAY_TOKEN_INIT)?;
        let init = g.expand(init, b)?;
        let init = g.reshape(init, &[b, 1, cfg.dim])?;
        let coarse = self.level(g, p, "coarse", rays, coarse_iv, init, cfg.coarse_layers)?;

        // resampling treats the attention weights as constants
        let fine_iv = match opts.fine_override {
            Some(iv) => iv.to_vec(),
            None => coarse
                .intervals
                .iter()
                .zip(&coarse.attn)
                .map(|(iv, w)| resample_from_attention(iv, w, cfg.fine_samples, near, far, opts.rng.as_deref_mut()))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let fine = self.level(g, p, "fine", rays, fine_iv, coarse.ray_token, cfg.fine_layers)?;
        Ok(ForwardPass { coarse, fine })
    }

    /// Deterministic inference (no jitter), in chunks of `chunk` rays.
    pub fn render_rays(&self, rays: &[Ray], near: f64, far: f64, chunk: usize) -> Result<Vec<RayOutput>, ModelError> {
        let mut out = Vec::with_capacity(rays.len());
        for batch in rays.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let pass = self.forward(&mut g, &p, batch, near, far, &mut SampleOptions::default())?;
            out.extend(collect_outputs(&g, &pass, batch));
        }
        Ok(out)
    }

    /// Single-ray render with an explicit rng (jitter on when given).
    pub fn render_ray(&self, ray: &Ray, near: f64, far: f64, rng: Option<&mut SampleRng>) -> Result<RayOutput, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut opts = SampleOptions { rng, ..Default::default() };
        let pass = self.forward(&mut g, &p, std::slice::from_ref(ray), near, far, &mut opts)?;
        Ok(collect_outputs(&g, &pass, std::slice::from_ref(ray)).remove(0))
    }
}

/// Per-ray values of a finished forward pass.
pub fn collect_outputs<T: Real>(g: &Graph<T>, pass: &ForwardPass, rays: &[Ray]) -> Vec<RayOutput> {
    let (rc, rf) = (g.value(pass.coarse.rgb), g.value(pass.fine.rgb));
    let (dir, vd) = (g.value(pass.fine.direct), g.value(pass.fine.viewdep));
    rays.iter()
        .enumerate()
        .map(|(i, ray)| {
            let attn_fine = pass.fine.attn[i].clone();
            let fine_iv = pass.fine.intervals[i].clone();
            let scale = ray.direction.norm();
            let depth = fine_iv[argmax(&attn_fine)].mid() * scale;
            let expected_depth = attn_fine.iter().zip(&fine_iv).map(|(w, iv)| w * iv.mid()).sum::<f64>() * scale;
            RayOutput {
                rgb_coarse: triple(rc, i),
                rgb_fine: triple(rf, i),
                direct_rgb: triple(dir, i),
                viewdep_rgb: triple(vd, i),
                attn_coarse: pass.coarse.attn[i].clone(),
                attn_fine,
                coarse_intervals: pass.coarse.intervals[i].clone(),
                fine_intervals: fine_iv,
                depth,
                expected_depth,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
