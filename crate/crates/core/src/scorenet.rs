//! Set-conditioned MLP score approximator with hand-written reverse-mode
//! gradients.
//!
//! The network realizes `f(t, x_t, t_next, conditioning)`:
//!
//! * every conditioning waypoint is encoded as
//!   `(sinusoidal time features, value, future flag)`, pushed through a
//!   shared embedding MLP, and mean-pooled in time-sorted order (so the
//!   output is bit-exact under permutations of the input set);
//! * the trunk consumes `(time features of t, time features of t_next, x_t,
//!   pooled embedding)` and ends in a zero-initialized linear head, so a
//!   freshly initialized network outputs the zero vector.
//!
//! Times are rescaled by 1000 before the sinusoidal embedding. Parameters
//! live in one flat vector; gradients, Adam moments, and the EMA shadow are
//! flat vectors of the same length, which keeps clipping and the optimizer
//! trivially shape-generic.

use crate::rng::{purpose, Stream};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

const TIME_SCALE: f64 = 1000.0;

/// Nonlinearity for the hidden layers. `Identity` exists for convex-toy
/// tests where the exact least-squares gradient is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn deriv(&self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_deriv(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// State dimension d.
    pub dim: usize,
    /// Number of (sin, cos) frequency pairs per time input.
    #[serde(default = "default_time_freqs")]
    pub time_freqs: usize,
    /// Widths of the shared per-waypoint embedding MLP.
    #[serde(default = "default_embed_widths")]
    pub embed_widths: Vec<usize>,
    /// Widths of the trunk MLP.
    #[serde(default = "default_trunk_widths")]
    pub trunk_widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_time_freqs() -> usize {
    8
}
fn default_embed_widths() -> Vec<usize> {
    vec![64, 64]
}
fn default_trunk_widths() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_activation() -> Activation {
    Activation::Gelu
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.time_freqs == 0 || self.embed_widths.is_empty() || self.trunk_widths.is_empty() {
            return Err(Error::Config("net config needs dim, time_freqs, and nonempty widths".into()));
        }
        Ok(())
    }

    fn time_feat_dim(&self) -> usize {
        2 * self.time_freqs
    }

    fn wp_feat_dim(&self) -> usize {
        self.time_feat_dim() + self.dim + 1
    }

    fn trunk_in_dim(&self) -> usize {
        2 * self.time_feat_dim() + self.dim + *self.embed_widths.last().unwrap()
    }
}

/// One linear layer's slice positions inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: Vec<LayerSpec>,
    trunk: Vec<LayerSpec>,
    head: LayerSpec,
    n_params: usize,
}

fn layout(cfg: &NetConfig) -> Layout {
    let mut off = 0;
    let mut push = |n_in: usize, n_out: usize| {
        let spec = LayerSpec { w_off: off, b_off: off + n_in * n_out, n_in, n_out };
        off += n_in * n_out + n_out;
        spec
    };
    let mut embed = Vec::new();
    let mut prev = cfg.wp_feat_dim();
    for &w in &cfg.embed_widths {
        embed.push(push(prev, w));
        prev = w;
    }
    let mut trunk = Vec::new();
    let mut prev = cfg.trunk_in_dim();
    for &w in &cfg.trunk_widths {
        trunk.push(push(prev, w));
        prev = w;
    }
    let head = push(prev, cfg.dim);
    Layout { embed, trunk, head, n_params: off }
}

fn linear(flat: &[f64], spec: &LayerSpec, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for i in 0..spec.n_out {
        let row = &flat[spec.w_off + i * spec.n_in..spec.w_off + (i + 1) * spec.n_in];
        let mut acc = flat[spec.b_off + i];
        for (w, xv) in row.iter().zip(x) {
            acc += w * xv;
        }
        out.push(acc);
    }
}

/// Accumulate dW, db for a linear layer and return dx.
fn linear_backward(
    flat: &[f64],
    grad: &mut [f64],
    spec: &LayerSpec,
    x: &[f64],
    dz: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; spec.n_in];
    for i in 0..spec.n_out {
        let gz = dz[i];
        grad[spec.b_off + i] += gz;
        let row_off = spec.w_off + i * spec.n_in;
        for j in 0..spec.n_in {
            grad[row_off + j] += gz * x[j];
            dx[j] += flat[row_off + j] * gz;
        }
    }
    dx
}

/// One conditioning waypoint as the network sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct CondFeature {
    pub time: f64,
    pub value: Vec<f64>,
    /// Set when the waypoint lies in the future of the current time.
    pub is_future: bool,
}

/// Network parameters. `flat` is the single source of truth; layer views are
/// recomputed from the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetParams {
    cfg: NetConfig,
    flat: Vec<f64>,
}

/// Cached activations from one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    wp_inputs: Vec<Vec<Vec<f64>>>,
    wp_zs: Vec<Vec<Vec<f64>>>,
    n_wp: usize,
    trunk_inputs: Vec<Vec<f64>>,
    trunk_zs: Vec<Vec<f64>>,
    head_input: Vec<f64>,
    pub output: Vec<f64>,
}

fn time_features(cfg: &NetConfig, t: f64, out: &mut Vec<f64>) {
    for k in 0..cfg.time_freqs {
        let freq = TIME_SCALE / 10_000f64.powf(k as f64 / cfg.time_freqs as f64);
        let arg = freq * t;
        out.push(arg.sin());
        out.push(arg.cos());
    }
}

impl ScoreNetParams {
    /// Fresh parameters: Xavier-uniform hidden layers, zero output head.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let lay = layout(&cfg);
        let mut flat = vec![0.0; lay.n_params];
        let mut rng = Stream::derive(seed, purpose::INIT, 0);
        for spec in lay.embed.iter().chain(lay.trunk.iter()) {
            let limit = (6.0 / (spec.n_in + spec.n_out) as f64).sqrt();
            for w in flat[spec.w_off..spec.w_off + spec.n_in * spec.n_out].iter_mut() {
                *w = limit * (2.0 * rng.uniform_half_open() - 1.0);
            }
        }
        // Head stays zero so the initial drift is exactly zero.
        Ok(ScoreNetParams { cfg, flat })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.flat.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn from_flat(cfg: NetConfig, flat: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let lay = layout(&cfg);
        if flat.len() != lay.n_params {
            return Err(Error::Shape(format!("expected {} params, got {}", lay.n_params, flat.len())));
        }
        Ok(ScoreNetParams { cfg, flat })
    }

    pub fn all_finite(&self) -> bool {
        self.flat.iter().all(|x| x.is_finite())
    }

    /// Evaluate the network and cache activations for a later backward pass.
    pub fn forward(
        &self,
        t: f64,
        t_next: f64,
        x_t: &[f64],
        cond: &[CondFeature],
    ) -> Result<ForwardCache> {
        let cfg = &self.cfg;
        if x_t.len() != cfg.dim {
            return Err(Error::Shape(format!("x_t has dim {}, net expects {}", x_t.len(), cfg.dim)));
        }
        if cond.is_empty() {
            return Err(Error::Shape("conditioning set must contain at least (0, x_0)".into()));
        }
        if cond.iter().any(|c| c.value.len() != cfg.dim) {
            return Err(Error::Shape("conditioning value dimension mismatch".into()));
        }
        let lay = layout(cfg);

        // Sort by time so pooling order is canonical.
        let mut order: Vec<usize> = (0..cond.len()).collect();
        order.sort_by(|&a, &b| cond[a].time.partial_cmp(&cond[b].time).unwrap());

        let mut pooled = vec![0.0; *cfg.embed_widths.last().unwrap()];
        let mut wp_inputs = Vec::with_capacity(cond.len());
        let mut wp_zs = Vec::with_capacity(cond.len());
        for &idx in &order {
            let wp = &cond[idx];
            let mut feat = Vec::with_capacity(cfg.wp_feat_dim());
            time_features(cfg, wp.time, &mut feat);
            feat.extend_from_slice(&wp.value);
            feat.push(if wp.is_future { 1.0 } else { 0.0 });

            let mut inputs = Vec::with_capacity(lay.embed.len());
            let mut zs = Vec::with_capacity(lay.embed.len());
            let mut h = feat;
            for spec in &lay.embed {
                let mut z = Vec::new();
                linear(&self.flat, spec, &h, &mut z);
                inputs.push(h);
                h = z.iter().map(|&v| cfg.activation.apply(v)).collect();
                zs.push(z);
            }
            for (p, v) in pooled.iter_mut().zip(&h) {
                *p += v;
            }
            wp_inputs.push(inputs);
            wp_zs.push(zs);
        }
        let inv_k = 1.0 / cond.len() as f64;
        for p in pooled.iter_mut() {
            *p *= inv_k;
        }

        let mut trunk_in = Vec::with_capacity(cfg.trunk_in_dim());
        time_features(cfg, t, &mut trunk_in);
        time_features(cfg, t_next, &mut trunk_in);
        trunk_in.extend_from_slice(x_t);
        trunk_in.extend_from_slice(&pooled);

        let mut trunk_inputs = Vec::with_capacity(lay.trunk.len());
        let mut trunk_zs = Vec::with_capacity(lay.trunk.len());
        let mut h = trunk_in;
        for spec in &lay.trunk {
            let mut z = Vec::new();
            linear(&self.flat, spec, &h, &mut z);
            trunk_inputs.push(h);
            h = z.iter().map(|&v| cfg.activation.apply(v)).collect();
            trunk_zs.push(z);
        }
        let mut output = Vec::new();
        linear(&self.flat, &lay.head, &h, &mut output);
        Ok(ForwardCache {
            wp_inputs,
            wp_zs,
            n_wp: cond.len(),
            trunk_inputs,
            trunk_zs,
            head_input: h,
            output,
        })
    }

    /// Reverse pass: accumulate parameter gradients for one sample into
    /// `grad` given the loss gradient at the network output. Returns nothing;
    /// the caller owns reduction order and norm bookkeeping.
    pub fn backward(&self, cache: &ForwardCache, dl_dout: &[f64], grad: &mut [f64]) -> Result<()> {
        let cfg = &self.cfg;
        if dl_dout.len() != cfg.dim {
            return Err(Error::Shape(format!(
                "loss gradient has dim {}, net expects {}",
                dl_dout.len(),
                cfg.dim
            )));
        }
        if grad.len() != self.flat.len() {
            return Err(Error::Shape("gradient buffer length mismatch".into()));
        }
        let lay = layout(cfg);

        let mut dh = linear_backward(&self.flat, grad, &lay.head, &cache.head_input, dl_dout);
        for (li, spec) in lay.trunk.iter().enumerate().rev() {
            let z = &cache.trunk_zs[li];
            let dz: Vec<f64> = dh
                .iter()
                .zip(z)
                .map(|(&g, &zv)| g * cfg.activation.deriv(zv))
                .collect();
            dh = linear_backward(&self.flat, grad, spec, &cache.trunk_inputs[li], &dz);
        }

        // Split the trunk-input gradient; only the pooled block propagates.
        let e = *cfg.embed_widths.last().unwrap();
        let pooled_grad = &dh[dh.len() - e..];
        let inv_k = 1.0 / cache.n_wp as f64;
        for w in 0..cache.n_wp {
            let mut dwp: Vec<f64> = pooled_grad.iter().map(|&g| g * inv_k).collect();
            for (li, spec) in lay.embed.iter().enumerate().rev() {
                let z = &cache.wp_zs[w][li];
                let dz: Vec<f64> = dwp
                    .iter()
                    .zip(z)
                    .map(|(&g, &zv)| g * cfg.activation.deriv(zv))
                    .collect();
                dwp = linear_backward(&self.flat, grad, spec, &cache.wp_inputs[w][li], &dz);
            }
        }
        Ok(())
    }
}

/// Gradient accumulator plus Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradWorkspace {
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl GradWorkspace {
    pub fn new(n_params: usize) -> Self {
        GradWorkspace {
            grad: vec![0.0; n_params],
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Clipped Adam update plus EMA advance. Returns the pre-clip global norm.
pub fn optimizer_step(
    params: &mut ScoreNetParams,
    ema: &mut [f64],
    ws: &mut GradWorkspace,
    lr: f64,
    clip_norm: f64,
    ema_decay: f64,
) -> Result<f64> {
    let norm = ws.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", ws.step)));
    }
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    ws.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(ws.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(ws.step as i32);
    let flat = params.flat_mut();
    for i in 0..flat.len() {
        let g = ws.grad[i] * scale;
        ws.m[i] = ADAM_BETA1 * ws.m[i] + (1.0 - ADAM_BETA1) * g;
        ws.v[i] = ADAM_BETA2 * ws.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = ws.m[i] / bc1;
        let v_hat = ws.v[i] / bc2;
        flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        ema[i] = ema_decay * ema[i] + (1.0 - ema_decay) * flat[i];
    }
    Ok(norm)
}

/// Versioned checkpoint container. JSON keeps every f64 in shortest
/// round-trip form, so load-after-save is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub net: ScoreNetParams,
    pub ema: Vec<f64>,
    pub opt: GradWorkspace,
    pub rng: Stream,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.ema.len() != ckpt.net.n_params() || ckpt.opt.m.len() != ckpt.net.n_params() {
            return Err(Error::Shape("checkpoint arrays disagree on parameter count".into()));
        }
        Ok(ckpt)
    }

    /// Network with EMA-averaged weights.
    pub fn ema_net(&self) -> Result<ScoreNetParams> {
        ScoreNetParams::from_flat(self.net.cfg().clone(), self.ema.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            dim: 2,
            time_freqs: 3,
            embed_widths: vec![8],
            trunk_widths: vec![8, 8],
            activation: Activation::Gelu,
        }
    }

    fn some_cond() -> Vec<CondFeature> {
        vec![
            CondFeature { time: 0.0, value: vec![0.3, -0.1], is_future: false },
            CondFeature { time: 0.4, value: vec![0.9, 0.2], is_future: false },
            CondFeature { time: 1.0, value: vec![-0.5, 0.7], is_future: true },
        ]
    }

    fn randomize_head(p: &mut ScoreNetParams, seed: u64) {
        let mut rng = Stream::derive(seed, purpose::INIT, 9);
        let n = p.n_params();
        // Head is the tail of the flat vector by construction.
        let lay_head = layout(p.cfg()).head;
        let start = lay_head.w_off;
        for w in p.flat_mut()[start..n].iter_mut() {
            *w = 0.3 * rng.normal();
        }
    }

    #[test]
    fn zero_initialized_head_outputs_zero() {
        let p = ScoreNetParams::init(tiny_cfg(), 1).unwrap();
        let c = p.forward(0.37, 0.5, &[1.0, -2.0], &some_cond()).unwrap();
        assert_eq!(c.output, vec![0.0, 0.0]);
    }

    #[test]
    fn output_is_permutation_invariant_bit_exact() {
        let mut p = ScoreNetParams::init(tiny_cfg(), 2).unwrap();
        randomize_head(&mut p, 3);
        let cond = some_cond();
        let mut rev = cond.clone();
        rev.reverse();
        let a = p.forward(0.2, 0.4, &[0.1, 0.2], &cond).unwrap().output;
        let b = p.forward(0.2, 0.4, &[0.1, 0.2], &rev).unwrap().output;
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn duplicated_waypoint_shifts_the_pool_mean() {
        // Mean pooling over K+1 entries with one duplicate equals
        // (K * pooled_K + e_dup) / (K + 1); outputs may legitimately differ.
        let mut p = ScoreNetParams::init(tiny_cfg(), 4).unwrap();
        randomize_head(&mut p, 5);
        let cond = some_cond();
        let mut dup = cond.clone();
        dup.push(cond[1].clone());
        let a = p.forward(0.2, 0.4, &[0.1, 0.2], &cond).unwrap().output;
        let b = p.forward(0.2, 0.4, &[0.1, 0.2], &dup).unwrap().output;
        assert_ne!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let p = ScoreNetParams::init(tiny_cfg(), 1).unwrap();
        assert!(matches!(
            p.forward(0.1, 0.2, &[1.0], &some_cond()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(p.forward(0.1, 0.2, &[1.0, 2.0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut p = ScoreNetParams::init(tiny_cfg(), 6).unwrap();
        randomize_head(&mut p, 7);
        let cache = p.forward(0.3, 0.6, &[0.4, -0.4], &some_cond()).unwrap();
        let mut grad = vec![0.0; p.n_params()];
        p.backward(&cache, &[0.0, 0.0], &mut grad).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    fn sample_loss(p: &ScoreNetParams, target: &[f64]) -> f64 {
        let cache = p.forward(0.3, 0.6, &[0.4, -0.4], &some_cond()).unwrap();
        cache
            .output
            .iter()
            .zip(target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum()
    }

    #[test]
    fn backprop_matches_central_finite_differences() {
        let mut p = ScoreNetParams::init(tiny_cfg(), 8).unwrap();
        randomize_head(&mut p, 9);
        let target = vec![0.7, -0.3];
        let cache = p.forward(0.3, 0.6, &[0.4, -0.4], &some_cond()).unwrap();
        let mut grad = vec![0.0; p.n_params()];
        let dl: Vec<f64> = cache.output.iter().zip(&target).map(|(o, t)| 2.0 * (o - t)).collect();
        p.backward(&cache, &dl, &mut grad).unwrap();

        let mut rng = Stream::derive(10, purpose::ANALYSIS, 0);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let idx = rng.below(p.n_params());
            let orig = p.flat()[idx];
            p.flat_mut()[idx] = orig + h;
            let lp = sample_loss(&p, &target);
            p.flat_mut()[idx] = orig - h;
            let lm = sample_loss(&p, &target);
            p.flat_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            if fd.abs() < 1e-5 {
                continue;
            }
            let rel = (grad[idx] - fd).abs() / fd.abs();
            assert!(rel < 1e-5, "param {idx}: bp {} fd {fd} rel {rel}", grad[idx]);
            checked += 1;
        }
    }

    #[test]
    fn linear_net_quadratic_loss_matches_least_squares_gradient() {
        // Identity activations, single trunk layer, single conditioning
        // waypoint: output = H (W u + b) with zero-initialized head H. Seed
        // head with ones and zero the rest; then for loss ||out - y||^2 the
        // head bias gradient is exactly 2 (out - y).
        let cfg = NetConfig {
            dim: 1,
            time_freqs: 1,
            embed_widths: vec![2],
            trunk_widths: vec![2],
            activation: Activation::Identity,
        };
        let mut p = ScoreNetParams::init(cfg, 11).unwrap();
        let lay = layout(p.cfg());
        for w in p.flat_mut()[lay.head.w_off..].iter_mut() {
            *w = 1.0;
        }
        let cond = vec![CondFeature { time: 0.0, value: vec![0.5], is_future: false }];
        let cache = p.forward(0.3, 0.9, &[0.2], &cond).unwrap();
        let y = 0.4;
        let residual = cache.output[0] - y;
        let mut grad = vec![0.0; p.n_params()];
        p.backward(&cache, &[2.0 * residual], &mut grad).unwrap();
        let db = grad[lay.head.b_off];
        assert!((db - 2.0 * residual).abs() < 1e-14);
        // Head weight gradient is 2 residual * input activation.
        for j in 0..lay.head.n_in {
            let expect = 2.0 * residual * cache.head_input[j];
            assert!((grad[lay.head.w_off + j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn first_adam_step_is_minus_lr() {
        let cfg = NetConfig {
            dim: 1,
            time_freqs: 1,
            embed_widths: vec![1],
            trunk_widths: vec![1],
            activation: Activation::Identity,
        };
        let mut p = ScoreNetParams::init(cfg, 0).unwrap();
        let n = p.n_params();
        for w in p.flat_mut().iter_mut() {
            *w = 0.0;
        }
        let mut ema = vec![0.0; n];
        let mut ws = GradWorkspace::new(n);
        ws.grad[0] = 1.0;
        let norm = optimizer_step(&mut p, &mut ema, &mut ws, 0.1, 1e9, 0.999).unwrap();
        assert!((norm - 1.0).abs() < 1e-15);
        assert!((p.flat()[0] + 0.1).abs() < 1e-9, "step {}", p.flat()[0]);
        assert_eq!(p.flat()[1], 0.0);
    }

    #[test]
    fn clipping_rescales_before_moments() {
        let cfg = NetConfig {
            dim: 1,
            time_freqs: 1,
            embed_widths: vec![1],
            trunk_widths: vec![1],
            activation: Activation::Identity,
        };
        let mut p = ScoreNetParams::init(cfg, 0).unwrap();
        let n = p.n_params();
        let mut ema = vec![0.0; n];
        let mut ws = GradWorkspace::new(n);
        ws.grad[0] = 6.0;
        ws.grad[1] = 8.0; // norm 10
        let norm = optimizer_step(&mut p, &mut ema, &mut ws, 0.1, 5.0, 0.999).unwrap();
        assert!((norm - 10.0).abs() < 1e-12);
        // Moments saw the clipped gradient (scaled by 0.5).
        assert!((ws.m[0] - 0.1 * 3.0).abs() < 1e-15);
        assert!((ws.v[1] - 0.001 * 16.0).abs() < 1e-15);
    }

    #[test]
    fn ema_is_convex_combination() {
        let cfg = tiny_cfg();
        let mut p = ScoreNetParams::init(cfg, 13).unwrap();
        let n = p.n_params();
        let old = p.flat().to_vec();
        let mut ema = old.clone();
        let mut ws = GradWorkspace::new(n);
        for g in ws.grad.iter_mut() {
            *g = 0.01;
        }
        optimizer_step(&mut p, &mut ema, &mut ws, 0.001, 1e9, 0.999).unwrap();
        for i in 0..n {
            let expect = 0.999 * old[i] + 0.001 * p.flat()[i];
            assert!((ema[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = tiny_cfg();
        let mut p = ScoreNetParams::init(cfg, 14).unwrap();
        let n = p.n_params();
        let mut ema = vec![0.0; n];
        let mut ws = GradWorkspace::new(n);
        ws.grad[3] = f64::NAN;
        assert!(matches!(
            optimizer_step(&mut p, &mut ema, &mut ws, 0.1, 5.0, 0.999),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_cfg();
        let mut p = ScoreNetParams::init(cfg, 15).unwrap();
        randomize_head(&mut p, 16);
        let n = p.n_params();
        let mut ws = GradWorkspace::new(n);
        let mut ema = p.flat().to_vec();
        for (i, g) in ws.grad.iter_mut().enumerate() {
            *g = (i as f64 * 0.137).sin();
        }
        optimizer_step(&mut p, &mut ema, &mut ws, 1e-3, 5.0, 0.999).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            step: 1,
            net: p,
            ema,
            opt: ws,
            rng: Stream::derive(15, purpose::TRAIN, 0),
        };
        let dir = std::env::temp_dir().join("sdebridge_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        let bits_a: Vec<u64> = ckpt.net.flat().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u64> = loaded.net.flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
