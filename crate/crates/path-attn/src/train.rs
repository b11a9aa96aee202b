//! Tiny CPU training harness: a transformer with multiplicative-position
//! attention heads (plus rotary / gate / no-position ablation modes),
//! hand-written reverse mode end to end, Adam with global-norm clipping,
//! CSV metrics, and a flat binary checkpoint format.
//!
//! Per-head position pipeline (mode `path`/`path-fox`): low-rank
//! projection (two factors, rank r) → width-3 depthwise causal
//! convolution → L2 normalization with a zero fallback; β = 2σ(uᵀx+b)
//! keeps β ∈ (0,2); forget gates f = σ(u_fᵀx+b_f) ∈ (0,1).

use std::io::{Read as IoRead, Write as IoWrite};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{reference_backward, reference_forward, AttentionBatch};
use crate::error::{PathError, Result};
use crate::householder::HouseholderSeq;
use crate::tasks::TaskExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Path,
    PathFox,
    Rope,
    Nope,
    Fox,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "path" => Mode::Path,
            "path-fox" => Mode::PathFox,
            "rope" => Mode::Rope,
            "nope" => Mode::Nope,
            "fox" => Mode::Fox,
            other => {
                return Err(PathError::InvalidParameter(format!(
                    "unknown mode '{other}' (expected path, path-fox, rope, nope, fox)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Path => "path",
            Mode::PathFox => "path-fox",
            Mode::Rope => "rope",
            Mode::Nope => "nope",
            Mode::Fox => "fox",
        }
    }

    fn uses_path(&self) -> bool {
        matches!(self, Mode::Path | Mode::PathFox)
    }

    fn uses_gates(&self) -> bool {
        matches!(self, Mode::PathFox | Mode::Fox)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub rank: usize,
    pub vocab: usize,
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Task tag; "fflm" switches the loss to full next-token
    /// cross-entropy, everything else supervises target positions only.
    pub task: String,
}

impl TrainConfig {
    pub fn new(vocab: usize, task: &str) -> Self {
        Self {
            layers: 1,
            heads: 2,
            dim: 64,
            rank: 16,
            vocab,
            mode: Mode::Path,
            steps: 400,
            batch_size: 16,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            task: task.to_string(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(PathError::InvalidParameter(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.rank == 0 || self.vocab == 0 || self.layers == 0 {
            return Err(PathError::InvalidParameter(
                "rank, vocab, and layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-head parameters; position-pipeline tensors exist in every mode
/// (unused ones simply receive zero gradient).
#[derive(Debug, Clone)]
pub struct PathLayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// rank×dim and head_dim×rank factors of the w-projection.
    pub w_lr1: Array2<f64>,
    pub w_lr2: Array2<f64>,
    /// head_dim×3 depthwise causal filter, taps at offsets 0, −1, −2.
    pub conv: Array2<f64>,
    pub beta_u: Array1<f64>,
    pub beta_b: Array1<f64>,
    pub gate_u: Array1<f64>,
    pub gate_b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub heads: Vec<PathLayerParams>,
    /// dim×dim output projection over the concatenated heads.
    pub wo: Array2<f64>,
    pub ffn1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: TrainConfig,
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lm_head: Array2<f64>,
    pub lm_bias: Array1<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

fn uniform1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-scale..scale))
}

impl Model {
    pub fn init(cfg: TrainConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
        let d = cfg.dim;
        let hd = cfg.head_dim();
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|_| {
                let heads = (0..cfg.heads)
                    .map(|_| {
                        // conv starts near the identity tap so emitted w
                        // directions are generically nonzero
                        let mut conv = uniform(&mut rng, hd, 3, 0.1);
                        for c in 0..hd {
                            conv[[c, 0]] += 1.0;
                        }
                        PathLayerParams {
                            wq: uniform(&mut rng, hd, d, sd),
                            wk: uniform(&mut rng, hd, d, sd),
                            wv: uniform(&mut rng, hd, d, sd),
                            w_lr1: uniform(&mut rng, cfg.rank, d, sd),
                            w_lr2: uniform(&mut rng, hd, cfg.rank, 1.0 / (cfg.rank as f64).sqrt()),
                            conv,
                            beta_u: uniform1(&mut rng, d, sd),
                            beta_b: uniform1(&mut rng, 1, 0.1),
                            gate_u: uniform1(&mut rng, d, sd),
                            // bias toward open gates so early training sees history
                            gate_b: uniform1(&mut rng, 1, 0.1) + 2.0,
                        }
                    })
                    .collect();
                LayerParams {
                    heads,
                    wo: uniform(&mut rng, d, d, sd),
                    ffn1: uniform(&mut rng, 4 * d, d, sd),
                    ffn_b1: Array1::zeros(4 * d),
                    ffn2: uniform(&mut rng, d, 4 * d, 1.0 / (4.0 * d as f64).sqrt()),
                    ffn_b2: Array1::zeros(d),
                }
            })
            .collect();
        Ok(Model {
            embedding: uniform(&mut rng, cfg.vocab, d, 0.5),
            layers,
            lm_head: uniform(&mut rng, cfg.vocab, d, sd),
            lm_bias: Array1::zeros(cfg.vocab),
            cfg,
        })
    }

    pub fn zeros_like(&self) -> Model {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, data| data.fill(0.0));
        out
    }

    /// Enumerate every trainable tensor as (name, shape, flat data).
    /// Order is fixed; Adam state, checkpoints, and finite-difference
    /// checks all rely on it.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push2 = |out: &mut Vec<_>, name: String, a: &Array2<f64>| {
            out.push((name, vec![a.nrows(), a.ncols()], a.iter().cloned().collect()));
        };
        let push1 = |out: &mut Vec<_>, name: String, a: &Array1<f64>| {
            out.push((name, vec![a.len()], a.to_vec()));
        };
        push2(&mut out, "embedding".into(), &self.embedding);
        for (li, layer) in self.layers.iter().enumerate() {
            for (hi, h) in layer.heads.iter().enumerate() {
                let p = format!("layer{li}.head{hi}.");
                push2(&mut out, format!("{p}wq"), &h.wq);
                push2(&mut out, format!("{p}wk"), &h.wk);
                push2(&mut out, format!("{p}wv"), &h.wv);
                push2(&mut out, format!("{p}w_lr1"), &h.w_lr1);
                push2(&mut out, format!("{p}w_lr2"), &h.w_lr2);
                push2(&mut out, format!("{p}conv"), &h.conv);
                push1(&mut out, format!("{p}beta_u"), &h.beta_u);
                push1(&mut out, format!("{p}beta_b"), &h.beta_b);
                push1(&mut out, format!("{p}gate_u"), &h.gate_u);
                push1(&mut out, format!("{p}gate_b"), &h.gate_b);
            }
            let p = format!("layer{li}.");
            push2(&mut out, format!("{p}wo"), &layer.wo);
            push2(&mut out, format!("{p}ffn1"), &layer.ffn1);
            push1(&mut out, format!("{p}ffn_b1"), &layer.ffn_b1);
            push2(&mut out, format!("{p}ffn2"), &layer.ffn2);
            push1(&mut out, format!("{p}ffn_b2"), &layer.ffn_b2);
        }
        push2(&mut out, "lm_head".into(), &self.lm_head);
        push1(&mut out, "lm_bias".into(), &self.lm_bias);
        out
    }

    /// Visit every tensor's flat storage mutably, in `tensors()` order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        f("embedding", self.embedding.as_slice_mut().unwrap());
        for li in 0..self.layers.len() {
            for hi in 0..self.layers[li].heads.len() {
                let name = format!("layer{li}.head{hi}");
                let h = &mut self.layers[li].heads[hi];
                f(&name, h.wq.as_slice_mut().unwrap());
                f(&name, h.wk.as_slice_mut().unwrap());
                f(&name, h.wv.as_slice_mut().unwrap());
                f(&name, h.w_lr1.as_slice_mut().unwrap());
                f(&name, h.w_lr2.as_slice_mut().unwrap());
                f(&name, h.conv.as_slice_mut().unwrap());
                f(&name, h.beta_u.as_slice_mut().unwrap());
                f(&name, h.beta_b.as_slice_mut().unwrap());
                f(&name, h.gate_u.as_slice_mut().unwrap());
                f(&name, h.gate_b.as_slice_mut().unwrap());
            }
            let layer = &mut self.layers[li];
            let name = format!("layer{li}");
            f(&name, layer.wo.as_slice_mut().unwrap());
            f(&name, layer.ffn1.as_slice_mut().unwrap());
            f(&name, layer.ffn_b1.as_slice_mut().unwrap());
            f(&name, layer.ffn2.as_slice_mut().unwrap());
            f(&name, layer.ffn_b2.as_slice_mut().unwrap());
        }
        f("lm_head", self.lm_head.as_slice_mut().unwrap());
        f("lm_bias", self.lm_bias.as_slice_mut().unwrap());
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        let mut clone = self.clone();
        clone.for_each_tensor_mut(|_, _| n += 1);
        n
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

const W_NORM_EPS: f64 = 1e-8;

/// Rotate pairs of channels by position-dependent angles (base 10000).
fn rope_rotate(x: &Array2<f64>, sign: f64) -> Array2<f64> {
    let (l, hd) = (x.nrows(), x.ncols());
    let mut out = x.clone();
    for t in 0..l {
        for i in 0..hd / 2 {
            let theta = (t as f64) * 10000f64.powf(-2.0 * i as f64 / hd as f64);
            let (sin, cos) = (sign * theta).sin_cos();
            let a = x[[t, 2 * i]];
            let b = x[[t, 2 * i + 1]];
            out[[t, 2 * i]] = a * cos - b * sin;
            out[[t, 2 * i + 1]] = a * sin + b * cos;
        }
    }
    out
}

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lr: Array2<f64>,
    pre: Array2<f64>,
    norms: Array1<f64>,
    w: Array2<f64>,
    beta: Array1<f64>,
    f: Option<Array1<f64>>,
    out: Array2<f64>,
}

struct LayerCache {
    x_in: Array2<f64>,
    heads: Vec<HeadCache>,
    concat: Array2<f64>,
    x_mid: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    logits: Array2<f64>,
}

fn head_forward(model: &Model, hp: &PathLayerParams, x: &Array2<f64>) -> Result<HeadCache> {
    let cfg = &model.cfg;
    let l = x.nrows();
    let hd = cfg.head_dim();
    let mut q = x.dot(&hp.wq.t());
    let mut k = x.dot(&hp.wk.t());
    let v = x.dot(&hp.wv.t());
    if cfg.mode == Mode::Rope {
        q = rope_rotate(&q, 1.0);
        k = rope_rotate(&k, 1.0);
    }

    let (lr, pre, norms, w, beta);
    if cfg.mode.uses_path() {
        lr = x.dot(&hp.w_lr1.t());
        pre = lr.dot(&hp.w_lr2.t());
        let mut conv_out = Array2::zeros((l, hd));
        for t in 0..l {
            for c in 0..hd {
                let mut acc = 0.0;
                for tap in 0..3 {
                    if t >= tap {
                        acc += hp.conv[[c, tap]] * pre[[t - tap, c]];
                    }
                }
                conv_out[[t, c]] = acc;
            }
        }
        let mut n = Array1::zeros(l);
        let mut wn = Array2::zeros((l, hd));
        for t in 0..l {
            let row = conv_out.row(t);
            let norm = row.dot(&row).sqrt();
            n[t] = norm;
            if norm > W_NORM_EPS {
                for c in 0..hd {
                    wn[[t, c]] = conv_out[[t, c]] / norm;
                }
            }
        }
        norms = n;
        w = wn;
        let z = x.dot(&hp.beta_u) + hp.beta_b[0];
        // clamp away from the closed endpoints so saturated sigmoids
        // (which round to exactly 0 or 1 in f64) stay inside (0, 2)
        beta = z.mapv(|zz| (2.0 * sigmoid(zz)).clamp(1e-9, 2.0 - 1e-9));
    } else {
        lr = Array2::zeros((l, 0));
        pre = Array2::zeros((l, hd));
        norms = Array1::zeros(l);
        w = Array2::zeros((l, hd));
        beta = Array1::ones(l);
    }
    let f = if cfg.mode.uses_gates() {
        let z = x.dot(&hp.gate_u) + hp.gate_b[0];
        Some(z.mapv(|zz| sigmoid(zz).clamp(1e-12, 1.0 - 1e-12)))
    } else {
        None
    };

    let seq = HouseholderSeq::new(w.clone(), beta.clone())?;
    let scale = 1.0 / (hd as f64).sqrt();
    let batch = AttentionBatch::new(q.clone(), k.clone(), v.clone(), seq, f.clone(), scale)?;
    let out = reference_forward(&batch)?;
    Ok(HeadCache {
        q,
        k,
        v,
        lr,
        pre,
        norms,
        w,
        beta,
        f,
        out,
    })
}

fn forward_cached(model: &Model, tokens: &[usize]) -> Result<ForwardCache> {
    let cfg = &model.cfg;
    let l = tokens.len();
    if l == 0 {
        return Err(PathError::MalformedSequence("empty token sequence".into()));
    }
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(PathError::IndexOutOfRange(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
    }
    let d = cfg.dim;
    let hd = cfg.head_dim();
    let mut x = Array2::zeros((l, d));
    for (pos, &tok) in tokens.iter().enumerate() {
        x.row_mut(pos).assign(&model.embedding.row(tok));
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in &model.layers {
        let x_in = x.clone();
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut concat = Array2::zeros((l, d));
        for (hi, hp) in layer.heads.iter().enumerate() {
            let hc = head_forward(model, hp, &x_in)?;
            concat
                .slice_mut(s![.., hi * hd..(hi + 1) * hd])
                .assign(&hc.out);
            heads.push(hc);
        }
        let x_mid = &x_in + &concat.dot(&layer.wo.t());
        let ffn_pre = x_mid.dot(&layer.ffn1.t()) + &layer.ffn_b1;
        let ffn_act = ffn_pre.mapv(gelu);
        x = &x_mid + &(ffn_act.dot(&layer.ffn2.t()) + &layer.ffn_b2);
        layers.push(LayerCache {
            x_in,
            heads,
            concat,
            x_mid,
            ffn_pre,
            ffn_act,
        });
    }
    let logits = x.dot(&model.lm_head.t()) + &model.lm_bias;
    Ok(ForwardCache {
        layers,
        x_final: x,
        logits,
    })
}

/// Per-position vocabulary logits.
pub fn model_forward(model: &Model, tokens: &[usize]) -> Result<Array2<f64>> {
    Ok(forward_cached(model, tokens)?.logits)
}

/// Supervision pairs (position, target) for one example under the
/// configured loss: next-token everywhere for the LM task, target
/// positions only otherwise.
fn supervision(cfg: &TrainConfig, ex: &TaskExample) -> Vec<(usize, usize)> {
    if cfg.task == "fflm" {
        (0..ex.tokens.len().saturating_sub(1))
            .map(|p| (p, ex.tokens[p + 1]))
            .collect()
    } else {
        ex.targets
            .iter()
            .enumerate()
            .filter_map(|(p, t)| t.map(|tt| (p, tt)))
            .collect()
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

fn backward_head(
    model: &Model,
    hp: &PathLayerParams,
    hc: &HeadCache,
    x_in: &Array2<f64>,
    d_out: &Array2<f64>,
    gp: &mut PathLayerParams,
    dx: &mut Array2<f64>,
) -> Result<()> {
    let cfg = &model.cfg;
    let l = x_in.nrows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let seq = HouseholderSeq::new(hc.w.clone(), hc.beta.clone())?;
    let batch = AttentionBatch::new(
        hc.q.clone(),
        hc.k.clone(),
        hc.v.clone(),
        seq,
        hc.f.clone(),
        scale,
    )?;
    let grads = reference_backward(&batch, d_out)?;

    let (dq, dk) = if cfg.mode == Mode::Rope {
        // rotation is orthogonal per position: pull back with R(t)ᵀ
        (rope_rotate(&grads.q, -1.0), rope_rotate(&grads.k, -1.0))
    } else {
        (grads.q.clone(), grads.k.clone())
    };
    gp.wq += &dq.t().dot(x_in);
    gp.wk += &dk.t().dot(x_in);
    gp.wv += &grads.v.t().dot(x_in);
    *dx += &dq.dot(&hp.wq);
    *dx += &dk.dot(&hp.wk);
    *dx += &grads.v.dot(&hp.wv);

    if cfg.mode.uses_path() {
        // L2 normalization backward: w = y/‖y‖, dy = (dw − (dw·w)w)/‖y‖
        let mut d_conv_out = Array2::zeros((l, hd));
        for t in 0..l {
            let norm = hc.norms[t];
            if norm > W_NORM_EPS {
                let dw_row = grads.w.row(t);
                let w_row = hc.w.row(t);
                let dot = dw_row.dot(&w_row);
                for c in 0..hd {
                    d_conv_out[[t, c]] = (dw_row[c] - dot * w_row[c]) / norm;
                }
            }
            // zero-fallback rows pass no gradient
        }
        // depthwise causal conv backward
        let mut d_pre = Array2::zeros((l, hd));
        for t in 0..l {
            for c in 0..hd {
                let g = d_conv_out[[t, c]];
                if g == 0.0 {
                    continue;
                }
                for tap in 0..3 {
                    if t >= tap {
                        d_pre[[t - tap, c]] += hp.conv[[c, tap]] * g;
                        gp.conv[[c, tap]] += g * hc.pre[[t - tap, c]];
                    }
                }
            }
        }
        // low-rank projection backward
        let d_lr = d_pre.dot(&hp.w_lr2);
        gp.w_lr2 += &d_pre.t().dot(&hc.lr);
        gp.w_lr1 += &d_lr.t().dot(x_in);
        *dx += &d_lr.dot(&hp.w_lr1);
        // β = 2σ(z): dz = dβ·2σ(1−σ), with 2σ = β
        for t in 0..l {
            let sig = hc.beta[t] / 2.0;
            let dz = grads.beta[t] * 2.0 * sig * (1.0 - sig);
            gp.beta_b[0] += dz;
            for c in 0..cfg.dim {
                gp.beta_u[c] += dz * x_in[[t, c]];
                dx[[t, c]] += dz * hp.beta_u[c];
            }
        }
    }
    if let (Some(df), Some(f)) = (&grads.f, &hc.f) {
        for t in 0..l {
            let dz = df[t] * f[t] * (1.0 - f[t]);
            gp.gate_b[0] += dz;
            for c in 0..cfg.dim {
                gp.gate_u[c] += dz * x_in[[t, c]];
                dx[[t, c]] += dz * hp.gate_u[c];
            }
        }
    }
    Ok(())
}

/// Mean cross-entropy over the example's supervised positions plus
/// gradients for every tensor; also returns (correct, supervised counts)
/// of argmax accuracy at the task's target positions.
pub fn loss_and_grads(
    model: &Model,
    ex: &TaskExample,
    grads: &mut Model,
) -> Result<(f64, usize, usize)> {
    let cfg = &model.cfg;
    let cache = forward_cached(model, &ex.tokens)?;
    let pairs = supervision(cfg, ex);
    if pairs.is_empty() {
        return Ok((0.0, 0, 0));
    }
    let probs = softmax_rows(&cache.logits);
    let mut loss = 0.0;
    let inv = 1.0 / pairs.len() as f64;
    let l = ex.tokens.len();
    let mut d_logits = Array2::zeros((l, cfg.vocab));
    for &(p, t) in &pairs {
        if t >= cfg.vocab {
            return Err(PathError::IndexOutOfRange(format!(
                "target {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        loss -= probs[[p, t]].max(1e-300).ln() * inv;
        for c in 0..cfg.vocab {
            d_logits[[p, c]] += (probs[[p, c]] - f64::from(c == t)) * inv;
        }
    }

    // accuracy always reads the dataset's target positions
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, t) in ex.targets.iter().enumerate().filter_map(|(p, t)| t.map(|tt| (p, tt))) {
        total += 1;
        let row = cache.logits.row(p);
        let argmax = (0..cfg.vocab)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        if argmax == t {
            correct += 1;
        }
    }

    // LM head backward
    grads.lm_head += &d_logits.t().dot(&cache.x_final);
    grads.lm_bias += &d_logits.sum_axis(ndarray::Axis(0));
    let mut dx = d_logits.dot(&model.lm_head);

    let hd = cfg.head_dim();
    for li in (0..cfg.layers).rev() {
        let lc = &cache.layers[li];
        let layer = &model.layers[li];
        let gl = &mut grads.layers[li];

        // FFN backward (residual: dx flows through both branches)
        let d_act = dx.dot(&layer.ffn2);
        gl.ffn2 += &dx.t().dot(&lc.ffn_act);
        gl.ffn_b2 += &dx.sum_axis(ndarray::Axis(0));
        let d_pre = &d_act * &lc.ffn_pre.mapv(gelu_grad);
        gl.ffn1 += &d_pre.t().dot(&lc.x_mid);
        gl.ffn_b1 += &d_pre.sum_axis(ndarray::Axis(0));
        let mut d_xmid = dx; // residual branch
        d_xmid += &d_pre.dot(&layer.ffn1);

        // attention block backward
        let d_concat = d_xmid.dot(&layer.wo);
        gl.wo += &d_xmid.t().dot(&lc.concat);
        let mut d_xin = d_xmid; // residual branch
        for hi in 0..cfg.heads {
            let d_head = d_concat.slice(s![.., hi * hd..(hi + 1) * hd]).to_owned();
            backward_head(
                model,
                &layer.heads[hi],
                &lc.heads[hi],
                &lc.x_in,
                &d_head,
                &mut gl.heads[hi],
                &mut d_xin,
            )?;
        }
        dx = d_xin;
    }
    for (pos, &tok) in ex.tokens.iter().enumerate() {
        let mut row = grads.embedding.row_mut(tok);
        row += &dx.row(pos);
    }
    Ok((loss, correct, total))
}

/// Adam with bias correction and global-norm gradient clipping.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        let sizes: Vec<usize> = model.tensors().iter().map(|(_, _, d)| d.len()).collect();
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &mut Model) {
        let cfg = model.cfg.clone();
        // global-norm clip
        let mut sq = 0.0;
        grads.for_each_tensor_mut(|_, g| {
            for x in g.iter() {
                sq += x * x;
            }
        });
        let norm = sq.sqrt();
        if norm > cfg.grad_clip && norm > 0.0 {
            let sc = cfg.grad_clip / norm;
            grads.for_each_tensor_mut(|_, g| {
                for x in g.iter_mut() {
                    *x *= sc;
                }
            });
        }
        self.t += 1;
        let b1t = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        let grad_tensors = grads.tensors();
        let mut idx = 0;
        model.for_each_tensor_mut(|_, p| {
            let g = &grad_tensors[idx].2;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.len() {
                m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
                v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Render the metrics log with the fixed `step,loss,accuracy` header.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.loss, r.accuracy));
    }
    out
}

/// Train on a dataset: deterministic batch sampling from the config
/// seed, one Adam step per batch, one metrics row per step.
pub fn train(cfg: TrainConfig, dataset: &[TaskExample]) -> Result<(Model, Vec<MetricsRow>)> {
    if dataset.is_empty() {
        return Err(PathError::InvalidParameter("empty dataset".into()));
    }
    let mut model = Model::init(cfg.clone())?;
    let mut opt = Adam::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        let (mut correct, mut total) = (0usize, 0usize);
        for _ in 0..cfg.batch_size {
            let ex = &dataset[rng.gen_range(0..dataset.len())];
            let (l, c, t) = loss_and_grads(&model, ex, &mut grads)?;
            loss += l;
            correct += c;
            total += t;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.for_each_tensor_mut(|_, g| {
            for x in g.iter_mut() {
                *x *= inv;
            }
        });
        opt.step(&mut model, &mut grads);
        log.push(MetricsRow {
            step,
            loss: loss * inv,
            accuracy: if total > 0 {
                correct as f64 / total as f64
            } else {
                f64::NAN
            },
        });
    }
    Ok((model, log))
}

/// Argmax accuracy at the dataset's supervised positions. Returns
/// `None` when no position is supervised.
pub fn evaluate(model: &Model, dataset: &[TaskExample]) -> Result<Option<f64>> {
    let (mut correct, mut total) = (0usize, 0usize);
    for ex in dataset {
        let logits = model_forward(model, &ex.tokens)?;
        for (p, t) in ex.targets.iter().enumerate().filter_map(|(p, t)| t.map(|tt| (p, tt))) {
            total += 1;
            let row = logits.row(p);
            let argmax = (0..model.cfg.vocab)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            if argmax == t {
                correct += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

const CKPT_MAGIC: &[u8; 8] = b"PATHCKPT";
const CKPT_VERSION: u32 = 1;

/// Flat binary checkpoint: magic, version, tensor count, then per
/// tensor a name, shape, and row-major f64 little-endian data.
pub fn save_checkpoint<W: IoWrite>(out: &mut W, model: &Model) -> Result<()> {
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    let tensors = model.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &dim in shape {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &x in data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load checkpoint data into a model of the same architecture.
pub fn load_checkpoint<R: IoRead>(input: &mut R, model: &mut Model) -> Result<()> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(PathError::InvalidParameter("bad checkpoint magic".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    if u32::from_le_bytes(u32buf) != CKPT_VERSION {
        return Err(PathError::InvalidParameter(
            "unsupported checkpoint version".into(),
        ));
    }
    input.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let expect = model.tensors();
    if count != expect.len() {
        return Err(PathError::ShapeMismatch(format!(
            "checkpoint has {count} tensors, model has {}",
            expect.len()
        )));
    }
    let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (name, shape, _) in &expect {
        input.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        input.read_exact(&mut name_buf)?;
        let got_name = String::from_utf8_lossy(&name_buf);
        if got_name != *name {
            return Err(PathError::ShapeMismatch(format!(
                "tensor name mismatch: checkpoint '{got_name}', model '{name}'"
            )));
        }
        input.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input.read_exact(&mut u32buf)?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        if dims != *shape {
            return Err(PathError::ShapeMismatch(format!(
                "tensor '{name}' shape {dims:?} does not match model {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        loaded.push(data);
    }
    let mut idx = 0;
    model.for_each_tensor_mut(|_, slot| {
        slot.copy_from_slice(&loaded[idx]);
        idx += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::vanilla_causal_attention;
    use crate::tasks;

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::new(5, "fflm");
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.rank = 3;
        cfg.mode = mode;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn zeroed_w_pipeline_behaves_as_nope() {
        let mut path = Model::init(tiny_cfg(Mode::Path)).unwrap();
        for layer in &mut path.layers {
            for h in &mut layer.heads {
                h.w_lr1.fill(0.0);
                h.w_lr2.fill(0.0);
                h.conv.fill(0.0);
            }
        }
        let mut nope = path.clone();
        nope.cfg.mode = Mode::Nope;
        let tokens = [0usize, 3, 1, 4, 2, 3];
        let a = model_forward(&path, &tokens).unwrap();
        let b = model_forward(&nope, &tokens).unwrap();
        assert!(crate::linalg::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn zeroed_w_pipeline_fox_behaves_as_fox() {
        let mut pf = Model::init(tiny_cfg(Mode::PathFox)).unwrap();
        for layer in &mut pf.layers {
            for h in &mut layer.heads {
                h.w_lr1.fill(0.0);
                h.w_lr2.fill(0.0);
                h.conv.fill(0.0);
            }
        }
        let mut fox = pf.clone();
        fox.cfg.mode = Mode::Fox;
        let tokens = [0usize, 3, 1, 4];
        let a = model_forward(&pf, &tokens).unwrap();
        let b = model_forward(&fox, &tokens).unwrap();
        assert!(crate::linalg::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn single_token_depends_only_on_its_embedding() {
        let model = Model::init(tiny_cfg(Mode::Path)).unwrap();
        let a = model_forward(&model, &[2]).unwrap();
        let mut perturbed = model.clone();
        perturbed.embedding.row_mut(4).mapv_inplace(|x| x + 1.0);
        let b = model_forward(&perturbed, &[2]).unwrap();
        assert!(crate::linalg::max_abs_diff(&a, &b) == 0.0);
    }

    #[test]
    fn nope_head_matches_vanilla_attention() {
        let model = Model::init(tiny_cfg(Mode::Nope)).unwrap();
        let tokens = [0usize, 3, 1, 4, 2];
        let l = tokens.len();
        let mut x = Array2::zeros((l, model.cfg.dim));
        for (p, &t) in tokens.iter().enumerate() {
            x.row_mut(p).assign(&model.embedding.row(t));
        }
        let hp = &model.layers[0].heads[0];
        let hc = head_forward(&model, hp, &x).unwrap();
        let q = x.dot(&hp.wq.t());
        let k = x.dot(&hp.wk.t());
        let v = x.dot(&hp.wv.t());
        let hd = model.cfg.head_dim();
        let vanilla = vanilla_causal_attention(&q, &k, &v, 1.0 / (hd as f64).sqrt());
        assert!(crate::linalg::max_abs_diff(&hc.out, &vanilla) < 1e-12);
    }

    #[test]
    fn parameterization_invariants_hold() {
        let model = Model::init(tiny_cfg(Mode::PathFox)).unwrap();
        let tokens = [0usize, 3, 1, 4, 2, 3, 0, 4];
        let l = tokens.len();
        let mut x = Array2::zeros((l, model.cfg.dim));
        for (p, &t) in tokens.iter().enumerate() {
            x.row_mut(p).assign(&model.embedding.row(t));
        }
        let hc = head_forward(&model, &model.layers[0].heads[0], &x).unwrap();
        for t in 0..l {
            let row = hc.w.row(t);
            let n = row.dot(&row).sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
            assert!(hc.beta[t] > 0.0 && hc.beta[t] < 2.0);
        }
        for &f in hc.f.as_ref().unwrap() {
            assert!(f > 0.0 && f < 1.0);
        }
    }

    fn fd_check(mode: Mode) {
        let cfg = tiny_cfg(mode);
        let model = Model::init(cfg).unwrap();
        let ex = tasks::gen_fflm(8, 0.5, 3).unwrap();
        let mut grads = model.zeros_like();
        loss_and_grads(&model, &ex, &mut grads).unwrap();
        let analytic = grads.tensors();
        let loss_of = |m: &Model| -> f64 {
            let mut g = m.zeros_like();
            loss_and_grads(m, &ex, &mut g).unwrap().0
        };
        let h = 1e-6;
        let n_tensors = analytic.len();
        let mut rng = crate::test_support::seeded_rng(99);
        for ti in 0..n_tensors {
            let len = analytic[ti].2.len();
            // spot-check a few coordinates per tensor
            for _ in 0..3.min(len) {
                let ci = rng.gen_range(0..len);
                let mut plus = model.clone();
                let mut idx = 0;
                plus.for_each_tensor_mut(|_, d| {
                    if idx == ti {
                        d[ci] += h;
                    }
                    idx += 1;
                });
                let mut minus = model.clone();
                idx = 0;
                minus.for_each_tensor_mut(|_, d| {
                    if idx == ti {
                        d[ci] -= h;
                    }
                    idx += 1;
                });
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic[ti].2[ci];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "tensor {} coord {ci}: fd {fd}, analytic {an} (mode {:?})",
                    analytic[ti].0,
                    mode
                );
            }
        }
    }

    #[test]
    fn gradients_pass_finite_differences_path() {
        fd_check(Mode::Path);
    }

    #[test]
    fn gradients_pass_finite_differences_path_fox() {
        fd_check(Mode::PathFox);
    }

    #[test]
    fn gradients_pass_finite_differences_rope() {
        fd_check(Mode::Rope);
    }

    #[test]
    fn gradients_pass_finite_differences_nope_fox() {
        fd_check(Mode::Nope);
        fd_check(Mode::Fox);
    }

    #[test]
    fn training_is_deterministic() {
        let dataset: Vec<_> = (0..8).map(|s| tasks::gen_fflm(12, 0.5, s).unwrap()).collect();
        let mut cfg = tiny_cfg(Mode::Path);
        cfg.steps = 5;
        cfg.batch_size = 4;
        let (m1, log1) = train(cfg.clone(), &dataset).unwrap();
        let (m2, log2) = train(cfg, &dataset).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(metrics_csv(&log1), metrics_csv(&log2));
        for ((_, _, a), (_, _, b)) in m1.tensors().into_iter().zip(m2.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let dataset: Vec<_> = (0..32).map(|s| tasks::gen_fflm(12, 0.5, s).unwrap()).collect();
        let mut cfg = tiny_cfg(Mode::Path);
        cfg.steps = 40;
        cfg.batch_size = 8;
        cfg.lr = 3e-3;
        let (_, log) = train(cfg, &dataset).unwrap();
        let first: f64 = log[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let last: f64 = log[log.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(last < first, "loss did not decrease: {first} → {last}");
    }

    #[test]
    fn untrained_model_near_chance_and_empty_targets_undefined() {
        let model = Model::init(tiny_cfg(Mode::Path)).unwrap();
        let dataset: Vec<_> = (100..160).map(|s| tasks::gen_fflm(20, 0.5, s).unwrap()).collect();
        let acc = evaluate(&model, &dataset).unwrap().unwrap();
        assert!(acc < 0.9, "untrained accuracy suspiciously high: {acc}");
        // no supervised positions → undefined metric
        let mut no_targets = dataset.clone();
        for ex in &mut no_targets {
            ex.targets.iter_mut().for_each(|t| *t = None);
        }
        assert!(evaluate(&model, &no_targets).unwrap().is_none());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let model = Model::init(tiny_cfg(Mode::PathFox)).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model).unwrap();
        // different seed → different params before loading
        let mut cfg = tiny_cfg(Mode::PathFox);
        cfg.seed = 77;
        let mut other = Model::init(cfg).unwrap();
        load_checkpoint(&mut buf.as_slice(), &mut other).unwrap();
        let tokens = [0usize, 3, 1, 4];
        let a = model_forward(&model, &tokens).unwrap();
        let b = model_forward(&other, &tokens).unwrap();
        assert!(crate::linalg::max_abs_diff(&a, &b) == 0.0);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = Model::init(tiny_cfg(Mode::Path)).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &model).unwrap();
        buf[0] ^= 0xff;
        let mut target = model.clone();
        assert!(load_checkpoint(&mut buf.as_slice(), &mut target).is_err());
    }

    #[test]
    fn metrics_csv_header_contract() {
        let rows = vec![MetricsRow {
            step: 0,
            loss: 1.5,
            accuracy: 0.25,
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("step,loss,accuracy\n"));
        assert!(csv.contains("0,1.500000,0.250000"));
    }

    #[test]
    fn rejects_invalid_configs_and_tokens() {
        let mut cfg = tiny_cfg(Mode::Path);
        cfg.heads = 3; // dim 8 not divisible
        assert!(Model::init(cfg).is_err());
        let model = Model::init(tiny_cfg(Mode::Path)).unwrap();
        assert!(model_forward(&model, &[]).is_err());
        assert!(model_forward(&model, &[9]).is_err());
    }
}
