//! The minimal differentiable classifier that the multi-agent engine trains:
//! an MLP encoder producing unit-norm embeddings, a normalized class-weight
//! head, angular-margin softmax losses and an SGD optimizer with momentum.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const COS_CLAMP: f64 = 1.0 - 1e-7;
const COS_TOLERANCE: f64 = 1e-6;

/// Angular-margin loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Additive angular margin on the target cosine, in radians.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
    /// Hard-negative inflation factor of the MV loss.
    pub mv_t: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            scale: 32.0,
            mv_t: 1.1,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!(
                "margin must be in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig("scale must be positive".into()));
        }
        if !(self.mv_t >= 1.0) {
            return Err(Error::InvalidConfig("mv_t must be >= 1".into()));
        }
        Ok(())
    }
}

/// SGD with momentum, weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_iters: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_iters: Vec::new(),
            lr_decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let decays = self
            .lr_decay_iters
            .iter()
            .filter(|&&it| iteration >= it)
            .count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    /// The default desk-scale schedule: decay by 10x at 60% and 80% of the run.
    pub fn with_default_schedule(mut self, total_iterations: usize) -> Self {
        if self.lr_decay_iters.is_empty() && total_iterations > 0 {
            self.lr_decay_iters =
                vec![total_iterations * 6 / 10, total_iterations * 8 / 10];
        }
        self
    }
}

/// Encoder weights: a stack of linear layers with ReLU between them and a
/// linear final layer. `dims = [d_in, hidden..., d_e]`; an encoder with a
/// single entry in `dims` is the identity passthrough.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>, // weights[l]: dims[l+1] x dims[l], row-major
    biases: Vec<Vec<f64>>,
}

impl EncoderParams {
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(!dims.is_empty());
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let fan_in = dims[l];
            // He init for the ReLU layers, Xavier-ish for the last linear one.
            let std = if l + 1 < layers {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let w: Vec<f64> = (0..dims[l + 1] * dims[l])
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; dims[l + 1]]);
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    /// The passthrough encoder: output = normalize(input).
    pub fn identity(dim: usize) -> Self {
        Self {
            dims: vec![dim],
            weights: Vec::new(),
            biases: Vec::new(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    fn forward_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let layers = self.layer_count();
        for l in 0..layers {
            let rows = self.dims[l + 1];
            let cols = self.dims[l];
            let mut z = self.biases[l].clone();
            for (r, zr) in z.iter_mut().enumerate().take(rows) {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (w, av) in row.iter().zip(a.iter()) {
                    acc += w * av;
                }
                *zr += acc;
            }
            if l + 1 < layers {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        a
    }

    /// Forward pass keeping the pre-activations of every layer for backprop.
    fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        let layers = self.layer_count();
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let rows = self.dims[l + 1];
            let cols = self.dims[l];
            let a = activations.last().unwrap();
            let mut z = self.biases[l].clone();
            for (r, zr) in z.iter_mut().enumerate().take(rows) {
                let row = &self.weights[l][r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (w, av) in row.iter().zip(a.iter()) {
                    acc += w * av;
                }
                *zr += acc;
            }
            pre.push(z.clone());
            if l + 1 < layers {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(z);
        }
        ForwardTrace { activations, pre }
    }
}

struct ForwardTrace {
    /// activations[0] = input, activations[l+1] = output of layer l
    /// (post-ReLU except for the last layer).
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// Normalized class-weight matrix, one unit-norm row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>, // C x d_e row-major
}

impl ClassHead {
    pub fn init(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = vec![0.0; classes * dim];
        for c in 0..classes {
            loop {
                let row = &mut weights[c * dim..(c + 1) * dim];
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Self {
            classes,
            dim,
            weights,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("head needs at least one class".into()));
        }
        let dim = rows[0].len();
        let mut weights = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::InvalidInput("ragged head rows".into()));
            }
            weights.extend_from_slice(r);
        }
        let mut head = Self {
            classes: rows.len(),
            dim,
            weights,
        };
        head.renormalize();
        Ok(head)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cosines(&self, f: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let row = self.row(c);
            let mut acc = 0.0;
            for (w, fv) in row.iter().zip(f.iter()) {
                acc += w * fv;
            }
            out.push(acc);
        }
        out
    }

    pub fn renormalize(&mut self) {
        for c in 0..self.classes {
            let row = &mut self.weights[c * self.dim..(c + 1) * self.dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    /// Appends a class whose weight row is the given (renormalized) vector.
    pub fn append_class(&mut self, prototype: &[f64]) -> Result<usize> {
        if prototype.len() != self.dim {
            return Err(Error::InvalidInput("prototype dimension mismatch".into()));
        }
        let norm = prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::InvalidInput("degenerate prototype".into()));
        }
        self.weights.extend(prototype.iter().map(|v| v / norm));
        self.classes += 1;
        Ok(self.classes - 1)
    }
}

/// Which per-sample criterion to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Additive angular margin on the target cosine.
    Arc,
    /// Arc target plus inflated hard-negative logits.
    Mv,
}

/// Loss value with gradients for the embedding and the full head matrix.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub wrt_embedding: Vec<f64>,
    /// One gradient row per class, aligned with the head rows.
    pub wrt_head: Vec<Vec<f64>>,
}

fn check_cosines(cos: &[f64]) -> Result<()> {
    for (k, c) in cos.iter().enumerate() {
        if !c.is_finite() || c.abs() > 1.0 + COS_TOLERANCE {
            return Err(Error::NumericOverflow(format!(
                "cosine {c} for class {k} outside [-1, 1]"
            )));
        }
    }
    Ok(())
}

/// Margin-adjusted logits plus the diagonal Jacobian dz_k/dcos_k.
fn margin_logits(
    cos: &[f64],
    target: usize,
    cfg: &MarginConfig,
    kind: LossKind,
) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.scale;
    let cy = cos[target].clamp(-COS_CLAMP, COS_CLAMP);
    let theta = cy.acos();
    let cos_ym = (theta + cfg.margin).cos();
    let sin_theta = theta.sin();
    let dtarget = s * (theta + cfg.margin).sin() / sin_theta;

    let mut z = Vec::with_capacity(cos.len());
    let mut dz = Vec::with_capacity(cos.len());
    for (k, &ck) in cos.iter().enumerate() {
        if k == target {
            z.push(s * cos_ym);
            dz.push(dtarget);
        } else if kind == LossKind::Mv && cos_ym < ck {
            // hard negative: the sample's margin-adjusted target logit loses
            // to this class, so inflate it
            z.push(s * (cfg.mv_t * ck + cfg.mv_t - 1.0));
            dz.push(s * cfg.mv_t);
        } else {
            z.push(s * ck);
            dz.push(s);
        }
    }
    (z, dz)
}

/// Softmax cross-entropy with max-logit subtraction. Returns the loss and
/// dloss/dz.
fn softmax_ce(z: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(z[target] - max - sum.ln());
    for (k, e) in exps.iter_mut().enumerate() {
        *e /= sum;
        if k == target {
            *e -= 1.0;
        }
    }
    (loss, exps)
}

/// Loss and dloss/dcos for one sample. The caller expands dcos into
/// embedding/head gradients (dcos factorizes them exactly).
pub fn loss_wrt_cosines(
    cos: &[f64],
    target: usize,
    cfg: &MarginConfig,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if target >= cos.len() {
        return Err(Error::InvalidInput(format!(
            "class {target} out of range for {} classes",
            cos.len()
        )));
    }
    check_cosines(cos)?;
    let (z, dz) = margin_logits(cos, target, cfg, kind);
    let (loss, mut dldz) = softmax_ce(&z, target);
    for (d, j) in dldz.iter_mut().zip(dz.iter()) {
        *d *= j;
    }
    Ok((loss, dldz))
}

fn expand_grads(f: &[f64], head: &ClassHead, dcos: &[f64], loss: f64) -> LossGrads {
    let dim = head.dim();
    let mut wrt_embedding = vec![0.0; dim];
    let mut wrt_head = Vec::with_capacity(head.classes());
    for (k, &d) in dcos.iter().enumerate() {
        let row = head.row(k);
        for (ge, w) in wrt_embedding.iter_mut().zip(row.iter()) {
            *ge += d * w;
        }
        wrt_head.push(f.iter().map(|fv| d * fv).collect());
    }
    LossGrads {
        loss,
        wrt_embedding,
        wrt_head,
    }
}

/// Additive angular-margin softmax loss with analytic gradients.
pub fn arc_softmax_loss(
    f: &[f64],
    head: &ClassHead,
    target: usize,
    cfg: &MarginConfig,
) -> Result<LossGrads> {
    let cos = head.cosines(f);
    let (loss, dcos) = loss_wrt_cosines(&cos, target, cfg, LossKind::Arc)?;
    Ok(expand_grads(f, head, &dcos, loss))
}

/// Margin loss with inflated hard-negative logits; reduces to
/// [`arc_softmax_loss`] at `mv_t = 1`.
pub fn mv_softmax_loss(
    f: &[f64],
    head: &ClassHead,
    target: usize,
    cfg: &MarginConfig,
) -> Result<LossGrads> {
    let cos = head.cosines(f);
    let (loss, dcos) = loss_wrt_cosines(&cos, target, cfg, LossKind::Mv)?;
    Ok(expand_grads(f, head, &dcos, loss))
}

/// Gradient buffers shaped like an agent's parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    head: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(agent: &Agent) -> Self {
        Self {
            weights: agent
                .encoder
                .weights
                .iter()
                .map(|w| vec![0.0; w.len()])
                .collect(),
            biases: agent
                .encoder
                .biases
                .iter()
                .map(|b| vec![0.0; b.len()])
                .collect(),
            head: vec![0.0; agent.head.weights.len()],
        }
    }

    fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for v in w.iter_mut() {
                *v *= factor;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
        for v in &mut self.head {
            *v *= factor;
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
            && self.head.iter().all(|v| v.is_finite())
    }

    /// Grows the head buffer when classes were appended since creation.
    fn resize_head(&mut self, len: usize) {
        if self.head.len() < len {
            self.head.resize(len, 0.0);
        }
    }
}

/// One learner: encoder plus class head plus optimizer state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub encoder: EncoderParams,
    pub head: ClassHead,
    momentum: Option<ParamGrads>,
}

impl Agent {
    pub fn init(dims: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "agent-init");
        let encoder = EncoderParams::init(dims, &mut rng);
        let head = ClassHead::init(classes, *dims.last().unwrap(), &mut rng);
        Self {
            encoder,
            head,
            momentum: None,
        }
    }

    pub fn from_parts(encoder: EncoderParams, head: ClassHead) -> Self {
        Self {
            encoder,
            head,
            momentum: None,
        }
    }

    /// Unit-norm embedding of `x`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.encoder.input_dim() {
            return Err(Error::InvalidInput(format!(
                "input dimension {} != {}",
                x.len(),
                self.encoder.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite input".into()));
        }
        let v = self.encoder.forward_raw(x);
        normalize_embedding(v)
    }

    /// Cosines against every class row and the softmax posterior over the
    /// scaled cosines. No margin is applied at inference.
    pub fn forward_logits(&self, x: &[f64], cfg: &MarginConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.embed(x)?;
        let cos = self.head.cosines(&f);
        check_cosines(&cos)?;
        let z: Vec<f64> = cos.iter().map(|c| cfg.scale * c).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut post: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = post.iter().sum();
        for p in post.iter_mut() {
            *p /= sum;
        }
        Ok((cos, post))
    }

    /// Per-sample loss without gradients (used for ranking).
    pub fn sample_loss(
        &self,
        x: &[f64],
        target: usize,
        cfg: &MarginConfig,
        kind: LossKind,
    ) -> Result<f64> {
        let f = self.embed(x)?;
        let cos = self.head.cosines(&f);
        let (loss, _) = loss_wrt_cosines(&cos, target, cfg, kind)?;
        Ok(loss)
    }

    /// Mean loss and mean parameter gradients over a batch with per-sample
    /// loss kinds. Accumulation order is the slice order, so results are
    /// deterministic.
    pub fn batch_loss_grads(
        &self,
        items: &[(&[f64], usize, LossKind)],
        cfg: &MarginConfig,
    ) -> Result<(f64, ParamGrads)> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty effective batch".into()));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut total_loss = 0.0;
        for (x, y, kind) in items {
            total_loss += self.accumulate_sample(x, *y, cfg, *kind, &mut grads)?;
        }
        let inv = 1.0 / items.len() as f64;
        grads.scale(inv);
        Ok((total_loss * inv, grads))
    }

    fn accumulate_sample(
        &self,
        x: &[f64],
        target: usize,
        cfg: &MarginConfig,
        kind: LossKind,
        grads: &mut ParamGrads,
    ) -> Result<f64> {
        grads.resize_head(self.head.weights.len());
        let trace = self.encoder.forward_trace(x);
        let v = trace.activations.last().unwrap();
        let f = normalize_embedding(v.clone())?;
        let cos = self.head.cosines(&f);
        let (loss, dcos) = loss_wrt_cosines(&cos, target, cfg, kind)?;

        // head gradient and dloss/df
        let dim = self.head.dim();
        let mut d_f = vec![0.0; dim];
        for (k, &d) in dcos.iter().enumerate() {
            let row = self.head.row(k);
            for i in 0..dim {
                d_f[i] += d * row[i];
                grads.head[k * dim + i] += d * f[i];
            }
        }

        // back through the normalization: f = v / |v|
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let dot: f64 = d_f.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
        let mut d_z: Vec<f64> = d_f
            .iter()
            .zip(f.iter())
            .map(|(df, fi)| (df - dot * fi) / norm)
            .collect();

        // back through the layers (last layer is linear)
        let layers = self.encoder.layer_count();
        for l in (0..layers).rev() {
            let rows = self.encoder.dims[l + 1];
            let cols = self.encoder.dims[l];
            let a = &trace.activations[l];
            for r in 0..rows {
                let g = d_z[r];
                grads.biases[l][r] += g;
                let wrow = &mut grads.weights[l][r * cols..(r + 1) * cols];
                for (wg, av) in wrow.iter_mut().zip(a.iter()) {
                    *wg += g * av;
                }
            }
            if l > 0 {
                let mut d_prev = vec![0.0; cols];
                for r in 0..rows {
                    let g = d_z[r];
                    let wrow = &self.encoder.weights[l][r * cols..(r + 1) * cols];
                    for (dp, w) in d_prev.iter_mut().zip(wrow.iter()) {
                        *dp += g * w;
                    }
                }
                for (dp, z) in d_prev.iter_mut().zip(trace.pre[l - 1].iter()) {
                    if *z <= 0.0 {
                        *dp = 0.0;
                    }
                }
                d_z = d_prev;
            }
        }
        Ok(loss)
    }

    /// One SGD step: `v <- mu*v + g + wd*w; w <- w - lr*v`, then re-normalize
    /// the head rows.
    pub fn sgd_step(&mut self, grads: &ParamGrads, cfg: &SgdConfig, iteration: usize) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let lr = cfg.lr_at(iteration);
        let mut momentum = match self.momentum.take() {
            Some(m) => m,
            None => ParamGrads::zeros_like(self),
        };
        momentum.resize_head(self.head.weights.len());

        let update =
            |w: &mut [f64], g: &[f64], v: &mut [f64]| {
                for i in 0..w.len() {
                    v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * w[i];
                    w[i] -= lr * v[i];
                }
            };
        for l in 0..self.encoder.weights.len() {
            update(
                &mut self.encoder.weights[l],
                &grads.weights[l],
                &mut momentum.weights[l],
            );
            update(
                &mut self.encoder.biases[l],
                &grads.biases[l],
                &mut momentum.biases[l],
            );
        }
        update(&mut self.head.weights, &grads.head, &mut momentum.head);
        self.head.renormalize();
        self.momentum = Some(momentum);
        Ok(())
    }

    /// Drops optimizer state (used when class rows are appended).
    pub fn reset_momentum(&mut self) {
        self.momentum = None;
    }
}

fn normalize_embedding(v: Vec<f64>) -> Result<Vec<f64>> {
    let norm_sq: f64 = v.iter().map(|a| a * a).sum();
    if !norm_sq.is_finite() {
        return Err(Error::NumericOverflow("embedding is non-finite".into()));
    }
    let norm = norm_sq.sqrt();
    if norm < 1e-12 {
        return Err(Error::NumericOverflow("embedding collapsed to zero".into()));
    }
    Ok(v.into_iter().map(|a| a / norm).collect())
}

const CHECKPOINT_MAGIC: &[u8] = b"GNCKPT1\n";

/// Saves an agent: magic, textual header, then each tensor as row-major
/// little-endian f32 in declaration order (layer weight, layer bias, ...,
/// head matrix).
pub fn save_checkpoint(agent: &Agent, margin: &MarginConfig, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    let dims: Vec<String> = agent.encoder.dims.iter().map(|d| d.to_string()).collect();
    writeln!(w, "dims {}", dims.join(" "))?;
    writeln!(w, "classes {}", agent.head.classes())?;
    writeln!(w, "margin {} {} {}", margin.margin, margin.scale, margin.mv_t)?;
    writeln!(w, "data")?;
    let mut write_tensor = |vals: &[f64]| -> Result<()> {
        for v in vals {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    };
    for l in 0..agent.encoder.layer_count() {
        write_tensor(&agent.encoder.weights[l])?;
        write_tensor(&agent.encoder.biases[l])?;
    }
    write_tensor(&agent.head.weights)?;
    Ok(())
}

/// Loads an agent written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Agent, MarginConfig)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::InvalidInput("bad checkpoint magic".into()));
    }
    let mut dims: Option<Vec<usize>> = None;
    let mut classes: Option<usize> = None;
    let mut margin = MarginConfig::default();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::InvalidInput("truncated checkpoint header".into()));
        }
        let line = line.trim_end();
        if line == "data" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("dims") => {
                let d: std::result::Result<Vec<usize>, _> =
                    parts.map(|p| p.parse::<usize>()).collect();
                dims = Some(d.map_err(|_| Error::InvalidInput("bad dims header".into()))?);
            }
            Some("classes") => {
                classes = Some(
                    parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or_else(|| Error::InvalidInput("bad classes header".into()))?,
                );
            }
            Some("margin") => {
                let vals: std::result::Result<Vec<f64>, _> =
                    parts.map(|p| p.parse::<f64>()).collect();
                let vals = vals.map_err(|_| Error::InvalidInput("bad margin header".into()))?;
                if vals.len() != 3 {
                    return Err(Error::InvalidInput("bad margin header".into()));
                }
                margin = MarginConfig {
                    margin: vals[0],
                    scale: vals[1],
                    mv_t: vals[2],
                };
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown checkpoint header field {other:?}"
                )))
            }
        }
    }
    let dims = dims.ok_or_else(|| Error::InvalidInput("missing dims header".into()))?;
    let classes = classes.ok_or_else(|| Error::InvalidInput("missing classes header".into()))?;
    if dims.is_empty() {
        return Err(Error::InvalidInput("empty dims header".into()));
    }

    let mut read_tensor = |n: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };
    let layers = dims.len() - 1;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        weights.push(read_tensor(dims[l + 1] * dims[l])?);
        biases.push(read_tensor(dims[l + 1])?);
    }
    let d_e = *dims.last().unwrap();
    let head_weights = read_tensor(classes * d_e)?;
    let encoder = EncoderParams {
        dims,
        weights,
        biases,
    };
    let head = ClassHead {
        classes,
        dim: d_e,
        weights: head_weights,
    };
    Ok((Agent::from_parts(encoder, head), margin))
}
