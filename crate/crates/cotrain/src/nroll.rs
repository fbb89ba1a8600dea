//! The learn-label loop: robust pretraining on the seed labelled set,
//! high-confidence pseudo-labelling of one unlabelled part at a time,
//! labelled-set accumulation, noise-rate re-estimation and retraining, until
//! the unlabelled pool is exhausted. Also houses the open-set extension that
//! grows new-identity prototypes by exponential moving average.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelledSet, Provenance, Sample, UnlabelledPart};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::groupnet::{gn_train, GroupConfig, IterationRecord};
use crate::learner::{Agent, MarginConfig, SgdConfig};
use crate::noise::{estimate_noise_rate, EstimatorConfig};
use crate::rng::{derive_seed, stream_rng};

/// What counts as "the logit" when thresholding confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    /// Softmax posterior over the scaled cosines.
    Posterior,
    /// Raw cosine to the class weight.
    Cosine,
    /// Cosine times the loss scale.
    ScaledLogit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// Confidence threshold T.
    pub threshold: f64,
    pub confidence: ConfidenceKind,
    pub parts_per_loop: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            confidence: ConfidenceKind::Posterior,
            parts_per_loop: 1,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "confidence threshold must be in (0,1], got {}",
                self.threshold
            )));
        }
        if self.parts_per_loop == 0 {
            return Err(Error::InvalidConfig("parts per loop must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sample accepted during labelling.
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct LabelOutcome {
    pub accepted: Vec<PseudoSample>,
    pub dropped: Vec<u64>,
    pub confident_fraction: f64,
}

fn confidence_vector(
    agent: &Agent,
    x: &[f64],
    margin: &MarginConfig,
    kind: ConfidenceKind,
) -> Result<Vec<f64>> {
    let (cos, post) = agent.forward_logits(x, margin)?;
    Ok(match kind {
        ConfidenceKind::Posterior => post,
        ConfidenceKind::Cosine => cos,
        ConfidenceKind::ScaledLogit => cos.iter().map(|c| margin.scale * c).collect(),
    })
}

/// Labels one unlabelled part: every agent scores every sample, the global
/// maximum over all agents and classes wins, and samples whose best score
/// stays below `threshold` are dropped.
pub fn label_part(
    agents: &[Agent],
    part: &UnlabelledPart,
    margin: &MarginConfig,
    cfg: &LabelConfig,
) -> Result<LabelOutcome> {
    let classes = agents[0].head.classes();
    for (m, a) in agents.iter().enumerate() {
        if a.head.classes() != classes {
            return Err(Error::InvalidInput(format!(
                "agent {m} has a different class space"
            )));
        }
    }
    let verdicts: Result<Vec<Option<(usize, f64)>>> = part
        .features()
        .par_iter()
        .map(|x| {
            let mut best = f64::NEG_INFINITY;
            let mut best_class = 0usize;
            for agent in agents {
                let conf = confidence_vector(agent, x, margin, cfg.confidence)?;
                for (c, v) in conf.iter().enumerate() {
                    if *v > best {
                        best = *v;
                        best_class = c;
                    }
                }
            }
            Ok((best >= cfg.threshold).then_some((best_class, best)))
        })
        .collect();
    let verdicts = verdicts?;

    let mut accepted = Vec::new();
    let mut dropped = Vec::new();
    for (i, verdict) in verdicts.into_iter().enumerate() {
        match verdict {
            Some((label, confidence)) => accepted.push(PseudoSample {
                id: part.ids()[i],
                features: part.features()[i].clone(),
                label,
                confidence,
            }),
            None => dropped.push(part.ids()[i]),
        }
    }
    let confident_fraction = if part.is_empty() {
        0.0
    } else {
        accepted.len() as f64 / part.len() as f64
    };
    Ok(LabelOutcome {
        accepted,
        dropped,
        confident_fraction,
    })
}

/// Merges accepted pseudo-labels into the labelled set with a loop
/// provenance tag. Fails on id collisions; pseudo samples never carry
/// ground truth.
pub fn update_labelled(
    labelled: &mut LabelledSet,
    accepted: &[PseudoSample],
    loop_index: u32,
) -> Result<usize> {
    let extra: Vec<Sample> = accepted
        .iter()
        .map(|p| Sample {
            id: p.id,
            features: p.features.clone(),
            label: p.label,
            gt_label: None,
            provenance: Provenance::Pseudo { loop_index },
        })
        .collect();
    let n = extra.len();
    labelled.append(extra)?;
    Ok(n)
}

/// Unit-norm prototypes of identities discovered in open-set mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: Vec<Vec<f64>>,
    member_counts: Vec<usize>,
    /// EMA coefficient: keep this much of the old prototype per update.
    pub ema: f64,
    /// Below this similarity to everything known, a sample founds a new
    /// identity.
    pub tau_new: f64,
    base_classes: usize,
}

impl PrototypeBank {
    pub fn new(base_classes: usize, ema: f64, tau_new: f64) -> Self {
        Self {
            prototypes: Vec::new(),
            member_counts: Vec::new(),
            ema,
            tau_new,
            base_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn base_classes(&self) -> usize {
        self.base_classes
    }

    pub fn prototype(&self, idx: usize) -> &[f64] {
        &self.prototypes[idx]
    }

    pub fn member_count(&self, idx: usize) -> usize {
        self.member_counts[idx]
    }

    /// Class id used for samples of this identity in the labelled set.
    pub fn class_of(&self, idx: usize) -> usize {
        self.base_classes + idx
    }

    fn push(&mut self, feature: &[f64]) -> Result<usize> {
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::InvalidInput("degenerate prototype feature".into()));
        }
        self.prototypes
            .push(feature.iter().map(|v| v / norm).collect());
        self.member_counts.push(1);
        Ok(self.prototypes.len() - 1)
    }

    /// Moving-average update followed by renormalization.
    fn update(&mut self, idx: usize, feature: &[f64]) {
        let proto = &mut self.prototypes[idx];
        for (p, f) in proto.iter_mut().zip(feature.iter()) {
            *p = self.ema * *p + (1.0 - self.ema) * f;
        }
        let norm = proto.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for p in proto.iter_mut() {
                *p /= norm;
            }
        }
        self.member_counts[idx] += 1;
    }

    fn best_match(&self, feature: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.prototypes.iter().enumerate() {
            let dot: f64 = p.iter().zip(feature.iter()).map(|(a, b)| a * b).sum();
            if best.map(|(_, b)| dot > b).unwrap_or(true) {
                best = Some((i, dot));
            }
        }
        best
    }

    pub fn max_norm_error(&self) -> f64 {
        self.prototypes
            .iter()
            .map(|p| (p.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Where an open-set sample ended up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpenSetAssignment {
    /// Confidently matched to an original class.
    KnownClass(usize, f64),
    /// Founded or joined a new identity (bank index).
    NewIdentity(usize),
    Dropped,
}

/// Routes one sample in open-set mode: a feature dissimilar to every class
/// weight and prototype founds a new identity; the best-matching prototype
/// absorbs it through the moving average otherwise; failing both, the plain
/// confidence-threshold labelling over the original classes applies.
pub fn open_set_assign(
    agents: &[Agent],
    x: &[f64],
    bank: &mut PrototypeBank,
    margin: &MarginConfig,
    label_cfg: &LabelConfig,
) -> Result<OpenSetAssignment> {
    let f = agents[0].embed(x)?;
    let cos = agents[0].head.cosines(&f);
    let known_best = cos
        .iter()
        .take(bank.base_classes)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let bank_best = bank.best_match(&f);
    let overall_best = known_best.max(bank_best.map(|(_, s)| s).unwrap_or(f64::NEG_INFINITY));

    if overall_best < bank.tau_new {
        let idx = bank.push(&f)?;
        return Ok(OpenSetAssignment::NewIdentity(idx));
    }
    if let Some((idx, sim)) = bank_best {
        if sim >= known_best {
            bank.update(idx, &f);
            return Ok(OpenSetAssignment::NewIdentity(idx));
        }
    }
    // fall back to the confidence-threshold rule over the original classes
    let base = bank.base_classes;
    let mut best = f64::NEG_INFINITY;
    let mut best_class = 0usize;
    for agent in agents {
        let conf = confidence_over_base(agent, x, margin, label_cfg.confidence, base)?;
        for (c, v) in conf.iter().enumerate() {
            if *v > best {
                best = *v;
                best_class = c;
            }
        }
    }
    if best >= label_cfg.threshold {
        Ok(OpenSetAssignment::KnownClass(best_class, best))
    } else {
        Ok(OpenSetAssignment::Dropped)
    }
}

/// Confidence restricted to the first `base` classes (new-identity rows do
/// not compete for known-class labels).
fn confidence_over_base(
    agent: &Agent,
    x: &[f64],
    margin: &MarginConfig,
    kind: ConfidenceKind,
    base: usize,
) -> Result<Vec<f64>> {
    let f = agent.embed(x)?;
    let cos: Vec<f64> = agent.head.cosines(&f).into_iter().take(base).collect();
    Ok(match kind {
        ConfidenceKind::Posterior => {
            let z: Vec<f64> = cos.iter().map(|c| margin.scale * c).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        }
        ConfidenceKind::Cosine => cos,
        ConfidenceKind::ScaledLogit => cos.iter().map(|c| margin.scale * c).collect(),
    })
}

/// Open-set parameters; presence enables the new-identity mechanism.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpenSetParams {
    pub tau_new: f64,
    pub ema: f64,
}

impl Default for OpenSetParams {
    fn default() -> Self {
        Self {
            tau_new: 0.5,
            ema: 0.9,
        }
    }
}

/// Full loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NrollConfig {
    pub group: GroupConfig,
    pub margin: MarginConfig,
    pub sgd: SgdConfig,
    pub label: LabelConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub pretrain_iterations: usize,
    pub loop_iterations: usize,
    /// Noise-rate percent for pretraining; estimated after warmup when
    /// absent.
    pub initial_noise_rate: Option<f64>,
    /// Enables new-identity prototypes.
    pub open_set: Option<OpenSetParams>,
    pub seed: u64,
}

impl Default for NrollConfig {
    fn default() -> Self {
        Self {
            group: GroupConfig::default(),
            margin: MarginConfig::default(),
            sgd: SgdConfig::default(),
            label: LabelConfig::default(),
            estimator: EstimatorConfig::default(),
            eval: EvalConfig::default(),
            hidden_dims: vec![64],
            embedding_dim: 16,
            pretrain_iterations: 1200,
            loop_iterations: 600,
            initial_noise_rate: None,
            open_set: None,
            seed: 0,
        }
    }
}

impl NrollConfig {
    pub fn validate(&self) -> Result<()> {
        self.group.validate()?;
        self.margin.validate()?;
        self.sgd.validate()?;
        self.label.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding dim must be positive".into()));
        }
        if self.pretrain_iterations == 0 {
            return Err(Error::InvalidConfig("pretrain iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }
}

/// Per-loop state row; `loop_index` 0 is the pretraining row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub loop_index: u32,
    pub labelled_size: usize,
    pub estimated_noise_rate: f64,
    pub confident_fraction: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_coverage: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub verification_accuracy: Option<f64>,
    pub new_identities: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: String,
    pub records: Vec<IterationRecord>,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct NrollOutcome {
    pub agents: Vec<Agent>,
    pub labelled: LabelledSet,
    /// Pretrain row followed by one row per loop.
    pub metrics: Vec<LoopMetrics>,
    pub dropped: Vec<(u32, Vec<u64>)>,
    pub logs: Vec<PhaseLog>,
    pub bank: Option<PrototypeBank>,
}

/// Hook for per-loop artifacts (checkpoints, incremental CSV rows).
pub trait LoopObserver {
    fn on_state(&mut self, _agents: &[Agent], _metrics: &LoopMetrics) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;
impl LoopObserver for NoopObserver {}

struct LoopContext<'a> {
    test: Option<&'a LabelledSet>,
    train_rng: ChaCha8Rng,
    estimate_rng: ChaCha8Rng,
    eval_seed: u64,
}

/// Runs the whole loop on pre-split data. The seed labelled set keeps its
/// (possibly noisy) labels; `parts` are consumed in order.
pub fn run_nroll(
    seed_labelled: LabelledSet,
    parts: Vec<UnlabelledPart>,
    test: Option<&LabelledSet>,
    cfg: &NrollConfig,
    observer: &mut dyn LoopObserver,
) -> Result<NrollOutcome> {
    cfg.validate()?;
    if seed_labelled.is_empty() {
        return Err(Error::InvalidInput("empty seed labelled set".into()));
    }
    let input_dim = seed_labelled.feature_dim();
    let dims = cfg.encoder_dims(input_dim);
    let mut agents: Vec<Agent> = (0..cfg.group.agents)
        .map(|m| {
            Agent::init(
                &dims,
                seed_labelled.class_count(),
                derive_seed(cfg.seed, &format!("agent-{m}")),
            )
        })
        .collect();
    let mut ctx = LoopContext {
        test,
        train_rng: stream_rng(cfg.seed, "nroll-train"),
        estimate_rng: stream_rng(cfg.seed, "nroll-estimate"),
        eval_seed: derive_seed(cfg.seed, "nroll-eval"),
    };
    let mut labelled = seed_labelled;
    let mut logs = Vec::new();
    let mut metrics = Vec::new();
    let mut dropped_log = Vec::new();
    let mut bank = cfg
        .open_set
        .as_ref()
        .map(|p| PrototypeBank::new(labelled.class_count(), p.ema, p.tau_new));

    // ---- pretraining -------------------------------------------------
    let warmup = ((cfg.group.warmup_fraction * cfg.pretrain_iterations as f64).round() as usize)
        .min(cfg.pretrain_iterations);
    let pretrain_sgd = cfg.sgd.clone().with_default_schedule(cfg.pretrain_iterations);
    let mut rate_percent = match cfg.initial_noise_rate {
        Some(r) => r,
        None => {
            // warm the agents up first so the pair similarities mean something
            let records = gn_train(
                &mut agents,
                &labelled,
                &cfg.group,
                &cfg.margin,
                &pretrain_sgd,
                warmup,
                warmup,
                0,
                &mut ctx.train_rng,
            )?;
            logs.push(PhaseLog {
                phase: "pretrain-warmup".into(),
                records,
            });
            let est = estimate_noise_rate(
                &labelled,
                &agents[0],
                &cfg.estimator,
                &mut ctx.estimate_rng,
            )?;
            100.0 * est.rate
        }
    };
    {
        let mut group = cfg.group.clone();
        group.noise_rate_percent = rate_percent;
        let remaining = cfg.pretrain_iterations - if cfg.initial_noise_rate.is_some() { 0 } else { warmup };
        let warmup_left = if cfg.initial_noise_rate.is_some() { warmup } else { 0 };
        let offset = cfg.pretrain_iterations - remaining;
        let records = gn_train(
            &mut agents,
            &labelled,
            &group,
            &cfg.margin,
            &pretrain_sgd,
            remaining,
            warmup_left,
            offset,
            &mut ctx.train_rng,
        )?;
        logs.push(PhaseLog {
            phase: "pretrain".into(),
            records,
        });
    }
    // the post-pretraining estimate reported for loop 0
    if cfg.initial_noise_rate.is_none() {
        let est = estimate_noise_rate(&labelled, &agents[0], &cfg.estimator, &mut ctx.estimate_rng)?;
        rate_percent = 100.0 * est.rate;
    }
    let pretrain_row = loop_row(0, &agents, &labelled, rate_percent / 100.0, None, None, 0.0, &bank, Vec::new(), &ctx, cfg)?;
    observer.on_state(&agents, &pretrain_row)?;
    metrics.push(pretrain_row);

    // ---- the loop -----------------------------------------------------
    let mut threshold = cfg.label.threshold;
    let mut consecutive_empty = 0usize;
    let mut remaining_parts = std::collections::VecDeque::from(parts);
    let mut t: u32 = 0;
    while !remaining_parts.is_empty() {
        t += 1;
        let take = cfg.label.parts_per_loop.min(remaining_parts.len());
        let consumed: Vec<UnlabelledPart> = (0..take)
            .map(|_| remaining_parts.pop_front().unwrap())
            .collect();
        let mut events = Vec::new();
        let label_cfg = LabelConfig {
            threshold,
            ..cfg.label.clone()
        };

        let mut accepted: Vec<PseudoSample> = Vec::new();
        let mut dropped: Vec<u64> = Vec::new();
        let mut total_samples = 0usize;
        let mut pseudo_known = 0usize;
        let mut pseudo_correct_weight = 0.0f64;
        let bank_len_before = bank.as_ref().map(|b| b.len()).unwrap_or(0);

        for part in &consumed {
            total_samples += part.len();
            if let Some(bank) = bank.as_mut() {
                // open-set pass mutates the bank sample by sample
                let mut part_accepted = Vec::new();
                for (i, x) in part.features().iter().enumerate() {
                    match open_set_assign(&agents, x, bank, &cfg.margin, &label_cfg)? {
                        OpenSetAssignment::KnownClass(c, conf) => part_accepted.push(PseudoSample {
                            id: part.ids()[i],
                            features: x.clone(),
                            label: c,
                            confidence: conf,
                        }),
                        OpenSetAssignment::NewIdentity(idx) => part_accepted.push(PseudoSample {
                            id: part.ids()[i],
                            features: x.clone(),
                            label: bank.class_of(idx),
                            confidence: 1.0,
                        }),
                        OpenSetAssignment::Dropped => dropped.push(part.ids()[i]),
                    }
                }
                let pairs: Vec<(u64, usize)> =
                    part_accepted.iter().map(|p| (p.id, p.label)).collect();
                let (prec, judged) = crate::eval::open_set_pseudo_precision(
                    &pairs,
                    bank.base_classes(),
                    part,
                )?;
                pseudo_known += judged;
                pseudo_correct_weight += prec * judged as f64;
                accepted.extend(part_accepted);
            } else {
                let outcome = label_part(&agents, part, &cfg.margin, &label_cfg)?;
                let pairs: Vec<(u64, usize)> =
                    outcome.accepted.iter().map(|p| (p.id, p.label)).collect();
                let stats = crate::eval::pseudo_label_accuracy(&pairs, part)?;
                if !stats.empty {
                    let judged = pairs.len();
                    pseudo_known += judged;
                    pseudo_correct_weight += stats.precision * judged as f64;
                }
                accepted.extend(outcome.accepted);
                dropped.extend(outcome.dropped);
            }
        }

        let confident_fraction = if total_samples == 0 {
            0.0
        } else {
            accepted.len() as f64 / total_samples as f64
        };
        let pseudo_precision = (pseudo_known > 0)
            .then(|| pseudo_correct_weight / pseudo_known as f64);
        let pseudo_coverage = (total_samples > 0)
            .then(|| accepted.len() as f64 / total_samples as f64);

        // threshold relief when labelling stalls
        if accepted.is_empty() {
            consecutive_empty += 1;
            if consecutive_empty >= 2 && !remaining_parts.is_empty() && threshold > 0.5 {
                threshold = (threshold - 0.05).max(0.5);
                events.push(format!("lowered confidence threshold to {threshold}"));
                consecutive_empty = 0;
            }
        } else {
            consecutive_empty = 0;
        }

        // grow class space for identities founded this loop
        if let Some(bank) = bank.as_ref() {
            if bank.len() > bank_len_before {
                let new_total = bank.base_classes() + bank.len();
                labelled.grow_classes(new_total);
                for agent in agents.iter_mut() {
                    for idx in bank_len_before..bank.len() {
                        agent.head.append_class(bank.prototype(idx))?;
                    }
                }
            }
        }

        update_labelled(&mut labelled, &accepted, t)?;
        dropped_log.push((t, dropped));

        // re-estimate and retrain on the enlarged set
        let est = estimate_noise_rate(&labelled, &agents[0], &cfg.estimator, &mut ctx.estimate_rng)?;
        rate_percent = 100.0 * est.rate;
        let mut group = cfg.group.clone();
        group.noise_rate_percent = rate_percent;
        let loop_sgd = cfg.sgd.clone().with_default_schedule(cfg.loop_iterations);
        let records = gn_train(
            &mut agents,
            &labelled,
            &group,
            &cfg.margin,
            &loop_sgd,
            cfg.loop_iterations,
            0,
            0,
            &mut ctx.train_rng,
        )?;
        logs.push(PhaseLog {
            phase: format!("loop-{t}"),
            records,
        });

        let row = loop_row(
            t,
            &agents,
            &labelled,
            est.rate,
            pseudo_precision,
            pseudo_coverage,
            confident_fraction,
            &bank,
            events,
            &ctx,
            cfg,
        )?;
        observer.on_state(&agents, &row)?;
        metrics.push(row);
    }

    Ok(NrollOutcome {
        agents,
        labelled,
        metrics,
        dropped: dropped_log,
        logs,
        bank,
    })
}

#[allow(clippy::too_many_arguments)]
fn loop_row(
    t: u32,
    agents: &[Agent],
    labelled: &LabelledSet,
    rate: f64,
    pseudo_precision: Option<f64>,
    pseudo_coverage: Option<f64>,
    confident_fraction: f64,
    bank: &Option<PrototypeBank>,
    events: Vec<String>,
    ctx: &LoopContext,
    cfg: &NrollConfig,
) -> Result<LoopMetrics> {
    let (test_accuracy, verification_accuracy) = match ctx.test {
        Some(test) => {
            let agent = &agents[cfg.eval.agent_index.min(agents.len() - 1)];
            let report = crate::eval::full_evaluation(
                agent,
                test,
                &cfg.margin,
                &cfg.eval,
                derive_seed(ctx.eval_seed, &format!("loop-{t}")),
            )?;
            (Some(report.test_accuracy), Some(report.verification_accuracy))
        }
        None => (None, None),
    };
    Ok(LoopMetrics {
        loop_index: t,
        labelled_size: labelled.len(),
        estimated_noise_rate: rate,
        confident_fraction,
        pseudo_precision,
        pseudo_coverage,
        test_accuracy,
        verification_accuracy,
        new_identities: bank.as_ref().map(|b| b.len()).unwrap_or(0),
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, inject_noise, split_parts, NoiseMode};
    use crate::learner::{ClassHead, EncoderParams};

    fn fixed_agent(rows: &[Vec<f64>]) -> Agent {
        Agent::from_parts(
            EncoderParams::identity(rows[0].len()),
            ClassHead::from_rows(rows).unwrap(),
        )
    }

    #[test]
    fn labelling_takes_the_global_maximum_across_agents() {
        // agent embeddings are identity; heads differ so posteriors differ
        let a1 = fixed_agent(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let a2 = fixed_agent(&[vec![0.9, 0.1], vec![0.1, 0.9], vec![-0.9, 0.1]]);
        let part = UnlabelledPart::new(
            vec![0],
            vec![vec![0.1, 0.9]],
            vec![Some(1)],
        );
        let cfg = LabelConfig {
            threshold: 0.8,
            ..LabelConfig::default()
        };
        let out = label_part(&[a1, a2], &part, &MarginConfig::default(), &cfg).unwrap();
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].label, 1);
        assert!(out.accepted[0].confidence >= 0.8);
    }

    #[test]
    fn unreachable_threshold_drops_everything() {
        let agent = fixed_agent(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let part = UnlabelledPart::new(
            vec![0, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![None, None],
        );
        let cfg = LabelConfig {
            threshold: 1.0 + 1e-9,
            ..LabelConfig::default()
        };
        let out = label_part(&[agent], &part, &MarginConfig::default(), &cfg).unwrap();
        assert!(out.accepted.is_empty());
        assert_eq!(out.dropped, vec![0, 1]);
        assert_eq!(out.confident_fraction, 0.0);
    }

    #[test]
    fn vacuous_threshold_keeps_everything() {
        let agent = fixed_agent(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let part = UnlabelledPart::new(
            vec![5, 6, 7],
            vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![-1.0, 0.0]],
            vec![None, None, None],
        );
        let cfg = LabelConfig {
            threshold: 1e-12,
            ..LabelConfig::default()
        };
        let out = label_part(&[agent], &part, &MarginConfig::default(), &cfg).unwrap();
        assert_eq!(out.accepted.len(), 3);
        assert!(out.dropped.is_empty());
        assert_eq!(out.accepted[0].label, 0);
        assert_eq!(out.accepted[1].label, 1);
    }

    #[test]
    fn update_labelled_tracks_provenance_and_rejects_collisions() {
        let mut set = gen_synthetic(3, 4, 4, 0.1, 1).unwrap();
        let before = set.len();
        let pseudo = vec![
            PseudoSample {
                id: 1000,
                features: vec![0.0; 4],
                label: 1,
                confidence: 0.9,
            },
            PseudoSample {
                id: 1001,
                features: vec![0.0; 4],
                label: 2,
                confidence: 0.95,
            },
        ];
        update_labelled(&mut set, &pseudo, 3).unwrap();
        assert_eq!(set.len(), before + 2);
        assert_eq!(set.added_in_loop(3).len(), 2);
        assert_eq!(set.added_in_loop(1).len(), 0);
        // empty update leaves the set unchanged
        update_labelled(&mut set, &[], 4).unwrap();
        assert_eq!(set.len(), before + 2);
        // id collision errors
        let dup = vec![PseudoSample {
            id: 1000,
            features: vec![0.0; 4],
            label: 0,
            confidence: 0.9,
        }];
        assert!(update_labelled(&mut set, &dup, 5).is_err());
    }

    #[test]
    fn prototype_ema_matches_hand_arithmetic() {
        let mut bank = PrototypeBank::new(2, 0.9, 0.5);
        let idx = bank.push(&[1.0, 0.0]).unwrap();
        bank.update(idx, &[0.0, 1.0]);
        let p = bank.prototype(idx);
        // 0.9*(1,0) + 0.1*(0,1) = (0.9, 0.1), renormalized
        assert!((p[0] - 0.9938837346736189).abs() < 1e-12, "{}", p[0]);
        assert!((p[1] - 0.11043152607484655).abs() < 1e-12, "{}", p[1]);
        assert!(bank.max_norm_error() < 1e-12);
    }

    #[test]
    fn prototype_is_fixed_point_of_its_own_update() {
        let mut bank = PrototypeBank::new(0, 0.9, 0.5);
        let idx = bank.push(&[0.6, 0.8]).unwrap();
        bank.update(idx, &[0.6, 0.8]);
        let p = bank.prototype(idx);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn open_set_assignment_routes_far_features_to_new_identities() {
        let agent = fixed_agent(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let mut bank = PrototypeBank::new(2, 0.9, 0.5);
        let cfg = LabelConfig {
            threshold: 0.8,
            ..LabelConfig::default()
        };
        let margin = MarginConfig::default();
        // far from both class weights: founds identity 0
        let a = open_set_assign(
            &[agent.clone()],
            &[0.0, 0.0, 1.0],
            &mut bank,
            &margin,
            &cfg,
        )
        .unwrap();
        assert_eq!(a, OpenSetAssignment::NewIdentity(0));
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.class_of(0), 2);
        // close to that prototype: joins it and the EMA moves the prototype
        let b = open_set_assign(
            &[agent.clone()],
            &[0.0, 0.1, 0.99],
            &mut bank,
            &margin,
            &cfg,
        )
        .unwrap();
        assert_eq!(b, OpenSetAssignment::NewIdentity(0));
        assert_eq!(bank.member_count(0), 2);
        assert!(bank.max_norm_error() < 1e-9);
        // close to a known class: falls back to threshold labelling
        let c = open_set_assign(&[agent], &[0.99, 0.05, 0.0], &mut bank, &margin, &cfg).unwrap();
        match c {
            OpenSetAssignment::KnownClass(0, conf) => assert!(conf >= 0.8),
            other => panic!("expected known class 0, got {other:?}"),
        }
    }

    #[test]
    fn nroll_without_parts_is_plain_training() {
        let set = gen_synthetic(4, 12, 8, 0.15, 3).unwrap();
        let noisy = inject_noise(&set, 0.2, NoiseMode::Symmetric, 4).unwrap();
        let cfg = NrollConfig {
            group: GroupConfig {
                agents: 2,
                exchange_degree: 1,
                batch_size: 16,
                ..GroupConfig::default()
            },
            hidden_dims: vec![16],
            embedding_dim: 8,
            pretrain_iterations: 30,
            loop_iterations: 10,
            initial_noise_rate: Some(20.0),
            seed: 5,
            ..NrollConfig::default()
        };
        let out = run_nroll(noisy.clone(), Vec::new(), None, &cfg, &mut NoopObserver).unwrap();
        assert_eq!(out.metrics.len(), 1); // pretrain row only
        assert_eq!(out.labelled.len(), noisy.len());
        assert!(out.logs.iter().any(|l| l.phase == "pretrain"));
    }

    #[test]
    fn nroll_consumes_every_part_and_loses_no_sample() {
        let set = gen_synthetic(6, 20, 8, 0.12, 7).unwrap();
        let noisy = inject_noise(&set, 0.3, NoiseMode::Symmetric, 8).unwrap();
        let (seed_l, parts) = split_parts(&noisy, 4, 9).unwrap();
        let part_ids: Vec<std::collections::BTreeSet<u64>> = parts
            .iter()
            .map(|p| p.ids().iter().copied().collect())
            .collect();
        let cfg = NrollConfig {
            group: GroupConfig {
                agents: 2,
                exchange_degree: 1,
                batch_size: 16,
                ..GroupConfig::default()
            },
            hidden_dims: vec![16],
            embedding_dim: 8,
            pretrain_iterations: 120,
            loop_iterations: 60,
            initial_noise_rate: Some(30.0),
            label: LabelConfig {
                threshold: 0.7,
                ..LabelConfig::default()
            },
            seed: 11,
            ..NrollConfig::default()
        };
        let out = run_nroll(seed_l.clone(), parts, Some(&set), &cfg, &mut NoopObserver).unwrap();
        assert_eq!(out.metrics.len(), 4); // pretrain + 3 loops
        // |D_l| never shrinks
        for w in out.metrics.windows(2) {
            assert!(w[1].labelled_size >= w[0].labelled_size);
        }
        // every consumed sample is either labelled or in the dropped log
        let labelled_ids: std::collections::BTreeSet<u64> =
            out.labelled.samples().iter().map(|s| s.id).collect();
        for (t, ids) in part_ids.iter().enumerate() {
            let drop_set: std::collections::BTreeSet<u64> = out
                .dropped
                .iter()
                .find(|(loop_t, _)| *loop_t == (t + 1) as u32)
                .map(|(_, d)| d.iter().copied().collect())
                .unwrap();
            for id in ids {
                assert!(
                    labelled_ids.contains(id) || drop_set.contains(id),
                    "sample {id} from part {t} was silently lost"
                );
            }
        }
        // determinism: the same config reruns identically
        let (seed_l2, parts2) = split_parts(&noisy, 4, 9).unwrap();
        assert_eq!(seed_l2.len(), seed_l.len());
        let out2 = run_nroll(seed_l2, parts2, Some(&set), &cfg, &mut NoopObserver).unwrap();
        let j1 = serde_json::to_string(&out.metrics).unwrap();
        let j2 = serde_json::to_string(&out2.metrics).unwrap();
        assert_eq!(j1, j2);
    }
}
