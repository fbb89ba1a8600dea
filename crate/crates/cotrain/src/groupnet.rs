//! The multi-agent training engine: per-batch confidence partitioning by
//! ranked loss, ring broadcast of medium-confidence samples with an optional
//! shuffle of agent positions, greedy selection of received recommendations,
//! and the balanced per-agent group loss.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelledSet;
use crate::error::{Error, Result};
use crate::learner::{Agent, LossKind, MarginConfig, ParamGrads, SgdConfig};

/// Configuration of the agent group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupConfig {
    /// Number of agents M.
    pub agents: usize,
    /// How many peers each agent broadcasts to (1..=M-1).
    pub exchange_degree: usize,
    /// Randomize agent positions on the broadcast circle each iteration.
    pub shuffle: bool,
    /// Estimated noise rate in percent; sets the low-confidence cutoff.
    pub noise_rate_percent: f64,
    pub batch_size: usize,
    /// Fraction of the run spent training on full batches before
    /// partitioning starts.
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            agents: 4,
            exchange_degree: 3,
            shuffle: true,
            noise_rate_percent: 0.0,
            batch_size: 128,
            warmup_fraction: 0.1,
            seed: 0,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents < 2 {
            return Err(Error::InvalidConfig("need at least 2 agents".into()));
        }
        if self.exchange_degree == 0 || self.exchange_degree > self.agents - 1 {
            return Err(Error::InvalidConfig(format!(
                "exchange degree must be in 1..={}, got {}",
                self.agents - 1,
                self.exchange_degree
            )));
        }
        if !(0.0..100.0).contains(&self.noise_rate_percent) {
            return Err(Error::InvalidConfig(
                "noise rate percent must be in [0,100)".into(),
            ));
        }
        if self.batch_size < self.agents {
            return Err(Error::InvalidConfig(
                "batch size must be at least the agent count".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig("warmup fraction must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Per-batch confidence partition. Index sets are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPartition {
    /// Samples no agent ranked into its low-confidence tail.
    pub hc: Vec<usize>,
    pub lc_per_agent: Vec<Vec<usize>>,
    pub mc_per_agent: Vec<Vec<usize>>,
}

impl BatchPartition {
    /// Checks the tiling invariants: for each agent, LC, MC and HC are
    /// pairwise disjoint and cover the batch, every LC has the cutoff size
    /// and HC is the intersection of the non-LC sets.
    pub fn check_tiling(&self, batch: usize, r_percent: f64) -> Result<()> {
        let cutoff = (r_percent / 100.0 * batch as f64).floor() as usize;
        for (m, lc) in self.lc_per_agent.iter().enumerate() {
            if lc.len() != cutoff {
                return Err(Error::InvalidInput(format!(
                    "agent {m}: |LC| = {} != floor(r/100*B) = {cutoff}",
                    lc.len()
                )));
            }
            let mc = &self.mc_per_agent[m];
            let mut all: Vec<usize> = lc.iter().chain(mc.iter()).chain(self.hc.iter()).copied().collect();
            all.sort_unstable();
            let expect: Vec<usize> = (0..batch).collect();
            if all != expect {
                return Err(Error::InvalidInput(format!(
                    "agent {m}: LC/MC/HC do not tile the batch"
                )));
            }
        }
        // HC must be exactly the intersection of the non-LC sets
        for &i in &self.hc {
            for (m, lc) in self.lc_per_agent.iter().enumerate() {
                if lc.binary_search(&i).is_ok() {
                    return Err(Error::InvalidInput(format!(
                        "HC sample {i} sits in agent {m}'s LC"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ranks each agent's losses and splits the batch. The low-confidence tail
/// is the `floor(r/100 * B)` largest losses per agent (ties: lower index
/// first); the high-confidence set is the intersection of all non-LC sets;
/// the rest is per-agent medium confidence.
pub fn partition_batch(losses: &[Vec<f64>], r_percent: f64) -> Result<BatchPartition> {
    if losses.is_empty() || losses[0].is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if !(0.0..100.0).contains(&r_percent) {
        return Err(Error::InvalidInput("noise rate must be in [0,100)".into()));
    }
    let batch = losses[0].len();
    for (m, row) in losses.iter().enumerate() {
        if row.len() != batch {
            return Err(Error::InvalidInput(format!("agent {m} has ragged losses")));
        }
        if row.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput(format!("agent {m} has non-finite losses")));
        }
    }
    let cutoff = (r_percent / 100.0 * batch as f64).floor() as usize;

    let mut lc_per_agent = Vec::with_capacity(losses.len());
    let mut non_lc = vec![0usize; batch]; // count of agents keeping each index
    for row in losses {
        let mut order: Vec<usize> = (0..batch).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        let mut lc: Vec<usize> = order[..cutoff].to_vec();
        lc.sort_unstable();
        for i in &order[cutoff..] {
            non_lc[*i] += 1;
        }
        lc_per_agent.push(lc);
    }
    let hc: Vec<usize> = (0..batch).filter(|&i| non_lc[i] == losses.len()).collect();
    let mc_per_agent: Vec<Vec<usize>> = lc_per_agent
        .iter()
        .map(|lc| {
            (0..batch)
                .filter(|i| lc.binary_search(i).is_err() && hc.binary_search(i).is_err())
                .collect()
        })
        .collect();
    Ok(BatchPartition {
        hc,
        lc_per_agent,
        mc_per_agent,
    })
}

/// Who sends to whom this iteration. `positions[p]` is the agent seated at
/// circle position `p`; the agent at position `p` broadcasts to the next
/// `alpha` positions anticlockwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangePlan {
    pub positions: Vec<usize>,
    /// recipients[m] = ordered agents that agent m sends its MC to.
    pub recipients: Vec<Vec<usize>>,
}

impl ExchangePlan {
    pub fn senders_of(&self, recipient: usize) -> Vec<usize> {
        let mut senders: Vec<usize> = (0..self.recipients.len())
            .filter(|&s| self.recipients[s].contains(&recipient))
            .collect();
        senders.sort_unstable();
        senders
    }
}

/// Draws the seating permutation and derives the broadcast plan. The
/// generator is always advanced by one shuffle so shuffle-on and shuffle-off
/// runs consume the stream identically; the drawn permutation is only used
/// when `shuffle` is set and the degree is below `M-1` (at full degree the
/// seating is irrelevant and the identity is reported).
pub fn make_exchange_plan(
    agents: usize,
    alpha: usize,
    shuffle: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ExchangePlan> {
    if agents < 2 {
        return Err(Error::InvalidInput("need at least 2 agents".into()));
    }
    if alpha == 0 || alpha >= agents {
        return Err(Error::InvalidInput(format!(
            "exchange degree {alpha} out of range for {agents} agents"
        )));
    }
    let mut drawn: Vec<usize> = (0..agents).collect();
    drawn.shuffle(rng);
    let positions = if shuffle && alpha < agents - 1 {
        drawn
    } else {
        (0..agents).collect()
    };
    let mut recipients = vec![Vec::with_capacity(alpha); agents];
    for p in 0..agents {
        let sender = positions[p];
        for step in 1..=alpha {
            recipients[sender].push(positions[(p + step) % agents]);
        }
    }
    Ok(ExchangePlan {
        positions,
        recipients,
    })
}

/// Greedy pick from the recommendations an agent received: deduplicate,
/// prefer samples recommended by more senders, break ties by lower mean
/// sender loss then lower index, and take at most `own_mc_size`.
pub fn select_received_mc(
    received: &[(usize, &[usize])],
    losses: &[Vec<f64>],
    own_mc_size: usize,
) -> Vec<usize> {
    use std::collections::BTreeMap;
    let mut stats: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (sender, indices) in received {
        for &i in *indices {
            let entry = stats.entry(i).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += losses[*sender][i];
        }
    }
    let mut ranked: Vec<(usize, usize, f64)> = stats
        .into_iter()
        .map(|(i, (count, loss_sum))| (i, count, loss_sum / count as f64))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| a.2.partial_cmp(&b.2).unwrap())
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked
        .into_iter()
        .take(own_mc_size)
        .map(|(i, _, _)| i)
        .collect()
}

/// Margin/scale ramp during warmup. Full-strength margin losses blow up a
/// freshly initialized encoder (the scaled gradients kill most ReLU units
/// within a few steps), so warmup iterations ease both in.
fn ramped_margin(cfg: &MarginConfig, it: usize, warmup_iters: usize) -> MarginConfig {
    if it >= warmup_iters {
        return *cfg;
    }
    let f = (it + 1) as f64 / (warmup_iters + 1) as f64;
    MarginConfig {
        margin: cfg.margin * f,
        scale: cfg.scale * (0.125 + 0.875 * f),
        mv_t: cfg.mv_t,
    }
}

/// Balanced group loss: MV-softmax over the high-confidence samples plus
/// Arc-softmax over the selected received medium-confidence samples, both
/// normalized by the combined count.
pub fn group_loss(
    agent: &Agent,
    hc: &[(&[f64], usize)],
    mc: &[(&[f64], usize)],
    margin: &MarginConfig,
) -> Result<(f64, ParamGrads)> {
    group_loss_with(agent, hc, mc, margin, LossKind::Mv)
}

/// As [`group_loss`] but with a configurable high-confidence criterion.
/// During warmup the HC set still contains most of the noise, and MV's
/// hard-negative inflation amplifies exactly the wrongly labelled samples,
/// so the ramp phase trains HC with Arc instead.
pub fn group_loss_with(
    agent: &Agent,
    hc: &[(&[f64], usize)],
    mc: &[(&[f64], usize)],
    margin: &MarginConfig,
    hc_kind: LossKind,
) -> Result<(f64, ParamGrads)> {
    if hc.is_empty() && mc.is_empty() {
        return Err(Error::InvalidInput("empty effective batch".into()));
    }
    let items: Vec<(&[f64], usize, LossKind)> = hc
        .iter()
        .map(|(x, y)| (*x, *y, hc_kind))
        .chain(mc.iter().map(|(x, y)| (*x, *y, LossKind::Arc)))
        .collect();
    agent.batch_loss_grads(&items, margin)
}

/// One line of the per-iteration training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub warmup: bool,
    /// Mean loss used for each agent's update; null when the agent skipped.
    pub mean_loss: Vec<Option<f64>>,
    pub hc_size: usize,
    pub mc_selected: Vec<usize>,
    pub permutation: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<String>,
}

/// Trains the agent group on a labelled set. Warmup iterations train each
/// agent on the full batch with Arc-softmax; afterwards every iteration
/// ranks, partitions, exchanges and applies one step of the group loss per
/// agent. The caller owns the orchestrator RNG that drives batch sampling
/// and seating shuffles. `iteration_offset` shifts the logged iteration
/// numbers and the learning-rate schedule, so a run can be split into
/// phases without restarting the schedule.
#[allow(clippy::too_many_arguments)]
pub fn gn_train(
    agents: &mut [Agent],
    data: &LabelledSet,
    group: &GroupConfig,
    margin: &MarginConfig,
    sgd: &SgdConfig,
    iterations: usize,
    warmup_iters: usize,
    iteration_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<IterationRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    for (m, agent) in agents.iter().enumerate() {
        if agent.head.classes() < data.class_count() {
            return Err(Error::InvalidInput(format!(
                "agent {m} has {} classes, dataset needs {}",
                agent.head.classes(),
                data.class_count()
            )));
        }
    }
    let n = data.len();
    let batch_size = group.batch_size.min(n);
    let samples = data.samples();
    let mut log = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let step = iteration_offset + it;
        let batch_idx: Vec<usize> = if batch_size == n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, batch_size).into_vec()
        };
        let xs: Vec<&[f64]> = batch_idx
            .iter()
            .map(|&i| samples[i].features.as_slice())
            .collect();
        let ys: Vec<usize> = batch_idx.iter().map(|&i| samples[i].label).collect();

        // Warmup eases in both the margin strength and the low-confidence
        // cutoff: discarding by rank while the losses are still random
        // throws away good data, but training full-strength on every noisy
        // label collapses the embedding space. The ramp avoids both.
        let in_warmup = it < warmup_iters;
        let warm_margin = ramped_margin(margin, it, warmup_iters);
        let ramp = if in_warmup {
            (it + 1) as f64 / (warmup_iters + 1) as f64
        } else {
            1.0
        };
        let effective_rate = group.noise_rate_percent * ramp;

        // phase 1: every agent scores the shared batch with its ranking loss
        let losses: Result<Vec<Vec<f64>>> = agents
            .par_iter()
            .map(|agent| {
                xs.iter()
                    .zip(ys.iter())
                    .map(|(x, y)| agent.sample_loss(x, *y, &warm_margin, LossKind::Arc))
                    .collect()
            })
            .collect();
        let losses = losses?;

        let partition = partition_batch(&losses, effective_rate)?;
        debug_assert!(partition.check_tiling(batch_size, effective_rate).is_ok());
        let plan = make_exchange_plan(agents.len(), group.exchange_degree, group.shuffle, rng)?;

        let selected: Vec<Vec<usize>> = (0..agents.len())
            .map(|m| {
                let received: Vec<(usize, &[usize])> = plan
                    .senders_of(m)
                    .into_iter()
                    .map(|s| (s, partition.mc_per_agent[s].as_slice()))
                    .collect();
                select_received_mc(&received, &losses, partition.mc_per_agent[m].len())
            })
            .collect();

        // phase 2: per-agent group loss and step
        let updates: Vec<Result<Option<(f64, ParamGrads)>>> = agents
            .par_iter()
            .enumerate()
            .map(|(m, agent)| {
                let hc: Vec<(&[f64], usize)> =
                    partition.hc.iter().map(|&i| (xs[i], ys[i])).collect();
                let mc: Vec<(&[f64], usize)> =
                    selected[m].iter().map(|&i| (xs[i], ys[i])).collect();
                if hc.is_empty() && mc.is_empty() {
                    return Ok(None);
                }
                let hc_kind = if in_warmup { LossKind::Arc } else { LossKind::Mv };
                group_loss_with(agent, &hc, &mc, &warm_margin, hc_kind).map(Some)
            })
            .collect();

        let mut mean_loss = Vec::with_capacity(agents.len());
        let mut events = Vec::new();
        for (m, (agent, update)) in agents.iter_mut().zip(updates).enumerate() {
            match update? {
                Some((loss, grads)) => {
                    agent.sgd_step(&grads, sgd, step)?;
                    mean_loss.push(Some(loss));
                }
                None => {
                    events.push(format!("empty effective batch for agent {m}"));
                    mean_loss.push(None);
                }
            }
        }

        log.push(IterationRecord {
            iteration: step,
            warmup: in_warmup,
            mean_loss,
            hc_size: partition.hc.len(),
            mc_selected: selected.iter().map(|s| s.len()).collect(),
            permutation: plan.positions.clone(),
            events,
        });
    }
    Ok(log)
}

/// Plain single-agent reference: Arc-softmax on every batch sample, no
/// partitioning or exchange. Uses the same batch-sampling stream layout as
/// [`gn_train`] so runs are comparable.
#[allow(clippy::too_many_arguments)]
pub fn baseline_train(
    agent: &mut Agent,
    data: &LabelledSet,
    batch_size: usize,
    margin: &MarginConfig,
    sgd: &SgdConfig,
    iterations: usize,
    warmup_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<IterationRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let n = data.len();
    let batch_size = batch_size.min(n);
    let samples = data.samples();
    let mut log = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batch_idx: Vec<usize> = if batch_size == n {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, batch_size).into_vec()
        };
        let items: Vec<(&[f64], usize, LossKind)> = batch_idx
            .iter()
            .map(|&i| (samples[i].features.as_slice(), samples[i].label, LossKind::Arc))
            .collect();
        let warm_margin = ramped_margin(margin, it, warmup_iters);
        let (loss, grads) = agent.batch_loss_grads(&items, &warm_margin)?;
        agent.sgd_step(&grads, sgd, it)?;
        log.push(IterationRecord {
            iteration: it,
            warmup: false,
            mean_loss: vec![Some(loss)],
            hc_size: batch_size,
            mc_selected: vec![0],
            permutation: Vec::new(),
            events: Vec::new(),
        });
    }
    Ok(log)
}

/// Classification accuracy of one agent over a labelled set (argmax of the
/// posterior).
pub fn classification_accuracy(
    agent: &Agent,
    data: &LabelledSet,
    margin: &MarginConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let hits: Result<Vec<bool>> = data
        .samples()
        .par_iter()
        .map(|s| {
            let (_, post) = agent.forward_logits(&s.features, margin)?;
            let argmax = post
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            Ok(argmax == s.label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}
