//! Evaluation: classification accuracy, cosine pair verification with ROC,
//! rank-1 identification, and pseudo-label precision/coverage against the
//! hidden ground truth of unlabelled parts.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelledSet, UnlabelledPart};
use crate::error::{Error, Result};
use crate::learner::{Agent, MarginConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Which agent's embeddings to evaluate.
    pub agent_index: usize,
    pub verification_pairs: usize,
    pub gallery_per_class: usize,
    pub fpr_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            agent_index: 0,
            verification_pairs: 2000,
            gallery_per_class: 2,
            fpr_grid: vec![1e-1, 1e-2],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub accuracy: f64,
    pub best_threshold: f64,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    /// Precision over accepted samples; 1.0 with `empty` set when nothing
    /// was accepted.
    pub precision: f64,
    pub coverage: f64,
    pub empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_accuracy: f64,
    pub verification_accuracy: f64,
    pub verification_threshold: f64,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub rank1: f64,
    pub pseudo_precision: Option<f64>,
    pub pseudo_coverage: Option<f64>,
}

/// Sweeps the decision threshold over the observed similarities and reports
/// the best split accuracy, the ROC, and TPR at the fixed FPR grid.
pub fn verification_from_scores(
    same: &[f64],
    different: &[f64],
    fpr_grid: &[f64],
) -> Result<VerificationOutcome> {
    if same.len() < 10 || different.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 pairs of each polarity, got {} same / {} different",
            same.len(),
            different.len()
        )));
    }
    let n_same = same.len() as f64;
    let n_diff = different.len() as f64;

    let mut scored: Vec<(f64, bool)> = same
        .iter()
        .map(|&s| (s, true))
        .chain(different.iter().map(|&s| (s, false)))
        .collect();
    // descending similarity; "predict same" includes everything >= threshold
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut best_correct = n_diff; // threshold above max: everything "different"
    let mut best_threshold = f64::INFINITY;
    let mut roc = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        // consume the whole tie group so the ROC has one point per threshold
        while i < scored.len() && scored[i].0 == threshold {
            if scored[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let correct = tp + (n_diff - fp);
        if correct > best_correct {
            best_correct = correct;
            best_threshold = threshold;
        }
        roc.push(RocPoint {
            threshold,
            tpr: tp / n_same,
            fpr: fp / n_diff,
        });
    }

    let tpr_at_fpr = fpr_grid
        .iter()
        .map(|&target| {
            let tpr = roc
                .iter()
                .filter(|p| p.fpr <= target)
                .map(|p| p.tpr)
                .fold(0.0, f64::max);
            (target, tpr)
        })
        .collect();

    Ok(VerificationOutcome {
        accuracy: best_correct / (n_same + n_diff),
        best_threshold,
        tpr_at_fpr,
        roc,
    })
}

/// Embeds the pairs and sweeps thresholds. `pairs` holds feature pairs with
/// a same-identity flag.
pub fn verification_accuracy(
    agent: &Agent,
    pairs: &[(Vec<f64>, Vec<f64>, bool)],
    fpr_grid: &[f64],
) -> Result<VerificationOutcome> {
    let sims: Result<Vec<(f64, bool)>> = pairs
        .par_iter()
        .map(|(a, b, same)| {
            let fa = agent.embed(a)?;
            let fb = agent.embed(b)?;
            let dot: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| x * y).sum();
            Ok((dot, *same))
        })
        .collect();
    let sims = sims?;
    let same: Vec<f64> = sims.iter().filter(|(_, s)| *s).map(|(v, _)| *v).collect();
    let diff: Vec<f64> = sims.iter().filter(|(_, s)| !*s).map(|(v, _)| *v).collect();
    verification_from_scores(&same, &diff, fpr_grid)
}

/// Fraction of probes whose nearest gallery embedding (cosine) shares the
/// probe's identity. Ties resolve to the earliest gallery entry.
pub fn rank1(
    agent: &Agent,
    gallery: &[(Vec<f64>, usize)],
    probes: &[(Vec<f64>, usize)],
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidInput("no probes".into()));
    }
    let gallery_emb: Result<Vec<(Vec<f64>, usize)>> = gallery
        .par_iter()
        .map(|(x, id)| Ok((agent.embed(x)?, *id)))
        .collect();
    let gallery_emb = gallery_emb?;
    let hits: Result<Vec<bool>> = probes
        .par_iter()
        .map(|(x, id)| {
            let f = agent.embed(x)?;
            let mut best = f64::NEG_INFINITY;
            let mut best_id = usize::MAX;
            for (g, gid) in &gallery_emb {
                let dot: f64 = f.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                if dot > best {
                    best = dot;
                    best_id = *gid;
                }
            }
            Ok(best_id == *id)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Precision and coverage of accepted pseudo-labels against the hidden
/// ground truth of the part they came from.
pub fn pseudo_label_accuracy(
    accepted: &[(u64, usize)],
    part: &UnlabelledPart,
) -> Result<PseudoLabelStats> {
    let truth = part.ground_truth_for_eval();
    if accepted.is_empty() {
        return Ok(PseudoLabelStats {
            precision: 1.0,
            coverage: 0.0,
            empty: true,
        });
    }
    let mut known = 0usize;
    let mut correct = 0usize;
    for (id, label) in accepted {
        match truth.get(id) {
            Some(Some(gt)) => {
                known += 1;
                if gt == label {
                    correct += 1;
                }
            }
            Some(None) => {}
            None => {
                return Err(Error::InvalidInput(format!(
                    "accepted id {id} does not belong to the part"
                )))
            }
        }
    }
    let precision = if known == 0 {
        1.0
    } else {
        correct as f64 / known as f64
    };
    Ok(PseudoLabelStats {
        precision,
        coverage: accepted.len() as f64 / part.len() as f64,
        empty: false,
    })
}

/// Open-set pseudo-label precision: samples assigned to an original class
/// are judged against the hidden truth; samples routed to new identities are
/// judged by purity (the dominant truth within that identity counts as
/// correct). Returns (precision, judged count).
pub fn open_set_pseudo_precision(
    assigned: &[(u64, usize)],
    base_classes: usize,
    part: &UnlabelledPart,
) -> Result<(f64, usize)> {
    let truth = part.ground_truth_for_eval();
    let mut known_correct = 0usize;
    let mut known_total = 0usize;
    let mut per_new: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (id, label) in assigned {
        let gt = match truth.get(id) {
            Some(Some(gt)) => *gt,
            _ => continue,
        };
        if *label < base_classes {
            known_total += 1;
            if gt == *label {
                known_correct += 1;
            }
        } else {
            per_new.entry(*label).or_default().push(gt);
        }
    }
    let mut new_correct = 0usize;
    let mut new_total = 0usize;
    for members in per_new.values() {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for gt in members {
            *counts.entry(*gt).or_insert(0) += 1;
        }
        let dominant = counts.values().copied().max().unwrap_or(0);
        new_correct += dominant;
        new_total += members.len();
    }
    let total = known_total + new_total;
    if total == 0 {
        return Ok((1.0, 0));
    }
    Ok(((known_correct + new_correct) as f64 / total as f64, total))
}

/// Draws balanced same/different verification pairs from a labelled set.
pub fn make_verification_pairs(
    set: &LabelledSet,
    n_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, Vec<f64>, bool)>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in set.samples().iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= 2).collect();
    if multi.is_empty() || by_class.len() < 2 {
        return Err(Error::InvalidInput(
            "need classes with >= 2 members and >= 2 classes".into(),
        ));
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let samples = set.samples();
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        if k % 2 == 0 {
            let members = multi[rand::Rng::random_range(&mut *rng, 0..multi.len())];
            let a = rand::Rng::random_range(&mut *rng, 0..members.len());
            let mut b = rand::Rng::random_range(&mut *rng, 0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            pairs.push((
                samples[members[a]].features.clone(),
                samples[members[b]].features.clone(),
                true,
            ));
        } else {
            let ca = rand::Rng::random_range(&mut *rng, 0..classes.len());
            let mut cb = rand::Rng::random_range(&mut *rng, 0..classes.len() - 1);
            if cb >= ca {
                cb += 1;
            }
            let a = classes[ca][rand::Rng::random_range(&mut *rng, 0..classes[ca].len())];
            let b = classes[cb][rand::Rng::random_range(&mut *rng, 0..classes[cb].len())];
            pairs.push((
                samples[a].features.clone(),
                samples[b].features.clone(),
                false,
            ));
        }
    }
    Ok(pairs)
}

/// Splits a labelled set into gallery and probe feature lists keyed by
/// identity.
pub fn gallery_probe_split(
    set: &LabelledSet,
    gallery_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in set.samples().iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let samples = set.samples();
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for (label, mut members) in by_class {
        members.shuffle(rng);
        // keep at least one probe per multi-member class
        let take = gallery_per_class.min(members.len().saturating_sub(1)).max(1);
        for (k, &i) in members.iter().enumerate() {
            let entry = (samples[i].features.clone(), label);
            if k < take {
                gallery.push(entry);
            } else {
                probes.push(entry);
            }
        }
    }
    (gallery, probes)
}

/// Runs the full evaluation suite of one agent on a held-out labelled set.
pub fn full_evaluation(
    agent: &Agent,
    test: &LabelledSet,
    margin: &MarginConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let test_accuracy = crate::groupnet::classification_accuracy(agent, test, margin)?;
    let mut rng = crate::rng::stream_rng(seed, "eval-pairs");
    let pairs = make_verification_pairs(test, cfg.verification_pairs, &mut rng)?;
    let verification = verification_accuracy(agent, &pairs, &cfg.fpr_grid)?;
    let mut rng = crate::rng::stream_rng(seed, "eval-gallery");
    let (gallery, probes) = gallery_probe_split(test, cfg.gallery_per_class, &mut rng);
    let rank1 = rank1(agent, &gallery, &probes)?;
    Ok(EvalReport {
        test_accuracy,
        verification_accuracy: verification.accuracy,
        verification_threshold: verification.best_threshold,
        tpr_at_fpr: verification.tpr_at_fpr,
        rank1,
        pseudo_precision: None,
        pseudo_coverage: None,
    })
}
