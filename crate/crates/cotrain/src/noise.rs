//! Noise-rate estimation: sample intra-class pair cosine similarities under
//! a designated embedder, fit a two-component 1-D Gaussian mixture by EM,
//! and read the noise rate off the low-mean component.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabelledSet;
use crate::error::{Error, Result};
use crate::learner::Agent;

/// Components are unresolved below this mean separation; the data is then
/// treated as single-mode (clean).
const MIN_SEPARATION: f64 = 0.05;
const VARIANCE_FLOOR: f64 = 1e-4;

/// A fitted two-component 1-D Gaussian mixture, canonically ordered so that
/// `mean_low <= mean_high`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmFit {
    pub mean_low: f64,
    pub mean_high: f64,
    pub var_low: f64,
    pub var_high: f64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Components closer than the separation threshold.
    pub degenerate: bool,
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

/// The estimated label-noise rate of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Estimated fraction of wrongly labelled samples, in [0,1].
    pub rate: f64,
    pub degenerate: bool,
    pub pairs_used: usize,
    /// Mixture weight of the low-mean (noisy) pair component.
    pub pair_noise_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub max_pairs: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_pairs: 50_000,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// Uniformly samples up to `max_pairs` same-label pairs (without replacement
/// per pair, capped by the per-class pair count) and returns the cosine
/// similarities of their embeddings.
pub fn sample_intra_pairs(
    set: &LabelledSet,
    embedder: &Agent,
    max_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in set.samples().iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let classes: Vec<Vec<usize>> = by_class
        .into_values()
        .filter(|members| members.len() >= 2)
        .collect();
    if classes.is_empty() {
        return Err(Error::NoPairs);
    }
    let pair_counts: Vec<usize> = classes.iter().map(|m| m.len() * (m.len() - 1) / 2).collect();
    let total: usize = pair_counts.iter().sum();

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(total.min(max_pairs));
    if total <= max_pairs {
        for members in &classes {
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    pairs.push((members[i], members[j]));
                }
            }
        }
    } else {
        let picked = rand::seq::index::sample(rng, total, max_pairs);
        let mut offsets = Vec::with_capacity(classes.len());
        let mut acc = 0usize;
        for c in &pair_counts {
            offsets.push(acc);
            acc += c;
        }
        let mut global: Vec<usize> = picked.into_vec();
        global.sort_unstable();
        for g in global {
            let class = match offsets.binary_search(&g) {
                Ok(c) => c,
                Err(c) => c - 1,
            };
            let (i, j) = unrank_pair(classes[class].len(), g - offsets[class]);
            pairs.push((classes[class][i], classes[class][j]));
        }
    }

    // embed every referenced sample once
    let mut needed: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    needed.sort_unstable();
    needed.dedup();
    let embedded: Result<Vec<(usize, Vec<f64>)>> = needed
        .par_iter()
        .map(|&i| Ok((i, embedder.embed(&set.samples()[i].features)?)))
        .collect();
    let embedded = embedded?;
    let mut cache: std::collections::HashMap<usize, &Vec<f64>> =
        std::collections::HashMap::with_capacity(embedded.len());
    for (i, f) in &embedded {
        cache.insert(*i, f);
    }

    Ok(pairs
        .iter()
        .map(|&(a, b)| {
            let fa = cache[&a];
            let fb = cache[&b];
            let dot: f64 = fa.iter().zip(fb.iter()).map(|(x, y)| x * y).sum();
            dot.clamp(-1.0, 1.0)
        })
        .collect())
}

/// Maps a local pair rank to the (i, j) member indices, i < j, in
/// lexicographic order.
fn unrank_pair(n: usize, mut rank: usize) -> (usize, usize) {
    for i in 0..n - 1 {
        let row = n - 1 - i;
        if rank < row {
            return (i, i + 1 + rank);
        }
        rank -= row;
    }
    unreachable!("pair rank out of range");
}

fn gauss_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-(d * d) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// EM fit of a two-component mixture. Means start at the 25th/75th
/// percentiles with equal weights and a shared variance; iterates until the
/// log-likelihood change drops below `tol`.
pub fn fit_gmm2(values: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    let n = values.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!(
            "need at least 20 samples for the mixture fit, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite similarity".into()));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean: f64 = values.iter().sum::<f64>() / n as f64;
    let shared_var = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);

    let mut mu = [sorted[n / 4], sorted[(3 * n) / 4]];
    let mut var = [shared_var, shared_var];
    let mut w = [0.5, 0.5];

    let mut resp = vec![0.0f64; n]; // responsibility of component 0
    let mut loglik_trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;

    for it in 0..max_iters {
        iterations = it + 1;
        // E step
        let mut ll = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let p0 = w[0] * gauss_pdf(x, mu[0], var[0]);
            let p1 = w[1] * gauss_pdf(x, mu[1], var[1]);
            let total = p0 + p1;
            if total > 0.0 {
                resp[i] = p0 / total;
                ll += total.ln();
            } else {
                resp[i] = 0.5;
                ll += f64::MIN_POSITIVE.ln();
            }
        }
        loglik_trace.push(ll);

        // M step
        let r0: f64 = resp.iter().sum();
        let r1 = n as f64 - r0;
        if r0 > 1e-12 {
            w[0] = r0 / n as f64;
            mu[0] = values.iter().zip(resp.iter()).map(|(x, r)| x * r).sum::<f64>() / r0;
            var[0] = (values
                .iter()
                .zip(resp.iter())
                .map(|(x, r)| r * (x - mu[0]) * (x - mu[0]))
                .sum::<f64>()
                / r0)
                .max(VARIANCE_FLOOR);
        }
        if r1 > 1e-12 {
            w[1] = r1 / n as f64;
            mu[1] = values
                .iter()
                .zip(resp.iter())
                .map(|(x, r)| x * (1.0 - r))
                .sum::<f64>()
                / r1;
            var[1] = (values
                .iter()
                .zip(resp.iter())
                .map(|(x, r)| (1.0 - r) * (x - mu[1]) * (x - mu[1]))
                .sum::<f64>()
                / r1)
                .max(VARIANCE_FLOOR);
        }

        if (ll - prev_ll).abs() < tol {
            break;
        }
        prev_ll = ll;
    }

    let (lo, hi) = if mu[0] <= mu[1] { (0, 1) } else { (1, 0) };
    let degenerate = (mu[hi] - mu[lo]).abs() < MIN_SEPARATION;
    Ok(GmmFit {
        mean_low: mu[lo],
        mean_high: mu[hi],
        var_low: var[lo],
        var_high: var[hi],
        weight_low: w[lo],
        weight_high: w[hi],
        iterations,
        log_likelihood: *loglik_trace.last().unwrap(),
        degenerate,
        loglik_trace,
    })
}

/// Estimates the label-noise rate of a labelled set using the embeddings of
/// the designated agent.
///
/// A same-label pair looks clean only when both members are clean, so the
/// low-mean pair weight is `1 - (1-r)^2` for sample-level noise `r`; the
/// estimate inverts that relation. Unresolved mixtures report rate 0 with
/// the degenerate flag set.
pub fn estimate_noise_rate(
    set: &LabelledSet,
    embedder: &Agent,
    cfg: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseEstimate> {
    let sims = sample_intra_pairs(set, embedder, cfg.max_pairs, rng)?;
    let fit = fit_gmm2(&sims, cfg.max_iters, cfg.tol)?;
    if fit.degenerate {
        return Ok(NoiseEstimate {
            rate: 0.0,
            degenerate: true,
            pairs_used: sims.len(),
            pair_noise_weight: fit.weight_low,
        });
    }
    let clean_pair_weight = fit.weight_high.clamp(0.0, 1.0);
    let rate = 1.0 - clean_pair_weight.sqrt();
    Ok(NoiseEstimate {
        rate,
        degenerate: false,
        pairs_used: sims.len(),
        pair_noise_weight: fit.weight_low,
    })
}

/// Fixed-domain histogram over [-1, 1] for similarity exports.
pub fn similarity_histogram(sims: &[f64], bins: usize) -> Vec<(f64, usize)> {
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in sims {
        let mut b = ((s + 1.0) / width).floor() as isize;
        if b < 0 {
            b = 0;
        }
        if b as usize >= bins {
            b = bins as isize - 1;
        }
        counts[b as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (-1.0 + width * (i as f64 + 0.5), c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, inject_noise, LabelledSet, NoiseMode, Provenance, Sample};
    use crate::learner::EncoderParams;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn identity_agent(dim: usize, classes: usize) -> Agent {
        let mut rng = stream_rng(0, "head");
        Agent::from_parts(
            EncoderParams::identity(dim),
            crate::learner::ClassHead::init(classes, dim, &mut rng),
        )
    }

    fn make_set(samples: Vec<Sample>, classes: usize) -> LabelledSet {
        LabelledSet::new(samples, classes).unwrap()
    }

    #[test]
    fn unrank_enumerates_all_pairs() {
        let n = 7;
        let mut seen = std::collections::BTreeSet::new();
        for rank in 0..n * (n - 1) / 2 {
            let (i, j) = unrank_pair(n, rank);
            assert!(i < j && j < n);
            assert!(seen.insert((i, j)));
        }
        assert_eq!(seen.len(), 21);
    }

    #[test]
    fn forced_single_pair() {
        let mut samples = Vec::new();
        for (id, label) in [(0u64, 0usize), (1, 1), (2, 2), (3, 2)] {
            samples.push(Sample {
                id,
                features: vec![1.0, 0.0],
                label,
                gt_label: None,
                provenance: Provenance::Seed,
            });
        }
        let set = make_set(samples, 3);
        let agent = identity_agent(2, 3);
        let mut rng = stream_rng(1, "pairs");
        let sims = sample_intra_pairs(&set, &agent, 100, &mut rng).unwrap();
        assert_eq!(sims.len(), 1);
    }

    #[test]
    fn identical_members_have_similarity_one() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                features: vec![3.0, 4.0],
                label: 0,
                gt_label: None,
                provenance: Provenance::Seed,
            })
            .chain((4..6).map(|i| Sample {
                id: i,
                features: vec![0.0, 1.0],
                label: 1,
                gt_label: None,
                provenance: Provenance::Seed,
            }))
            .collect();
        let set = make_set(samples, 2);
        let agent = identity_agent(2, 2);
        let mut rng = stream_rng(2, "pairs");
        let sims = sample_intra_pairs(&set, &agent, 100, &mut rng).unwrap();
        assert_eq!(sims.len(), 7); // C(4,2) + C(2,2)
        for s in sims {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_budget_is_bounded_by_combinatorics() {
        let set = gen_synthetic(3, 4, 4, 0.1, 3).unwrap();
        let agent = identity_agent(4, 3);
        let mut rng = stream_rng(3, "pairs");
        let sims = sample_intra_pairs(&set, &agent, 100, &mut rng).unwrap();
        assert_eq!(sims.len(), 18); // 3 * C(4,2)
        let sims = sample_intra_pairs(&set, &agent, 10, &mut rng).unwrap();
        assert_eq!(sims.len(), 10);
    }

    #[test]
    fn no_class_with_two_members_errors() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                id: i,
                features: vec![1.0, 0.0],
                label: i as usize,
                gt_label: None,
                provenance: Provenance::Seed,
            })
            .collect();
        let set = make_set(samples, 3);
        let agent = identity_agent(2, 3);
        let mut rng = stream_rng(4, "pairs");
        assert!(matches!(
            sample_intra_pairs(&set, &agent, 10, &mut rng).unwrap_err(),
            Error::NoPairs
        ));
    }

    fn mixture_draws(w_low: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, "mixture");
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if rand::Rng::random::<f64>(&mut rng) < w_low {
                    0.3 + 0.05 * z
                } else {
                    0.8 + 0.05 * z
                }
            })
            .collect()
    }

    #[test]
    fn gmm_recovers_balanced_mixture() {
        let values = mixture_draws(0.5, 10_000, 5);
        let fit = fit_gmm2(&values, 200, 1e-6).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.weight_low - 0.5).abs() < 0.03, "w_low {}", fit.weight_low);
        assert!((fit.mean_low - 0.3).abs() < 0.02, "mu_low {}", fit.mean_low);
        assert!((fit.mean_high - 0.8).abs() < 0.02);
    }

    #[test]
    fn gmm_recovers_skewed_mixture() {
        let values = mixture_draws(0.2, 10_000, 6);
        let fit = fit_gmm2(&values, 200, 1e-6).unwrap();
        assert!((fit.weight_low - 0.2).abs() < 0.03, "w_low {}", fit.weight_low);
    }

    #[test]
    fn gmm_flags_constant_input_as_degenerate() {
        let values = vec![0.7; 100];
        let fit = fit_gmm2(&values, 200, 1e-6).unwrap();
        assert!(fit.degenerate);
        assert!(fit.var_low >= VARIANCE_FLOOR && fit.var_high >= VARIANCE_FLOOR);
    }

    #[test]
    fn gmm_rejects_tiny_samples() {
        let values = vec![0.5; 19];
        assert!(matches!(
            fit_gmm2(&values, 200, 1e-6).unwrap_err(),
            Error::InsufficientData(_)
        ));
    }

    #[test]
    fn gmm_log_likelihood_never_decreases() {
        for seed in 0..5 {
            let values = mixture_draws(0.35, 2_000, 100 + seed);
            let fit = fit_gmm2(&values, 200, 0.0).unwrap();
            for pair in fit.loglik_trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-9,
                    "log-likelihood decreased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn gmm_is_order_invariant() {
        let values = mixture_draws(0.4, 3_000, 7);
        let fit_a = fit_gmm2(&values, 200, 1e-6).unwrap();
        let mut reversed = values.clone();
        reversed.reverse();
        let fit_b = fit_gmm2(&reversed, 200, 1e-6).unwrap();
        assert!((fit_a.mean_low - fit_b.mean_low).abs() < 1e-6);
        assert!((fit_a.weight_low - fit_b.weight_low).abs() < 1e-6);
        assert!(fit_a.mean_low <= fit_a.mean_high);
        assert!(fit_b.mean_low <= fit_b.mean_high);
    }

    #[test]
    fn clean_data_reports_no_noise() {
        let set = gen_synthetic(10, 12, 16, 0.05, 8).unwrap();
        let agent = identity_agent(16, 10);
        let mut rng = stream_rng(9, "estimate");
        let est = estimate_noise_rate(&set, &agent, &EstimatorConfig::default(), &mut rng).unwrap();
        assert!(
            est.degenerate || est.rate < 0.05,
            "clean data produced rate {} (degenerate={})",
            est.rate,
            est.degenerate
        );
    }

    #[test]
    fn symmetric_noise_rate_is_recovered_through_pair_correction() {
        // well separated raw clusters seen through the identity embedder:
        // the pair-level noisy weight is 1-(1-r)^2 and the estimate inverts it
        let set = gen_synthetic(20, 40, 16, 0.08, 10).unwrap();
        let noisy = inject_noise(&set, 0.5, NoiseMode::Symmetric, 11).unwrap();
        let agent = identity_agent(16, 20);
        let mut rng = stream_rng(12, "estimate");
        let est =
            estimate_noise_rate(&noisy, &agent, &EstimatorConfig::default(), &mut rng).unwrap();
        assert!(!est.degenerate);
        assert!(
            (est.rate - 0.5).abs() < 0.1,
            "estimated rate {} for true rate 0.5",
            est.rate
        );
        // rates above one half must be representable
        let noisier = inject_noise(&set, 0.7, NoiseMode::Symmetric, 13).unwrap();
        let est = estimate_noise_rate(&noisier, &agent, &EstimatorConfig::default(), &mut rng)
            .unwrap();
        assert!(est.rate > 0.5, "rate {} should exceed 0.5", est.rate);
    }

    #[test]
    fn estimate_is_stable_under_dataset_doubling() {
        let agent = identity_agent(16, 20);
        let rate_for = |per_class: usize, seed: u64| {
            let set = gen_synthetic(20, per_class, 16, 0.08, seed).unwrap();
            let noisy = inject_noise(&set, 0.4, NoiseMode::Symmetric, seed + 1).unwrap();
            let mut rng = stream_rng(seed + 2, "estimate");
            estimate_noise_rate(&noisy, &agent, &EstimatorConfig::default(), &mut rng)
                .unwrap()
                .rate
        };
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let small: Vec<f64> = (0..4).map(|s| rate_for(30, 40 + s)).collect();
        let large: Vec<f64> = (0..4).map(|s| rate_for(60, 50 + s)).collect();
        assert!(
            (mean(&small) - mean(&large)).abs() < 0.02,
            "small {small:?} vs large {large:?}"
        );
    }

    #[test]
    fn histogram_covers_the_similarity_domain() {
        let sims = vec![-1.0, -0.5, 0.0, 0.5, 0.99, 1.0];
        let hist = similarity_histogram(&sims, 100);
        assert_eq!(hist.len(), 100);
        assert_eq!(hist.iter().map(|(_, c)| c).sum::<usize>(), sims.len());
        assert!((hist[0].0 + 0.99).abs() < 1e-12);
        assert!((hist[99].0 - 0.99).abs() < 1e-12);
        assert_eq!(hist[99].1, 2); // 0.99 and 1.0 share the top bin
    }
}
