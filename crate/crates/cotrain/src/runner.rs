//! Subcommand drivers: build data per config, run the requested experiment,
//! and write every artifact into `runs/<name>/`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::data::{
    gen_synthetic, inject_noise, load_csv, save_csv, split_manifest, split_parts,
    split_parts_open_set, split_train_test, LabelledSet, UnlabelledPart,
};
use crate::error::{Error, Result};
use crate::eval::full_evaluation;
use crate::groupnet::{baseline_train, classification_accuracy, gn_train, IterationRecord};
use crate::learner::{load_checkpoint, save_checkpoint, Agent};
use crate::noise::{estimate_noise_rate, fit_gmm2, sample_intra_pairs, similarity_histogram};
use crate::nroll::{run_nroll, LoopMetrics, LoopObserver, NrollOutcome};
use crate::rng::{derive_seed, stream_rng};

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let path = root.join(&cfg.run_name);
        std::fs::create_dir_all(&path)?;
        let resolved = serde_json::to_string_pretty(cfg)?;
        std::fs::write(path.join("config.json"), resolved + "\n")?;
        Ok(Self { path })
    }

    pub fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(self.path.join(name), text + "\n")?;
        Ok(())
    }

    pub fn write_jsonl(&self, name: &str, records: &[IterationRecord]) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(self.path.join(name), out)?;
        Ok(())
    }
}

/// Train/test material shared by the subcommands. Test labels are ground
/// truth (carved before noise injection); the train set carries the injected
/// noise.
pub struct PreparedData {
    pub train: LabelledSet,
    pub test: LabelledSet,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let base = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            input_dim,
            intra_spread,
        } => gen_synthetic(*classes, *per_class, *input_dim, *intra_spread, cfg.seed)?,
        DatasetSpec::Csv { path } => load_csv(Path::new(path))?,
    };
    let (train_clean, test) = split_train_test(&base, cfg.test_fraction, cfg.seed)?;
    let train = if cfg.noise.rate > 0.0 {
        inject_noise(&train_clean, cfg.noise.rate, cfg.noise.mode, cfg.seed)?
    } else {
        train_clean
    };
    Ok(PreparedData { train, test })
}

fn split_for_nroll(
    cfg: &ExperimentConfig,
    train: &LabelledSet,
) -> Result<(LabelledSet, Vec<UnlabelledPart>, Option<Vec<usize>>)> {
    if cfg.split.open_set {
        let (l, parts, seen) = split_parts_open_set(train, cfg.split.parts, cfg.seed)?;
        Ok((l, parts, Some(seen)))
    } else {
        let (l, parts) = split_parts(train, cfg.split.parts, cfg.seed)?;
        Ok((l, parts, None))
    }
}

/// `gen-data`: writes the (optionally noisy) dataset as CSV.
pub fn run_gen_data(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let dir = RunDir::create(root, cfg)?;
    let base = match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            input_dim,
            intra_spread,
        } => gen_synthetic(*classes, *per_class, *input_dim, *intra_spread, cfg.seed)?,
        DatasetSpec::Csv { path } => load_csv(Path::new(path))?,
    };
    let noisy = if cfg.noise.rate > 0.0 {
        inject_noise(&base, cfg.noise.rate, cfg.noise.mode, cfg.seed)?
    } else {
        base
    };
    save_csv(&noisy, &dir.path.join("dataset.csv"))?;
    println!(
        "wrote {} samples to {}",
        noisy.len(),
        dir.path.join("dataset.csv").display()
    );
    Ok(())
}

/// `train`: one supervised run of the configured method plus evaluation.
pub fn run_train(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let dir = RunDir::create(root, cfg)?;
    let data = prepare_data(cfg)?;
    let dims = cfg.encoder_dims(data.train.feature_dim());
    let classes = data.train.class_count();
    let sgd = cfg.sgd.clone().with_default_schedule(cfg.train_iterations);
    let mut rng = stream_rng(cfg.seed, "train-orchestrator");

    let agents: Vec<Agent> = match cfg.method {
        Method::Baseline => {
            let mut agent = Agent::init(&dims, classes, derive_seed(cfg.seed, "agent-0"));
            let warmup =
                (cfg.group.warmup_fraction * cfg.train_iterations as f64).round() as usize;
            let log = baseline_train(
                &mut agent,
                &data.train,
                cfg.group.batch_size,
                &cfg.margin,
                &sgd,
                cfg.train_iterations,
                warmup,
                &mut rng,
            )?;
            dir.write_jsonl("train_log.jsonl", &log)?;
            vec![agent]
        }
        Method::Groupnet => {
            let mut group = cfg.group.clone();
            group.seed = cfg.seed;
            group.noise_rate_percent = cfg
                .initial_noise_rate
                .unwrap_or(100.0 * cfg.noise.rate)
                .clamp(0.0, 99.9);
            let mut agents: Vec<Agent> = (0..group.agents)
                .map(|m| Agent::init(&dims, classes, derive_seed(cfg.seed, &format!("agent-{m}"))))
                .collect();
            let warmup = (group.warmup_fraction * cfg.train_iterations as f64).round() as usize;
            let log = gn_train(
                &mut agents,
                &data.train,
                &group,
                &cfg.margin,
                &sgd,
                cfg.train_iterations,
                warmup,
                0,
                &mut rng,
            )?;
            dir.write_jsonl("train_log.jsonl", &log)?;
            agents
        }
    };

    for (m, agent) in agents.iter().enumerate() {
        save_checkpoint(agent, &cfg.margin, &dir.path.join(format!("agent_{m}.ckpt")))?;
    }
    let eval_agent = &agents[cfg.eval.agent_index.min(agents.len() - 1)];
    let report = full_evaluation(
        eval_agent,
        &data.test,
        &cfg.margin,
        &cfg.eval,
        derive_seed(cfg.seed, "train-eval"),
    )?;
    dir.write_json("report.json", &report)?;
    println!(
        "test accuracy {:.4}  verification {:.4}  rank1 {:.4}",
        report.test_accuracy, report.verification_accuracy, report.rank1
    );
    Ok(())
}

/// `estimate-noise`: fit the similarity mixture and export histogram data.
pub fn run_estimate_noise(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let dir = RunDir::create(root, cfg)?;
    let data = prepare_data(cfg)?;
    let embedder = match &cfg.checkpoint {
        Some(path) => load_checkpoint(Path::new(path))?.0,
        None => {
            // warm a fresh group up just enough for meaningful similarities
            let dims = cfg.encoder_dims(data.train.feature_dim());
            let mut group = cfg.group.clone();
            group.seed = cfg.seed;
            let mut agents: Vec<Agent> = (0..group.agents)
                .map(|m| {
                    Agent::init(
                        &dims,
                        data.train.class_count(),
                        derive_seed(cfg.seed, &format!("agent-{m}")),
                    )
                })
                .collect();
            let warmup =
                ((group.warmup_fraction * cfg.train_iterations as f64).round() as usize).max(1);
            let sgd = cfg.sgd.clone().with_default_schedule(cfg.train_iterations);
            let mut rng = stream_rng(cfg.seed, "train-orchestrator");
            gn_train(
                &mut agents,
                &data.train,
                &group,
                &cfg.margin,
                &sgd,
                warmup,
                warmup,
                0,
                &mut rng,
            )?;
            agents.swap_remove(0)
        }
    };

    let mut rng = stream_rng(cfg.seed, "estimate-pairs");
    let sims = sample_intra_pairs(&data.train, &embedder, cfg.estimator.max_pairs, &mut rng)?;
    let fit = fit_gmm2(&sims, cfg.estimator.max_iters, cfg.estimator.tol)?;
    let mut rng = stream_rng(cfg.seed, "estimate-pairs");
    let estimate = estimate_noise_rate(&data.train, &embedder, &cfg.estimator, &mut rng)?;

    dir.write_json(
        "gmm.json",
        &serde_json::json!({ "fit": fit, "estimate": estimate }),
    )?;
    let hist = similarity_histogram(&sims, 100);
    let mut csv = String::from("bin_center,count\n");
    for (center, count) in hist {
        csv.push_str(&format!("{center},{count}\n"));
    }
    std::fs::write(dir.path.join("histogram.csv"), csv)?;
    println!(
        "estimated noise rate {:.4} (pair weight {:.4}, degenerate={})",
        estimate.rate, estimate.pair_noise_weight, estimate.degenerate
    );
    Ok(())
}

/// `evaluate`: report for a stored checkpoint on freshly prepared test data.
pub fn run_evaluate(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let dir = RunDir::create(root, cfg)?;
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        Error::InvalidConfig("evaluate requires `checkpoint` to be set".into())
    })?;
    let (agent, margin) = load_checkpoint(Path::new(path))?;
    let data = prepare_data(cfg)?;
    let report = full_evaluation(
        &agent,
        &data.test,
        &margin,
        &cfg.eval,
        derive_seed(cfg.seed, "evaluate"),
    )?;
    dir.write_json("report.json", &report)?;

    // ROC export
    let mut rng = stream_rng(derive_seed(cfg.seed, "evaluate"), "eval-pairs");
    let pairs = crate::eval::make_verification_pairs(&data.test, cfg.eval.verification_pairs, &mut rng)?;
    let verification = crate::eval::verification_accuracy(&agent, &pairs, &cfg.eval.fpr_grid)?;
    let mut csv = String::from("threshold,tpr,fpr\n");
    for p in &verification.roc {
        csv.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
    }
    std::fs::write(dir.path.join("roc.csv"), csv)?;
    println!(
        "test accuracy {:.4}  verification {:.4}  rank1 {:.4}",
        report.test_accuracy, report.verification_accuracy, report.rank1
    );
    Ok(())
}

struct RunDirObserver<'a> {
    dir: &'a RunDir,
    margin: crate::learner::MarginConfig,
    rows: Vec<LoopMetrics>,
}

impl LoopObserver for RunDirObserver<'_> {
    fn on_state(&mut self, agents: &[Agent], metrics: &LoopMetrics) -> Result<()> {
        let loop_dir = self.dir.path.join(format!("loop_{}", metrics.loop_index));
        std::fs::create_dir_all(&loop_dir)?;
        for (m, agent) in agents.iter().enumerate() {
            save_checkpoint(agent, &self.margin, &loop_dir.join(format!("agent_{m}.ckpt")))?;
        }
        self.rows.push(metrics.clone());
        self.write_rows()
    }
}

impl RunDirObserver<'_> {
    fn write_rows(&self) -> Result<()> {
        let mut csv = String::from(
            "t,labelled_size,noise_rate,confident_fraction,pseudo_acc,test_acc,verification_acc,new_identities\n",
        );
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.rows.iter().filter(|r| r.loop_index > 0) {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.loop_index,
                r.labelled_size,
                r.estimated_noise_rate,
                r.confident_fraction,
                fmt(&r.pseudo_precision),
                fmt(&r.test_accuracy),
                fmt(&r.verification_accuracy),
                r.new_identities,
            ));
        }
        std::fs::write(self.dir.path.join("loops.csv"), csv)?;
        Ok(())
    }
}

/// `nroll`: the full learn-label loop with per-loop artifacts.
pub fn run_nroll_cmd(cfg: &ExperimentConfig, root: &Path) -> Result<NrollOutcome> {
    let dir = RunDir::create(root, cfg)?;
    let data = prepare_data(cfg)?;
    let (seed_labelled, parts, seen_classes) = split_for_nroll(cfg, &data.train)?;
    dir.write_json("split_manifest.json", &split_manifest(&seed_labelled, &parts))?;
    if let Some(seen) = &seen_classes {
        dir.write_json("seen_classes.json", seen)?;
    }

    let nroll_cfg = cfg.nroll_config();
    let mut observer = RunDirObserver {
        dir: &dir,
        margin: cfg.margin,
        rows: Vec::new(),
    };
    let outcome = match run_nroll(seed_labelled, parts, Some(&data.test), &nroll_cfg, &mut observer)
    {
        Ok(outcome) => outcome,
        Err(e) => {
            // divergence aborts but leaves the per-loop checkpoints in place
            let _ = observer.write_rows();
            return Err(e);
        }
    };

    let mut all_records = Vec::new();
    for phase in &outcome.logs {
        all_records.extend(phase.records.iter().cloned());
    }
    dir.write_jsonl("train_log.jsonl", &all_records)?;
    dir.write_json("metrics.json", &outcome.metrics)?;
    if let Some(bank) = &outcome.bank {
        dir.write_json("bank.json", bank)?;
    }

    // final report from the designated agent
    let eval_agent = &outcome.agents[cfg.eval.agent_index.min(outcome.agents.len() - 1)];
    let report = full_evaluation(
        eval_agent,
        &data.test,
        &cfg.margin,
        &cfg.eval,
        derive_seed(cfg.seed, "nroll-final-eval"),
    )?;
    dir.write_json("report.json", &report)?;

    let final_acc = classification_accuracy(eval_agent, &data.test, &cfg.margin)?;
    let mut line = format!(
        "loops {}  final |D_l| {}  final accuracy {:.4}",
        outcome.metrics.len() - 1,
        outcome.labelled.len(),
        final_acc
    );
    if let Some(bank) = &outcome.bank {
        line.push_str(&format!("  new identities {}", bank.len()));
    }
    println!("{line}");
    std::io::stdout().flush().ok();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_config(name: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run_name = name.into();
        cfg.dataset = DatasetSpec::Synthetic {
            classes: 6,
            per_class: 20,
            input_dim: 8,
            intra_spread: 0.2,
        };
        cfg.noise.rate = 0.3;
        cfg.split.parts = 3;
        cfg.group.agents = 2;
        cfg.group.exchange_degree = 1;
        cfg.group.batch_size = 16;
        cfg.model.hidden_dims = vec![16];
        cfg.model.embedding_dim = 8;
        cfg.train_iterations = 60;
        cfg.pretrain_iterations = 60;
        cfg.loop_iterations = 30;
        cfg.initial_noise_rate = Some(30.0);
        cfg.eval.verification_pairs = 60;
        cfg
    }

    #[test]
    fn gen_data_is_byte_identical_across_runs() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config("gen-a");
        run_gen_data(&cfg, root.path()).unwrap();
        cfg.run_name = "gen-b".into();
        run_gen_data(&cfg, root.path()).unwrap();
        let a = std::fs::read(root.path().join("gen-a/dataset.csv")).unwrap();
        let b = std::fs::read(root.path().join("gen-b/dataset.csv")).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn train_run_writes_all_artifacts() {
        let root = tempfile::tempdir().unwrap();
        let cfg = tiny_config("train-art");
        run_train(&cfg, root.path()).unwrap();
        let dir = root.path().join("train-art");
        for f in ["config.json", "train_log.jsonl", "report.json", "agent_0.ckpt", "agent_1.ckpt"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        // the resolved config parses back
        let text = std::fs::read_to_string(dir.join("config.json")).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.run_name, "train-art");
    }

    #[test]
    fn nroll_run_emits_s_rows() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config("nroll-art");
        cfg.label.threshold = 0.7;
        run_nroll_cmd(&cfg, root.path()).unwrap();
        let dir = root.path().join("nroll-art");
        let csv = std::fs::read_to_string(dir.join("loops.csv")).unwrap();
        let rows: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(rows.len(), 1 + 2, "header plus S=2 loops: {csv}");
        assert!(dir.join("loop_0/agent_0.ckpt").exists());
        assert!(dir.join("loop_2/agent_1.ckpt").exists());
        assert!(dir.join("split_manifest.json").exists());
        assert!(dir.join("report.json").exists());
    }
}
