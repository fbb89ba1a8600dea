//! Dataset generation, label-noise injection, labelled/unlabelled splitting
//! and CSV ingestion.
//!
//! All sets are immutable after construction and freely shareable across
//! agents and threads. The ground-truth labels of an [`UnlabelledPart`] are
//! deliberately unreachable from training code; only the evaluation module
//! reads them through a crate-private accessor.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Where a labelled sample's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Part of the initial labelled set.
    Seed,
    /// Pseudo-labelled during learn-label loop `t`.
    Pseudo { loop_index: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    /// True label when known (synthetic data keeps it for evaluation).
    pub gt_label: Option<usize>,
    pub provenance: Provenance,
}

/// A labelled dataset. `class_count` covers every label present and may be
/// larger when classes were declared up front.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelledSet {
    samples: Vec<Sample>,
    class_count: usize,
    feature_dim: usize,
}

impl LabelledSet {
    pub fn new(samples: Vec<Sample>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Ok(Self {
                samples,
                class_count,
                feature_dim: 0,
            });
        }
        let feature_dim = samples[0].features.len();
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidInput(format!(
                    "sample {} has dimension {}, expected {}",
                    s.id,
                    s.features.len(),
                    feature_dim
                )));
            }
            if s.label >= class_count {
                return Err(Error::InvalidInput(format!(
                    "sample {} has label {} >= class count {}",
                    s.id, s.label, class_count
                )));
            }
            if !seen.insert(s.id) {
                return Err(Error::InvalidInput(format!("duplicate id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            class_count,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Grows the declared class space (open-set mode appends identities).
    pub fn grow_classes(&mut self, new_count: usize) {
        assert!(new_count >= self.class_count);
        self.class_count = new_count;
    }

    /// Appends samples, failing on id collisions. Labels may reference
    /// classes up to `class_count` after `grow_classes`.
    pub fn append(&mut self, extra: Vec<Sample>) -> Result<()> {
        let ids: std::collections::HashSet<u64> = self.samples.iter().map(|s| s.id).collect();
        for s in &extra {
            if ids.contains(&s.id) {
                return Err(Error::InvalidInput(format!(
                    "id collision on append: {}",
                    s.id
                )));
            }
            if s.label >= self.class_count {
                return Err(Error::InvalidInput(format!(
                    "appended label {} >= class count {}",
                    s.label, self.class_count
                )));
            }
            if self.feature_dim != 0 && s.features.len() != self.feature_dim {
                return Err(Error::InvalidInput(format!(
                    "appended sample {} has dimension {}, expected {}",
                    s.id,
                    s.features.len(),
                    self.feature_dim
                )));
            }
        }
        self.samples.extend(extra);
        Ok(())
    }

    /// Samples added during loop `t`.
    pub fn added_in_loop(&self, t: u32) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.provenance == Provenance::Pseudo { loop_index: t })
            .collect()
    }

    /// Fraction of samples whose label disagrees with the known ground truth.
    /// Samples without ground truth are skipped.
    pub fn true_noise_fraction(&self) -> Option<f64> {
        let mut known = 0usize;
        let mut wrong = 0usize;
        for s in &self.samples {
            if let Some(gt) = s.gt_label {
                known += 1;
                if gt != s.label {
                    wrong += 1;
                }
            }
        }
        (known > 0).then(|| wrong as f64 / known as f64)
    }
}

/// Unlabelled samples. The hidden ground truth is only visible to the
/// evaluation module; training code sees ids and features.
#[derive(Debug, Clone)]
pub struct UnlabelledPart {
    ids: Vec<u64>,
    features: Vec<Vec<f64>>,
    hidden_gt: Vec<Option<usize>>,
}

impl UnlabelledPart {
    pub fn new(ids: Vec<u64>, features: Vec<Vec<f64>>, hidden_gt: Vec<Option<usize>>) -> Self {
        assert_eq!(ids.len(), features.len());
        assert_eq!(ids.len(), hidden_gt.len());
        Self {
            ids,
            features,
            hidden_gt,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    /// Evaluation-only view of the hidden truth, keyed by sample id.
    /// Kept crate-private so training paths cannot reach it.
    pub(crate) fn ground_truth_for_eval(&self) -> BTreeMap<u64, Option<usize>> {
        self.ids
            .iter()
            .copied()
            .zip(self.hidden_gt.iter().copied())
            .collect()
    }
}

/// Generates `classes` Gaussian blobs around random unit prototypes.
/// Features are stored raw; the encoder learns the rest.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    intra_spread: f64,
    seed: u64,
) -> Result<LabelledSet> {
    if classes < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    if per_class < 2 {
        return Err(Error::InvalidInput("need at least 2 samples per class".into()));
    }
    if input_dim < 2 {
        return Err(Error::InvalidInput("input dimension must be >= 2".into()));
    }
    if !(intra_spread.is_finite() && intra_spread >= 0.0) {
        return Err(Error::InvalidInput("intra_spread must be finite and >= 0".into()));
    }
    let mut rng = stream_rng(seed, "dataset");
    let mut prototypes = Vec::with_capacity(classes);
    for _ in 0..classes {
        loop {
            let v: Vec<f64> = (0..input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                prototypes.push(v.into_iter().map(|x| x / norm).collect::<Vec<f64>>());
                break;
            }
        }
    }
    let mut samples = Vec::with_capacity(classes * per_class);
    let mut id = 0u64;
    for (label, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            let features: Vec<f64> = proto
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + intra_spread * z
                })
                .collect();
            samples.push(Sample {
                id,
                features,
                label,
                gt_label: Some(label),
                provenance: Provenance::Seed,
            });
            id += 1;
        }
    }
    LabelledSet::new(samples, classes)
}

/// Label-noise flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Symmetric,
    Pairflip,
}

/// Flips each label with probability `rate`. The true label is preserved in
/// `gt_label`; ids and features are untouched.
pub fn inject_noise(set: &LabelledSet, rate: f64, mode: NoiseMode, seed: u64) -> Result<LabelledSet> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "noise rate must be in [0,1), got {rate}"
        )));
    }
    let classes = set.class_count();
    let mut rng = stream_rng(seed, "noise");
    let mut samples = set.samples().to_vec();
    for s in &mut samples {
        if rng.random::<f64>() < rate && classes >= 2 {
            s.label = match mode {
                NoiseMode::Symmetric => {
                    let wrong = rng.random_range(0..classes - 1);
                    if wrong >= s.label {
                        wrong + 1
                    } else {
                        wrong
                    }
                }
                NoiseMode::Pairflip => (s.label + 1) % classes,
            };
        }
    }
    LabelledSet::new(samples, classes)
}

/// Splits into `s_plus_1` per-class stratified equal parts. Part 0 keeps its
/// labels; the rest hide them and become unlabelled. Remainder members are
/// assigned round-robin across parts (cursor carried across classes).
pub fn split_parts(
    set: &LabelledSet,
    s_plus_1: usize,
    seed: u64,
) -> Result<(LabelledSet, Vec<UnlabelledPart>)> {
    split_impl(set, s_plus_1, seed, None)
}

/// Open-set variant: the labelled part covers only `seen` classes (a random
/// half of all classes when built through [`open_set_split`]); members of the
/// remaining classes are spread over the unlabelled parts, so every
/// unlabelled part mixes seen and unseen identities.
pub fn split_parts_open_set(
    set: &LabelledSet,
    s_plus_1: usize,
    seed: u64,
) -> Result<(LabelledSet, Vec<UnlabelledPart>, Vec<usize>)> {
    if s_plus_1 < 2 {
        return Err(Error::InvalidInput(
            "open-set split needs at least one unlabelled part".into(),
        ));
    }
    let classes = set.class_count();
    let mut class_ids: Vec<usize> = (0..classes).collect();
    let mut rng = stream_rng(seed, "open-set-classes");
    class_ids.shuffle(&mut rng);
    let mut seen: Vec<usize> = class_ids[..classes.div_ceil(2)].to_vec();
    seen.sort_unstable();
    let (labelled, parts) = split_impl(set, s_plus_1, seed, Some(&seen))?;
    Ok((labelled, parts, seen))
}

fn split_impl(
    set: &LabelledSet,
    s_plus_1: usize,
    seed: u64,
    seen_classes: Option<&[usize]>,
) -> Result<(LabelledSet, Vec<UnlabelledPart>)> {
    if s_plus_1 == 0 {
        return Err(Error::InvalidInput("need at least one part".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in set.samples() {
        by_class.entry(s.label).or_default().push(s);
    }
    let too_small: Vec<usize> = by_class
        .iter()
        .filter(|(_, members)| members.len() < s_plus_1)
        .map(|(label, _)| *label)
        .collect();
    if !too_small.is_empty() {
        return Err(Error::InvalidInput(format!(
            "classes too small for a {s_plus_1}-way split: {too_small:?}"
        )));
    }

    let mut rng = stream_rng(seed, "split");
    let mut part_samples: Vec<Vec<Sample>> = vec![Vec::new(); s_plus_1];
    let mut cursor = 0usize;
    for (label, mut members) in by_class {
        members.shuffle(&mut rng);
        let unseen = seen_classes.map(|seen| !seen.contains(&label)).unwrap_or(false);
        // Unseen classes never contribute to the labelled part 0.
        let (targets, nparts): (Vec<usize>, usize) = if unseen {
            ((1..s_plus_1).collect(), s_plus_1 - 1)
        } else {
            ((0..s_plus_1).collect(), s_plus_1)
        };
        let base = members.len() / nparts;
        let rem = members.len() % nparts;
        let mut sizes = vec![base; nparts];
        for _ in 0..rem {
            sizes[cursor % nparts] += 1;
            cursor += 1;
        }
        let mut offset = 0;
        for (slot, size) in sizes.iter().enumerate() {
            let target = targets[slot];
            for s in &members[offset..offset + size] {
                part_samples[target].push((*s).clone());
            }
            offset += size;
        }
    }

    for part in part_samples.iter_mut() {
        part.sort_by_key(|s| s.id);
    }

    let labelled = LabelledSet::new(part_samples.remove(0), set.class_count())?;
    let unlabelled = part_samples
        .into_iter()
        .map(|samples| {
            let ids = samples.iter().map(|s| s.id).collect();
            let features = samples.iter().map(|s| s.features.clone()).collect();
            let gt = samples.iter().map(|s| s.gt_label).collect();
            UnlabelledPart::new(ids, features, gt)
        })
        .collect();
    Ok((labelled, unlabelled))
}

/// Manifest of a split: part index -> sample ids, for reproducibility.
pub fn split_manifest(labelled: &LabelledSet, parts: &[UnlabelledPart]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    let ids: Vec<u64> = labelled.samples().iter().map(|s| s.id).collect();
    map.insert("part_0".into(), serde_json::json!(ids));
    for (i, p) in parts.iter().enumerate() {
        map.insert(format!("part_{}", i + 1), serde_json::json!(p.ids()));
    }
    serde_json::Value::Object(map)
}

/// Writes a set in the `id,label,gt_label,f0,...` format.
pub fn save_csv(set: &LabelledSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let dim = set.feature_dim();
    let mut header = String::from("id,label,gt_label");
    for i in 0..dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(w, "{header}")?;
    for s in set.samples() {
        let gt = s.gt_label.map(|g| g.to_string()).unwrap_or_default();
        let feats: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{},{},{}", s.id, s.label, gt, feats.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a set from the CSV format written by [`save_csv`]. The feature
/// dimension is inferred from the header.
pub fn load_csv(path: &Path) -> Result<LabelledSet> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "label" || cols[2] != "gt_label" {
        return Err(Error::Parse {
            line: 1,
            message: format!("bad header: {header}"),
        });
    }
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad feature column {c}, expected f{i}"),
            });
        }
    }
    let dim = cols.len() - 3;

    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut max_label = 0usize;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != dim + 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, got {}", dim + 3, fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad id {:?}", fields[0]),
        })?;
        if !seen.insert(id) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate id {id}"),
            });
        }
        let label: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad label {:?}", fields[1]),
        })?;
        let gt_label: Option<usize> = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad gt_label {:?}", fields[2]),
            })?)
        };
        let mut features = Vec::with_capacity(dim);
        for (j, raw) in fields[3..].iter().enumerate() {
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad feature f{j}: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite feature f{j}"),
                });
            }
            features.push(v);
        }
        max_label = max_label.max(label).max(gt_label.unwrap_or(0));
        samples.push(Sample {
            id,
            features,
            label,
            gt_label,
            provenance: Provenance::Seed,
        });
    }
    LabelledSet::new(samples, max_label + 1)
}

/// Carves a per-class stratified test split. Returns (train, test); test
/// labels are the ground truth, so call this before noise injection.
pub fn split_train_test(
    set: &LabelledSet,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabelledSet, LabelledSet)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidInput("test fraction must be in [0,1)".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in set.samples() {
        by_class.entry(s.label).or_default().push(s);
    }
    let mut rng = stream_rng(seed, "train-test");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64) * test_fraction).floor() as usize;
        for (i, s) in members.into_iter().enumerate() {
            if i < n_test {
                test.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    Ok((
        LabelledSet::new(train, set.class_count())?,
        LabelledSet::new(test, set.class_count())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set() -> LabelledSet {
        gen_synthetic(3, 10, 4, 0.1, 42).unwrap()
    }

    #[test]
    fn gen_zero_spread_makes_identical_samples() {
        let set = gen_synthetic(2, 3, 4, 0.0, 1).unwrap();
        let class0: Vec<&Sample> = set.samples().iter().filter(|s| s.label == 0).collect();
        for s in &class0[1..] {
            assert_eq!(s.features, class0[0].features);
        }
    }

    #[test]
    fn gen_is_deterministic_per_seed() {
        let a = gen_synthetic(4, 5, 8, 0.2, 9).unwrap();
        let b = gen_synthetic(4, 5, 8, 0.2, 9).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let c = gen_synthetic(4, 5, 8, 0.2, 10).unwrap();
        assert_ne!(a.samples()[0].features, c.samples()[0].features);
    }

    #[test]
    fn gen_rejects_tiny_dimension() {
        assert!(gen_synthetic(3, 5, 1, 0.1, 0).is_err());
    }

    #[test]
    fn inject_zero_rate_is_identity() {
        let set = tiny_set();
        let noisy = inject_noise(&set, 0.0, NoiseMode::Symmetric, 5).unwrap();
        for (a, b) in set.samples().iter().zip(noisy.samples()) {
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn inject_flip_count_matches_binomial_oracle() {
        // 10,000 samples at r=0.5: expect 5,000 +- 150 flips (3 sigma).
        let set = gen_synthetic(10, 1000, 4, 0.1, 3).unwrap();
        let noisy = inject_noise(&set, 0.5, NoiseMode::Symmetric, 7).unwrap();
        let flipped = set
            .samples()
            .iter()
            .zip(noisy.samples())
            .filter(|(a, b)| a.label != b.label)
            .count();
        assert!(
            (4850..=5150).contains(&flipped),
            "flipped {flipped} outside binomial bounds"
        );
        // ids/features untouched, gt preserved
        for (a, b) in set.samples().iter().zip(noisy.samples()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.features, b.features);
            assert_eq!(b.gt_label, Some(a.label));
        }
    }

    #[test]
    fn inject_pairflip_shifts_by_one() {
        let set = tiny_set();
        let noisy = inject_noise(&set, 0.9, NoiseMode::Pairflip, 11).unwrap();
        for (a, b) in set.samples().iter().zip(noisy.samples()) {
            if a.label != b.label {
                assert_eq!(b.label, (a.label + 1) % set.class_count());
            }
        }
    }

    #[test]
    fn split_single_part_keeps_everything_labelled() {
        let set = tiny_set();
        let (labelled, parts) = split_parts(&set, 1, 0).unwrap();
        assert_eq!(labelled.len(), set.len());
        assert!(parts.is_empty());
    }

    #[test]
    fn split_exact_division() {
        let set = gen_synthetic(3, 100, 4, 0.1, 2).unwrap();
        let (labelled, parts) = split_parts(&set, 5, 0).unwrap();
        assert_eq!(labelled.len(), 3 * 20);
        for p in &parts {
            assert_eq!(p.len(), 3 * 20);
        }
    }

    #[test]
    fn split_round_robin_remainder() {
        // One class of 10 into 3 parts: sizes {4,3,3}.
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                id: i,
                features: vec![i as f64, 0.0],
                label: 0,
                gt_label: Some(0),
                provenance: Provenance::Seed,
            })
            .collect();
        let mut with_other: Vec<Sample> = samples;
        // A second class so the set is well formed, sized for exact division.
        for i in 10..13 {
            with_other.push(Sample {
                id: i,
                features: vec![0.0, i as f64],
                label: 1,
                gt_label: Some(1),
                provenance: Provenance::Seed,
            });
        }
        let set = LabelledSet::new(with_other, 2).unwrap();
        let (labelled, parts) = split_parts(&set, 3, 0).unwrap();
        let count_class0 = |ids: &[u64]| ids.iter().filter(|id| **id < 10).count();
        let labelled_ids: Vec<u64> = labelled.samples().iter().map(|s| s.id).collect();
        let mut sizes = vec![count_class0(&labelled_ids)];
        for p in &parts {
            sizes.push(count_class0(p.ids()));
        }
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn split_rejects_small_classes_and_lists_them() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: i,
                features: vec![0.0, 0.0],
                label: (i as usize) % 2,
                gt_label: None,
                provenance: Provenance::Seed,
            })
            .collect();
        let set = LabelledSet::new(samples, 2).unwrap();
        let err = split_parts(&set, 3, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('0') && msg.contains('1'), "got: {msg}");
    }

    #[test]
    fn open_set_labelled_part_covers_half_the_classes() {
        let set = gen_synthetic(10, 12, 4, 0.1, 5).unwrap();
        let (labelled, parts, seen) = split_parts_open_set(&set, 3, 0).unwrap();
        assert_eq!(seen.len(), 5);
        let labelled_classes: std::collections::BTreeSet<usize> =
            labelled.samples().iter().map(|s| s.label).collect();
        assert_eq!(labelled_classes, seen.iter().copied().collect());
        // every unlabelled part mixes seen and unseen identities
        for p in &parts {
            let gts = p.ground_truth_for_eval();
            let has_seen = gts.values().any(|g| seen.contains(&g.unwrap()));
            let has_unseen = gts.values().any(|g| !seen.contains(&g.unwrap()));
            assert!(has_seen && has_unseen);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let set = tiny_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&set, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.len(), set.len());
        for (a, b) in set.samples().iter().zip(loaded.samples()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.gt_label, b.gt_label);
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn csv_parses_row_without_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,label,gt_label,f0,f1\n7,2,,0.1,0.2\n").unwrap();
        let set = load_csv(&path).unwrap();
        assert_eq!(set.len(), 1);
        let s = &set.samples()[0];
        assert_eq!(s.id, 7);
        assert_eq!(s.label, 2);
        assert_eq!(s.gt_label, None);
        assert_eq!(s.features, vec![0.1, 0.2]);
    }

    #[test]
    fn csv_empty_after_header_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,label,gt_label,f0,f1\n").unwrap();
        let set = load_csv(&path).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn csv_reports_line_numbers_on_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,label,gt_label,f0,f1\n1,0,,0.1,0.2\n2,0,,0.3\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::write(&path, "id,label,gt_label,f0,f1\n1,0,,x,0.2\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
        std::fs::write(&path, "id,label,gt_label,f0,f1\n1,0,,0.1,0.2\n1,0,,0.1,0.2\n").unwrap();
        assert!(matches!(load_csv(&path).unwrap_err(), Error::Parse { line: 3, .. }));
    }

    #[test]
    fn train_test_split_is_stratified() {
        let set = gen_synthetic(5, 20, 4, 0.1, 8).unwrap();
        let (train, test) = split_train_test(&set, 0.25, 0).unwrap();
        assert_eq!(train.len() + test.len(), set.len());
        for c in 0..5 {
            let n = test.samples().iter().filter(|s| s.label == c).count();
            assert_eq!(n, 5);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn split_parts_tile_the_input(
                classes in 2usize..6,
                per_class in 4usize..20,
                parts in 1usize..4,
                seed in 0u64..1000,
            ) {
                prop_assume!(per_class >= parts);
                let set = gen_synthetic(classes, per_class, 4, 0.1, seed).unwrap();
                let (labelled, unlabelled) = split_parts(&set, parts, seed).unwrap();
                let mut all_ids: Vec<u64> = labelled.samples().iter().map(|s| s.id).collect();
                for p in &unlabelled {
                    all_ids.extend_from_slice(p.ids());
                }
                all_ids.sort_unstable();
                let mut expect: Vec<u64> = set.samples().iter().map(|s| s.id).collect();
                expect.sort_unstable();
                prop_assert_eq!(all_ids, expect);

                // per-class sizes differ by at most one across parts
                for c in 0..classes {
                    let mut sizes = vec![labelled.samples().iter().filter(|s| s.label == c).count()];
                    for p in &unlabelled {
                        let gts = p.ground_truth_for_eval();
                        sizes.push(gts.values().filter(|g| **g == Some(c)).count());
                    }
                    let min = *sizes.iter().min().unwrap();
                    let max = *sizes.iter().max().unwrap();
                    prop_assert!(max - min <= 1, "sizes {:?}", sizes);
                }
            }

            #[test]
            fn noise_preserves_ids_and_features(
                rate in 0.0f64..0.9,
                seed in 0u64..1000,
            ) {
                let set = gen_synthetic(4, 6, 4, 0.1, 1).unwrap();
                let noisy = inject_noise(&set, rate, NoiseMode::Symmetric, seed).unwrap();
                for (a, b) in set.samples().iter().zip(noisy.samples()) {
                    prop_assert_eq!(a.id, b.id);
                    prop_assert_eq!(&a.features, &b.features);
                    prop_assert_eq!(b.gt_label, Some(a.label));
                }
            }
        }
    }
}
