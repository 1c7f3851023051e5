//! Synthetic task generation: Gaussian class clusters with orthogonal means
//! on a fixed-radius sphere, split into a labelled old-class stage and one
//! or more unlabelled discovery steps, plus CSV interchange.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Description of one incremental task: class counts, sampling sizes and
/// cluster geometry. Class ids are global: old classes take `0..old_classes`,
/// the classes of discovery step `s` follow in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub old_classes: usize,
    pub new_classes_per_step: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// Parses a profile such as `p5-5` (five old classes, one step of five
    /// new ones) or `p5-3-3` (two discovery steps). The input dimension is
    /// the next power of two that fits every class, with a floor of 16.
    pub fn from_profile(profile: &str, seed: u64) -> Result<Self> {
        let rest = profile.strip_prefix('p').ok_or_else(|| {
            Error::Parse(format!("profile '{profile}' must start with 'p'"))
        })?;
        let parts: Vec<usize> = rest
            .split('-')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("profile '{profile}': bad count '{p}'")))
            })
            .collect::<Result<_>>()?;
        if parts.len() < 2 {
            return Err(Error::Parse(format!(
                "profile '{profile}' needs old and new class counts"
            )));
        }
        if parts.iter().any(|&c| c == 0) {
            return Err(Error::Parse(format!(
                "profile '{profile}': class counts must be positive"
            )));
        }
        let total: usize = parts.iter().sum();
        let spec = TaskSpec {
            input_dim: total.next_power_of_two().max(16),
            old_classes: parts[0],
            new_classes_per_step: parts[1..].to_vec(),
            train_per_class: 200,
            test_per_class: 50,
            radius: 5.0,
            noise_sigma: 1.0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.old_classes == 0 {
            return Err(Error::Config("need at least one old class".into()));
        }
        if self.new_classes_per_step.is_empty()
            || self.new_classes_per_step.iter().any(|&c| c == 0)
        {
            return Err(Error::Config(
                "every discovery step needs at least one new class".into(),
            ));
        }
        if self.total_classes() > self.input_dim {
            return Err(Error::Config(format!(
                "{} classes cannot have orthogonal means in {} dimensions",
                self.total_classes(),
                self.input_dim
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.new_classes_per_step.len()
    }

    pub fn n_new(&self, step: usize) -> usize {
        self.new_classes_per_step[step]
    }

    /// Global class id of the first class of discovery step `step`.
    pub fn step_offset(&self, step: usize) -> usize {
        self.old_classes + self.new_classes_per_step[..step].iter().sum::<usize>()
    }

    pub fn total_classes(&self) -> usize {
        self.old_classes + self.new_classes_per_step.iter().sum::<usize>()
    }

    pub fn generate(&self) -> Result<SplitSet> {
        self.validate()?;
        let means = self.class_means()?;

        let old_ids: Vec<usize> = (0..self.old_classes).collect();
        let labelled = self.draw_split(&means, &old_ids, self.train_per_class, "train-old")?;
        let test_old = self.draw_split(&means, &old_ids, self.test_per_class, "test-old")?;

        let mut unlabelled = Vec::new();
        let mut test_new = Vec::new();
        for step in 0..self.steps() {
            let ids: Vec<usize> =
                (self.step_offset(step)..self.step_offset(step) + self.n_new(step)).collect();
            let train = self.draw_split(
                &means,
                &ids,
                self.train_per_class,
                &format!("train-new-{step}"),
            )?;
            let test = self.draw_split(
                &means,
                &ids,
                self.test_per_class,
                &format!("test-new-{step}"),
            )?;
            // Ground truth inside a step is relative to the step's first class.
            let offset = self.step_offset(step);
            let hidden = train.labels.iter().map(|l| l - offset).collect();
            unlabelled.push(UnlabelledSet::new(train.features, hidden)?);
            let rel_labels = test.labels.iter().map(|l| l - offset).collect();
            test_new.push(LabeledSet::new(test.features, rel_labels)?);
        }

        Ok(SplitSet {
            spec: self.clone(),
            class_means: means,
            labelled,
            unlabelled,
            test_old,
            test_new,
        })
    }

    /// Mutually orthogonal class means of norm `radius`, produced by
    /// Gram-Schmidt on seeded Gaussian draws.
    fn class_means(&self) -> Result<Tensor> {
        let mut rng = substream(self.seed, "means");
        let d = self.input_dim;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.total_classes());
        while basis.len() < self.total_classes() {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue; // degenerate draw; take a fresh vector
            }
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
        let data: Vec<f64> = basis
            .into_iter()
            .flat_map(|b| b.into_iter().map(|x| x * self.radius))
            .collect();
        Tensor::new(vec![self.total_classes(), d], data)
    }

    fn draw_split(
        &self,
        means: &Tensor,
        class_ids: &[usize],
        per_class: usize,
        label: &str,
    ) -> Result<LabeledSet> {
        let mut rng = substream(self.seed, label);
        let d = self.input_dim;
        let mut data = Vec::with_capacity(class_ids.len() * per_class * d);
        let mut labels = Vec::with_capacity(class_ids.len() * per_class);
        for &class in class_ids {
            let mean = means.row(class)?;
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + self.noise_sigma * z);
                }
                labels.push(class);
            }
        }
        LabeledSet::new(
            Tensor::new(vec![class_ids.len() * per_class, d], data)?,
            labels,
        )
    }
}

/// Feature rows paired with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        Ok(LabeledSet { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Feature rows whose class labels are hidden from training. The ground
/// truth is carried only for evaluation, behind an explicit accessor.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledSet {
    features: Tensor,
    hidden: Vec<usize>,
}

impl UnlabelledSet {
    pub fn new(features: Tensor, hidden: Vec<usize>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if hidden.len() != n {
            return Err(Error::Validation(format!(
                "{} hidden labels for {n} feature rows",
                hidden.len()
            )));
        }
        Ok(UnlabelledSet { features, hidden })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    /// Step-relative ground-truth labels. Evaluation only — the training
    /// path must never call this.
    pub fn hidden_ground_truth(&self) -> &[usize] {
        &self.hidden
    }
}

/// Everything one task provides: labelled old-class data, per-step
/// unlabelled discovery data, and held-out test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub spec: TaskSpec,
    /// Row `c` is the mean of global class `c`.
    pub class_means: Tensor,
    pub labelled: LabeledSet,
    pub unlabelled: Vec<UnlabelledSet>,
    pub test_old: LabeledSet,
    /// Labels are step-relative, matching `UnlabelledSet::hidden_ground_truth`.
    pub test_new: Vec<LabeledSet>,
}

impl SplitSet {
    /// Order-sensitive hash of every tensor and label in the split.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut mix = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        mix(self.class_means.bits_hash());
        mix(self.labelled.features.bits_hash());
        self.labelled.labels.iter().for_each(|&l| mix(l as u64));
        mix(self.test_old.features.bits_hash());
        self.test_old.labels.iter().for_each(|&l| mix(l as u64));
        for u in &self.unlabelled {
            mix(u.features.bits_hash());
            u.hidden.iter().for_each(|&l| mix(l as u64));
        }
        for t in &self.test_new {
            mix(t.features.bits_hash());
            t.labels.iter().for_each(|&l| mix(l as u64));
        }
        h
    }
}

/// Adds independent Gaussian noise of the given standard deviation to every
/// entry, producing a correlated augmented view. A zero sigma returns the
/// input unchanged without consuming randomness.
pub fn jitter_batch(features: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Param {
            name: "sigma",
            detail: format!("must be non-negative, got {sigma}"),
        });
    }
    if sigma == 0.0 {
        return Ok(features.clone());
    }
    let data: Vec<f64> = features
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Tensor::new(features.shape().to_vec(), data)
}

/// Writes a labelled set as CSV: a `#` header line, then one row per sample
/// of `label,f0,f1,...`.
pub fn export_csv(set: &LabeledSet) -> Result<String> {
    let (_, d) = set.features.dims2()?;
    let mut out = format!("# frost-dataset v1 dim={d}\n");
    for (row, &label) in set.labels.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in set.features.row(row)? {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses the CSV format written by `export_csv`. Errors carry 1-based line
/// numbers. Blank lines and `#` comments are skipped.
pub fn ingest_csv(text: &str) -> Result<LabeledSet> {
    let mut dim: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(',');
        let label_field = fields.next().unwrap_or("");
        let label: usize = label_field.parse().map_err(|_| {
            Error::Parse(format!("line {line_no}: bad label '{label_field}'"))
        })?;
        let row: Vec<f64> = fields
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|_| {
                    Error::Parse(format!("line {line_no}: bad feature value '{f}'"))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "line {line_no}: non-finite feature value '{f}'"
                    )));
                }
                Ok(v)
            })
            .collect::<Result<_>>()?;
        if row.is_empty() {
            return Err(Error::Parse(format!("line {line_no}: no feature values")));
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse(format!(
                    "line {line_no}: expected {d} features, got {}",
                    row.len()
                )));
            }
            _ => {}
        }
        data.extend(row);
        labels.push(label);
    }
    let d = dim.ok_or_else(|| Error::Parse("no data rows in CSV".into()))?;
    LabeledSet::new(Tensor::new(vec![labels.len(), d], data)?, labels)
}
