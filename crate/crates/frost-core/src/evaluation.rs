//! Evaluation protocols and report emission.
//!
//! Two protocols are supported:
//!
//! * `class-incd` — every test sample, old or new, is scored through the
//!   joint task-agnostic head. New-class ground truth is first reassigned
//!   into cluster space with an optimal one-to-one relabelling so that the
//!   arbitrary ordering of discovered clusters is not penalised.
//! * `original-rt` — the older convention this work argues against: old
//!   classes are scored with the task-aware stage-one head, new classes as
//!   pure clustering quality, and the pooled score through a concatenated
//!   predictor with an optimal relabelling over everything.

use serde::{Deserialize, Serialize};

use crate::assignment::optimal_label_mapping_with_k;
use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{rows_argmax, Backbone, Head, ModelBundle};
use crate::tensor::Tensor;

/// Which evaluation convention produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "class-incd")]
    ClassIncd,
    #[serde(rename = "original-rt")]
    OriginalRt,
}

/// Accuracies are rounded to four decimals when a report is built.
fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

/// Final evaluation artefact for one protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub old_acc: f64,
    pub new_acc: f64,
    pub all_acc: f64,
    /// Joint-head accuracy per discovery step (class-incd only).
    pub step_new_joint: Vec<f64>,
    /// Fresh clustering accuracy of each step's novel view.
    pub step_new_novel: Vec<f64>,
    /// Rows are (reassigned) ground-truth classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Per-class joint-head row norms (weight row and bias together).
    pub head_norms: Vec<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Confusion matrix as CSV: header row of predicted indices, then one
    /// line per true class.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::new();
        for j in 0..k {
            out.push(',');
            out.push_str(&j.to_string());
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Per-class head norms as CSV.
    pub fn norms_csv(&self) -> String {
        let mut out = String::from("class,norm\n");
        for (c, n) in self.head_norms.iter().enumerate() {
            out.push_str(&format!("{c},{n:?}\n"));
        }
        out
    }
}

/// Ground truth for new classes re-expressed in cluster space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReassignedGroundTruth {
    /// `class_to_cluster[g]` is the cluster that optimally stands for class `g`.
    pub class_to_cluster: Vec<usize>,
    /// `per_sample[i]` is `class_to_cluster[gt[i]]`.
    pub per_sample: Vec<usize>,
    /// Accuracy of the clusters against ground truth under the optimal
    /// relabelling (protocol-free clustering quality).
    pub clustering_accuracy: f64,
}

/// Optimally relabels clusters against step-relative ground truth over an
/// index space of `k` clusters and rewrites the ground truth into cluster
/// indices.
pub fn reassign_new_ground_truth(
    clusters: &[usize],
    ground_truth_rel: &[usize],
    k: usize,
) -> Result<ReassignedGroundTruth> {
    let mapping = optimal_label_mapping_with_k(clusters, ground_truth_rel, k)?;
    let class_to_cluster = mapping.class_to_cluster();
    let per_sample = ground_truth_rel
        .iter()
        .map(|&g| class_to_cluster[g])
        .collect();
    Ok(ReassignedGroundTruth {
        class_to_cluster,
        per_sample,
        clustering_accuracy: mapping.accuracy,
    })
}

/// Prediction-level inputs for one discovery step under `class-incd`.
#[derive(Debug, Clone)]
pub struct StepPredictions {
    /// Joint-head argmax over all classes for each new-class test sample.
    pub joint_predictions: Vec<usize>,
    /// Novel-view cluster per sample, in `[0, n_new)`.
    pub clusters: Vec<usize>,
    /// Step-relative ground truth per sample, in `[0, n_new)`.
    pub ground_truth_rel: Vec<usize>,
    /// Global class id of this step's first class.
    pub offset: usize,
    /// Number of classes in this step.
    pub n_new: usize,
    /// Class-to-cluster mapping frozen when the step finished training;
    /// `None` derives a fresh one from the clusters at hand.
    pub frozen_map: Option<Vec<usize>>,
}

/// Raw (unrounded) accuracies and the confusion matrix for `class-incd`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIncdOutcome {
    pub old_acc: f64,
    pub new_acc: f64,
    pub all_acc: f64,
    pub step_new_joint: Vec<f64>,
    pub step_new_novel: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

fn validate_permutation(map: &[usize], k: usize) -> Result<()> {
    if map.len() != k {
        return Err(Error::Validation(format!(
            "mapping has {} entries, expected {k}",
            map.len()
        )));
    }
    let mut seen = vec![false; k];
    for &c in map {
        if c >= k || seen[c] {
            return Err(Error::Validation(format!(
                "mapping {map:?} is not a permutation of 0..{k}"
            )));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Core of the `class-incd` protocol, working purely on predictions so it
/// can be exercised without a model.
pub fn class_incd_accuracies(
    old_joint_predictions: &[usize],
    old_ground_truth: &[usize],
    steps: &[StepPredictions],
    n_old: usize,
    n_all: usize,
) -> Result<ClassIncdOutcome> {
    if old_joint_predictions.len() != old_ground_truth.len() || old_joint_predictions.is_empty() {
        return Err(Error::Validation(
            "old-class predictions and ground truth must be non-empty and equal length".into(),
        ));
    }
    if steps.is_empty() {
        return Err(Error::Validation("need at least one discovery step".into()));
    }
    if old_ground_truth.iter().any(|&g| g >= n_old)
        || old_joint_predictions.iter().any(|&p| p >= n_all)
    {
        return Err(Error::Validation("old-class labels out of range".into()));
    }

    let mut confusion = vec![vec![0u64; n_all]; n_all];
    let mut old_hits = 0usize;
    for (&p, &g) in old_joint_predictions.iter().zip(old_ground_truth) {
        if p == g {
            old_hits += 1;
        }
        confusion[g][p] += 1;
    }

    let mut step_new_joint = Vec::with_capacity(steps.len());
    let mut step_new_novel = Vec::with_capacity(steps.len());
    let mut new_hits = 0usize;
    let mut new_total = 0usize;
    for step in steps {
        let n = step.joint_predictions.len();
        if n == 0 || step.clusters.len() != n || step.ground_truth_rel.len() != n {
            return Err(Error::Validation(
                "step predictions, clusters and ground truth must be non-empty and equal length"
                    .into(),
            ));
        }
        if step.offset + step.n_new > n_all {
            return Err(Error::Validation(format!(
                "step block {}..{} exceeds {n_all} classes",
                step.offset,
                step.offset + step.n_new
            )));
        }
        if step.joint_predictions.iter().any(|&p| p >= n_all) {
            return Err(Error::Validation("joint prediction out of range".into()));
        }
        let fresh = reassign_new_ground_truth(&step.clusters, &step.ground_truth_rel, step.n_new)?;
        step_new_novel.push(fresh.clustering_accuracy);
        let map: &[usize] = match &step.frozen_map {
            Some(m) => {
                validate_permutation(m, step.n_new)?;
                m
            }
            None => &fresh.class_to_cluster,
        };
        let mut hits = 0usize;
        for (&pred, &gt) in step.joint_predictions.iter().zip(&step.ground_truth_rel) {
            let expected = step.offset + map[gt];
            if pred == expected {
                hits += 1;
            }
            confusion[expected][pred] += 1;
        }
        step_new_joint.push(hits as f64 / n as f64);
        new_hits += hits;
        new_total += n;
    }

    Ok(ClassIncdOutcome {
        old_acc: old_hits as f64 / old_ground_truth.len() as f64,
        new_acc: new_hits as f64 / new_total as f64,
        all_acc: (old_hits + new_hits) as f64 / (old_ground_truth.len() + new_total) as f64,
        step_new_joint,
        step_new_novel,
        confusion,
    })
}

/// One discovery step's test data and the head that clusters it.
pub struct StepEvalInput<'a> {
    pub test: &'a LabeledSet,
    pub head: &'a Head,
    pub frozen_map: Option<&'a [usize]>,
}

/// `class-incd` over a single discovery step using the model's current
/// novel view.
pub fn eval_class_incd(
    model: &ModelBundle,
    test_old: &LabeledSet,
    test_new: &LabeledSet,
) -> Result<EvalReport> {
    let head = model.novel_view_head()?;
    let steps = [StepEvalInput {
        test: test_new,
        head: &head,
        frozen_map: None,
    }];
    eval_class_incd_multi(model, test_old, &steps)
}

/// `class-incd` over any number of discovery steps. Step blocks are laid
/// out consecutively after the old classes, in the order given.
pub fn eval_class_incd_multi(
    model: &ModelBundle,
    test_old: &LabeledSet,
    steps: &[StepEvalInput],
) -> Result<EvalReport> {
    let n_all = model.n_all();
    let covered: usize = steps.iter().map(|s| s.head.classes()).sum();
    // Classes not covered by any step head are the original old ones; with
    // several steps the model may already count earlier steps as old.
    let base = n_all
        .checked_sub(covered)
        .filter(|&b| b > 0)
        .ok_or_else(|| {
            Error::Validation(format!(
                "step heads cover {covered} classes, model only has {n_all}"
            ))
        })?;
    let old_pred = model.joint_predictions(&test_old.features)?;

    let mut step_inputs = Vec::with_capacity(steps.len());
    let mut offset = base;
    for step in steps {
        if step.head.feature_dim() != model.feature_dim() {
            return Err(Error::Validation(
                "step head feature width does not match the backbone".into(),
            ));
        }
        let feats = model.forward_features(&step.test.features)?;
        let clusters = rows_argmax(&step.head.logits(&feats)?)?;
        let joint = rows_argmax(&model.joint_head.logits(&feats)?)?;
        step_inputs.push(StepPredictions {
            joint_predictions: joint,
            clusters,
            ground_truth_rel: step.test.labels.clone(),
            offset,
            n_new: step.head.classes(),
            frozen_map: step.frozen_map.map(|m| m.to_vec()),
        });
        offset += step.head.classes();
    }

    let out = class_incd_accuracies(&old_pred, &test_old.labels, &step_inputs, base, n_all)?;
    Ok(EvalReport {
        protocol: Protocol::ClassIncd,
        old_acc: round4(out.old_acc),
        new_acc: round4(out.new_acc),
        all_acc: round4(out.all_acc),
        step_new_joint: out.step_new_joint.into_iter().map(round4).collect(),
        step_new_novel: out.step_new_novel.into_iter().map(round4).collect(),
        confusion: out.confusion,
        head_norms: model.joint_head.weight_norms(),
    })
}

/// The `original-rt` convention for a single discovery step: task-aware old
/// accuracy, clustering-quality new accuracy, and a pooled score through the
/// concatenated old-and-novel predictor with optimal relabelling.
pub fn eval_original_rt(
    model: &ModelBundle,
    test_old: &LabeledSet,
    test_new: &LabeledSet,
) -> Result<EvalReport> {
    if test_old.is_empty() || test_new.is_empty() {
        return Err(Error::Validation("evaluation sets must be non-empty".into()));
    }
    let n_old = model.n_old;
    let n_new = model.n_new;
    let n_all = model.n_all();
    if test_old.labels.iter().any(|&g| g >= n_old)
        || test_new.labels.iter().any(|&g| g >= n_new)
    {
        return Err(Error::Validation("test labels out of range".into()));
    }

    let old_pred = model.old_head_predictions(&test_old.features)?;
    let old_hits = old_pred
        .iter()
        .zip(&test_old.labels)
        .filter(|(p, g)| p == g)
        .count();
    let old_acc = old_hits as f64 / test_old.len() as f64;

    let clusters = model.novel_clusters(&test_new.features)?;
    let fresh = reassign_new_ground_truth(&clusters, &test_new.labels, n_new)?;
    let new_acc = fresh.clustering_accuracy;

    let mut pooled_pred = model.concat_predictions(&test_old.features)?;
    pooled_pred.extend(model.concat_predictions(&test_new.features)?);
    let mut pooled_gt: Vec<usize> = test_old.labels.clone();
    pooled_gt.extend(test_new.labels.iter().map(|&g| n_old + g));
    let all_mapping = optimal_label_mapping_with_k(&pooled_pred, &pooled_gt, n_all)?;

    let mut confusion = vec![vec![0u64; n_all]; n_all];
    for (&p, &g) in pooled_pred.iter().zip(&pooled_gt) {
        confusion[g][p] += 1;
    }

    let mut head_norms = model.old_head.weight_norms();
    head_norms.extend(model.novel_view_head()?.weight_norms());

    Ok(EvalReport {
        protocol: Protocol::OriginalRt,
        old_acc: round4(old_acc),
        new_acc: round4(new_acc),
        all_acc: round4(all_mapping.accuracy),
        step_new_joint: Vec::new(),
        step_new_novel: vec![round4(new_acc)],
        confusion,
        head_norms,
    })
}

/// A backbone that computes the identity map: hidden width twice the input,
/// first layer producing `(x, -x)`, second recombining `relu(x) - relu(-x)`.
pub fn identity_backbone(dim: usize) -> Result<Backbone> {
    if dim == 0 {
        return Err(Error::Param {
            name: "dim",
            detail: "identity backbone needs a positive dimension".into(),
        });
    }
    let mut w1 = vec![0.0; dim * 2 * dim];
    for i in 0..dim {
        w1[i * 2 * dim + i] = 1.0;
        w1[i * 2 * dim + dim + i] = -1.0;
    }
    let mut w2 = vec![0.0; 2 * dim * dim];
    for i in 0..dim {
        w2[i * dim + i] = 1.0;
        w2[(dim + i) * dim + i] = -1.0;
    }
    Ok(Backbone {
        w1: Tensor::new(vec![dim, 2 * dim], w1)?,
        b1: Tensor::zeros(vec![2 * dim])?,
        w2: Tensor::new(vec![2 * dim, dim], w2)?,
        b2: Tensor::zeros(vec![dim])?,
    })
}

/// A linear head whose argmax is the nearest of the given mean vectors:
/// row `2 mu_c`, bias `-|mu_c|^2`.
pub fn nearest_mean_head(means: &Tensor) -> Result<Head> {
    let (k, d) = means.dims2()?;
    let mut weight = Vec::with_capacity(k * d);
    let mut bias = Vec::with_capacity(k);
    for c in 0..k {
        let row = means.row(c)?;
        weight.extend(row.iter().map(|v| 2.0 * v));
        bias.push(-row.iter().map(|v| v * v).sum::<f64>());
    }
    Ok(Head {
        weight: Tensor::new(vec![k, d], weight)?,
        bias: Tensor::new(vec![k], bias)?,
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if ca != cb {
        return Err(Error::Shape {
            op: "stack_rows",
            detail: format!("widths {ca} vs {cb}"),
        });
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![ra + rb, ca], data)
}

/// A predictor that is ideal under both protocols: identity backbone and
/// nearest-mean heads aligned with the true class means.
pub fn oracle_bundle(class_means: &Tensor, n_old: usize) -> Result<ModelBundle> {
    let (k, d) = class_means.dims2()?;
    if n_old == 0 || n_old >= k {
        return Err(Error::Validation(format!(
            "need old and new classes, got {n_old} of {k}"
        )));
    }
    let n_new = k - n_old;
    let old_means = class_means.slice_rows(0, n_old)?;
    let new_means = class_means.slice_rows(n_old, n_new)?;
    Ok(ModelBundle {
        backbone: identity_backbone(d)?,
        frozen_backbone: None,
        old_head: nearest_mean_head(&old_means)?,
        joint_head: nearest_mean_head(class_means)?,
        novel_head: Some(nearest_mean_head(&new_means)?),
        n_old,
        n_new,
    })
}

/// A predictor built to separate the two protocols: the old head carries the
/// new-class means and vice versa, so every individual head is wrong about
/// its own task, yet the pooled relabelled score stays perfect.
pub fn swap_bundle(class_means: &Tensor, n_old: usize) -> Result<ModelBundle> {
    let (k, d) = class_means.dims2()?;
    let n_new = k.checked_sub(n_old).filter(|&n| n > 0).ok_or_else(|| {
        Error::Validation(format!("need old and new classes, got {n_old} of {k}"))
    })?;
    if n_new != n_old {
        return Err(Error::Validation(
            "the swap construction needs equal old and new class counts".into(),
        ));
    }
    let old_means = class_means.slice_rows(0, n_old)?;
    let new_means = class_means.slice_rows(n_old, n_new)?;
    let crossed = stack_rows(&new_means, &old_means)?;
    Ok(ModelBundle {
        backbone: identity_backbone(d)?,
        frozen_backbone: None,
        old_head: nearest_mean_head(&new_means)?,
        joint_head: nearest_mean_head(&crossed)?,
        novel_head: Some(nearest_mean_head(&old_means)?),
        n_old,
        n_new,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TaskSpec;
    use rand::Rng;

    fn tiny_task() -> crate::datagen::SplitSet {
        let mut spec = TaskSpec::from_profile("p5-5", 0).unwrap();
        spec.noise_sigma = 1e-9;
        spec.train_per_class = 5;
        spec.test_per_class = 8;
        spec.generate().unwrap()
    }

    #[test]
    fn identity_backbone_reproduces_its_input() {
        let bb = identity_backbone(4).unwrap();
        let x = Tensor::new(vec![2, 4], vec![1.5, -2.0, 0.0, 3.25, -0.5, 0.25, -4.0, 2.0]).unwrap();
        let y = bb.features(&x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn nearest_mean_head_picks_the_closest_mean() {
        let means = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let head = nearest_mean_head(&means).unwrap();
        let x = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.4, 1.5]]).unwrap();
        let preds = rows_argmax(&head.logits(&x).unwrap()).unwrap();
        assert_eq!(preds, vec![0, 1]);
    }

    #[test]
    fn oracle_bundle_is_perfect_under_both_protocols() {
        let data = tiny_task();
        let m = oracle_bundle(&data.class_means, data.spec.old_classes).unwrap();
        m.validate().unwrap();
        let incd = eval_class_incd(&m, &data.test_old, &data.test_new[0]).unwrap();
        assert_eq!(
            (incd.old_acc, incd.new_acc, incd.all_acc),
            (1.0, 1.0, 1.0)
        );
        let rt = eval_original_rt(&m, &data.test_old, &data.test_new[0]).unwrap();
        assert_eq!((rt.old_acc, rt.new_acc, rt.all_acc), (1.0, 1.0, 1.0));
    }

    #[test]
    fn swap_bundle_separates_the_protocols() {
        let data = tiny_task();
        let m = swap_bundle(&data.class_means, data.spec.old_classes).unwrap();
        m.validate().unwrap();
        let incd = eval_class_incd(&m, &data.test_old, &data.test_new[0]).unwrap();
        assert_eq!(
            (incd.old_acc, incd.new_acc, incd.all_acc),
            (0.0, 0.0, 0.0)
        );
        let rt = eval_original_rt(&m, &data.test_old, &data.test_new[0]).unwrap();
        assert_eq!(rt.all_acc, 1.0);
    }

    #[test]
    fn hand_worked_prediction_level_example() {
        // Four old classes, one step of two new ones (globals 4 and 5).
        let old_pred = vec![0, 1, 2, 0];
        let old_gt = vec![0, 1, 2, 3]; // three of four correct
        let step = StepPredictions {
            joint_predictions: vec![5, 0, 4, 1],
            clusters: vec![1, 1, 0, 0],
            ground_truth_rel: vec![0, 0, 1, 1],
            offset: 4,
            n_new: 2,
            frozen_map: None,
        };
        let out = class_incd_accuracies(&old_pred, &old_gt, &[step], 4, 6).unwrap();
        // Clusters match ground truth perfectly up to the swap 0 <-> 1, so the
        // reassigned targets are [5, 5, 4, 4] and two joint predictions hit.
        assert!((out.old_acc - 0.75).abs() < 1e-12);
        assert!((out.new_acc - 0.5).abs() < 1e-12);
        assert!((out.all_acc - 0.625).abs() < 1e-12);
        assert_eq!(out.step_new_novel, vec![1.0]);
        assert_eq!(out.confusion[5][5], 1);
        assert_eq!(out.confusion[5][0], 1);
        assert_eq!(out.confusion[4][4], 1);
        assert_eq!(out.confusion[4][1], 1);
        assert_eq!(out.confusion[3][0], 1);
    }

    #[test]
    fn frozen_mapping_overrides_the_fresh_one() {
        let old_pred = vec![0];
        let old_gt = vec![0];
        let step = StepPredictions {
            joint_predictions: vec![5, 0, 4, 1],
            clusters: vec![1, 1, 0, 0],
            ground_truth_rel: vec![0, 0, 1, 1],
            offset: 4,
            n_new: 2,
            frozen_map: Some(vec![0, 1]), // identity instead of the swap
        };
        let out = class_incd_accuracies(&old_pred, &old_gt, &[step], 4, 6).unwrap();
        // Targets become [4, 4, 5, 5]; none of the joint predictions match,
        // while the clustering quality stays perfect.
        assert_eq!(out.new_acc, 0.0);
        assert_eq!(out.step_new_novel, vec![1.0]);
        let bad = StepPredictions {
            frozen_map: Some(vec![0, 0]),
            ..StepPredictions {
                joint_predictions: vec![4],
                clusters: vec![0],
                ground_truth_rel: vec![0],
                offset: 4,
                n_new: 2,
                frozen_map: None,
            }
        };
        assert!(class_incd_accuracies(&old_pred, &old_gt, &[bad], 4, 6).is_err());
    }

    #[test]
    fn relabelling_makes_reports_invariant_to_novel_row_permutation() {
        let data = tiny_task();
        let base = oracle_bundle(&data.class_means, 5).unwrap();
        let baseline = eval_class_incd(&base, &data.test_old, &data.test_new[0]).unwrap();

        // Rotate the novel head rows and the joint head's new block the same
        // way; the joint head then predicts permuted cluster ids.
        let mut permuted = base.clone();
        let novel = permuted.novel_head.as_ref().unwrap();
        let rot = |t: &Tensor, rows: usize| -> Tensor {
            let mut out = t.slice_rows(1, rows - 1).unwrap().data().to_vec();
            out.extend_from_slice(t.slice_rows(0, 1).unwrap().data());
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };
        let new_w = rot(&novel.weight, 5);
        let nb: Vec<f64> = novel.bias.data()[1..]
            .iter()
            .chain(&novel.bias.data()[..1])
            .copied()
            .collect();
        permuted.novel_head = Some(Head {
            weight: new_w,
            bias: Tensor::new(vec![5], nb).unwrap(),
        });
        let old_block = permuted.joint_head.slice_rows(0, 5).unwrap();
        let new_block = permuted.joint_head.slice_rows(5, 5).unwrap();
        let joint_w = stack_rows(&old_block.weight, &rot(&new_block.weight, 5)).unwrap();
        let jb: Vec<f64> = old_block
            .bias
            .data()
            .iter()
            .chain(new_block.bias.data()[1..].iter())
            .chain(new_block.bias.data()[..1].iter())
            .copied()
            .collect();
        permuted.joint_head = Head {
            weight: joint_w,
            bias: Tensor::new(vec![10], jb).unwrap(),
        };

        let report = eval_class_incd(&permuted, &data.test_old, &data.test_new[0]).unwrap();
        assert_eq!(report.old_acc, baseline.old_acc);
        assert_eq!(report.new_acc, baseline.new_acc);
        assert_eq!(report.all_acc, baseline.all_acc);
    }

    #[test]
    fn random_two_cluster_accuracy_matches_binomial_expectation() {
        // With predictions independent of ground truth, the relabelled
        // accuracy over n samples is max(B, n - B)/n for B ~ Binomial(n, 1/2).
        let n = 9usize;
        let trials = 1000usize;
        let mut expect = 0.0;
        for b in 0..=n {
            let comb = (0..b).fold(1.0f64, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
            expect += comb * 0.5f64.powi(n as i32) * b.max(n - b) as f64 / n as f64;
        }
        let mut rng = crate::rng::substream(21, "binomial-eval");
        let mut mean = 0.0;
        for _ in 0..trials {
            let clusters: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let gt: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let r = reassign_new_ground_truth(&clusters, &gt, 2).unwrap();
            mean += r.clustering_accuracy;
        }
        mean /= trials as f64;
        assert!(
            (mean - expect).abs() < 0.05,
            "monte-carlo {mean} vs exact {expect}"
        );
    }

    #[test]
    fn reports_round_to_four_decimals() {
        let old_pred = vec![0, 0, 1];
        let old_gt = vec![0, 1, 1]; // 2/3
        let step = StepPredictions {
            joint_predictions: vec![2, 2, 3],
            clusters: vec![0, 0, 1],
            ground_truth_rel: vec![0, 0, 1],
            offset: 2,
            n_new: 2,
            frozen_map: None,
        };
        let out = class_incd_accuracies(&old_pred, &old_gt, &[step], 2, 4).unwrap();
        assert!((round4(out.old_acc) - 0.6667).abs() < 1e-12);
        assert_eq!(round4(out.new_acc), 1.0);
        assert!((round4(out.all_acc) - 0.8333).abs() < 1e-12);
    }

    #[test]
    fn report_json_and_csv_round_trip() {
        let data = tiny_task();
        let m = oracle_bundle(&data.class_means, 5).unwrap();
        let report = eval_class_incd(&m, &data.test_old, &data.test_new[0]).unwrap();
        let text = report.to_json().unwrap();
        assert!(text.contains("\"class-incd\""));
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report, back);

        let csv = report.confusion_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), ",0,1,2,3,4,5,6,7,8,9");
        assert_eq!(csv.lines().count(), 11);
        // Diagonal is full: 8 test samples per class.
        assert!(csv.lines().nth(1).unwrap().starts_with("0,8,"));

        let norms = report.norms_csv();
        assert!(norms.starts_with("class,norm\n"));
        assert_eq!(norms.lines().count(), 11);
    }

    #[test]
    fn reassignment_validates_inputs() {
        assert!(reassign_new_ground_truth(&[0, 2], &[0, 1], 2).is_err());
        assert!(reassign_new_ground_truth(&[], &[], 2).is_err());
        assert!(reassign_new_ground_truth(&[0], &[0, 1], 2).is_err());
    }
}
