//! Training objectives: supervised cross-entropy, logit distillation,
//! rank-statistics pairwise labels with their BCE, self-training on pseudo
//! labels, two-view consistency, prototype replay, feature distillation,
//! and the weighted combination with exponential ramp-up schedules.
//!
//! Log arguments are always clamped to a floor of 1e-7; pair similarities
//! additionally to a ceiling of 1 - 1e-7.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Floor applied to every log argument.
pub const LOG_CLAMP_FLOOR: f64 = 1e-7;

/// Sigmoid-shaped exponential ramp: value(t) = gamma * exp(-5 (1 - min(t,T)/T)^2).
///
/// value(0) = gamma * e^-5, strictly increasing up to value(T) = gamma exactly,
/// constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampUpSchedule {
    pub gamma: f64,
    pub length: usize,
}

impl RampUpSchedule {
    pub fn new(gamma: f64, length: usize) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Param {
                name: "gamma",
                detail: format!("must be finite and non-negative, got {gamma}"),
            });
        }
        if length == 0 {
            return Err(Error::Param {
                name: "length",
                detail: "ramp length must be positive".into(),
            });
        }
        Ok(RampUpSchedule { gamma, length })
    }

    pub fn value(&self, t: usize) -> f64 {
        if t >= self.length {
            return self.gamma;
        }
        let frac = t as f64 / self.length as f64;
        self.gamma * (-5.0 * (1.0 - frac) * (1.0 - frac)).exp()
    }
}

/// One-hot encoding of integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Validation("one_hot of empty label list".into()));
    }
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn validate_one_hot(targets: &Tensor) -> Result<()> {
    let (rows, cols) = targets.dims2()?;
    for r in 0..rows {
        let row = targets.row(r)?;
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != cols - 1 {
            return Err(Error::Validation(format!(
                "row {r} is not one-hot: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Supervised cross-entropy over one-hot targets, scaled by the reciprocal
/// of the class count: mean_batch( -(1/C) sum_k y_k log softmax(l)_k ).
pub fn cross_entropy_supervised(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let (b, c) = tape.value(logits).dims2()?;
    let (tb, tc) = targets.dims2()?;
    if (tb, tc) != (b, c) {
        return Err(Error::Shape {
            op: "cross_entropy_supervised",
            detail: format!("logits [{b}, {c}] vs targets [{tb}, {tc}]"),
        });
    }
    validate_one_hot(targets)?;
    let mask = tape.leaf(targets.clone());
    let probs = tape.softmax(logits, 1.0)?;
    let clamped = tape.clamp(probs, LOG_CLAMP_FLOOR, f64::INFINITY)?;
    let logs = tape.log(clamped)?;
    let picked = tape.mul(logs, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / (b as f64 * c as f64))
}

/// Which output of the old model the distillation loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LwfMode {
    /// Cross-entropy between temperature-softened distributions.
    Softmax,
    /// Mean squared difference of the raw logits.
    PreSoftmax,
}

/// Learning-without-forgetting distillation of old-class logits. The frozen
/// logits act as a constant teacher; gradients reach only the live side.
pub fn lwf_logit_kd(
    tape: &mut Tape,
    frozen_old_logits: &Tensor,
    live_old_logits: Var,
    temperature: f64,
    mode: LwfMode,
) -> Result<Var> {
    let (b, c) = tape.value(live_old_logits).dims2()?;
    if frozen_old_logits.dims2()? != (b, c) {
        return Err(Error::Shape {
            op: "lwf_logit_kd",
            detail: format!(
                "frozen {:?} vs live [{b}, {c}]",
                frozen_old_logits.shape()
            ),
        });
    }
    match mode {
        LwfMode::Softmax => {
            let teacher = frozen_old_logits.softmax(temperature)?;
            let teacher = tape.leaf(teacher);
            let student = tape.softmax(live_old_logits, temperature)?;
            let clamped = tape.clamp(student, LOG_CLAMP_FLOOR, f64::INFINITY)?;
            let logs = tape.log(clamped)?;
            let prod = tape.mul(logs, teacher)?;
            let total = tape.sum(prod)?;
            tape.scale(total, -1.0 / (b as f64 * c as f64))
        }
        LwfMode::PreSoftmax => {
            if !(temperature > 0.0) {
                return Err(Error::Param {
                    name: "temperature",
                    detail: format!("must be positive, got {temperature}"),
                });
            }
            let teacher = tape.leaf(frozen_old_logits.clone());
            let diff = tape.sub(live_old_logits, teacher)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq)?;
            tape.scale(total, 1.0 / (b as f64 * c as f64))
        }
    }
}

/// Indices of the k largest entries; value ties prefer the lower index.
fn topk_indices(z: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| {
        z[b].partial_cmp(&z[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// Rank-statistics pseudo label for one pair: 1 iff the top-k index sets of
/// the two feature vectors coincide.
pub fn rank_stats_pair_label(zi: &[f64], zj: &[f64], k: usize) -> Result<bool> {
    if zi.len() != zj.len() {
        return Err(Error::Shape {
            op: "rank_stats_pair_label",
            detail: format!("{} vs {} dims", zi.len(), zj.len()),
        });
    }
    if k == 0 || k > zi.len() {
        return Err(Error::Param {
            name: "top_k",
            detail: format!("k = {k} for {}-dim features", zi.len()),
        });
    }
    Ok(topk_indices(zi, k) == topk_indices(zj, k))
}

/// Pair labels for every unordered pair (i < j) of rows, in row-major order.
pub fn rank_pair_labels(features: &Tensor, k: usize) -> Result<Vec<bool>> {
    let (b, d) = features.dims2()?;
    if k == 0 || k > d {
        return Err(Error::Param {
            name: "top_k",
            detail: format!("k = {k} for {d}-dim features"),
        });
    }
    let sets: Vec<Vec<usize>> = (0..b)
        .map(|i| Ok(topk_indices(features.row(i)?, k)))
        .collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(b * (b.saturating_sub(1)) / 2);
    for i in 0..b {
        for j in i + 1..b {
            labels.push(sets[i] == sets[j]);
        }
    }
    Ok(labels)
}

/// Binary cross-entropy on the softmax-dot similarity of one pair of novel
/// logits: p = <softmax(l_i), softmax(l_j)>, clamped to [1e-7, 1 - 1e-7].
pub fn pairwise_bce(tape: &mut Tape, logits_i: Var, logits_j: Var, positive: bool) -> Result<Var> {
    let si = tape.value(logits_i).shape().to_vec();
    if si != tape.value(logits_j).shape() {
        return Err(Error::Shape {
            op: "pairwise_bce",
            detail: "pair logit shapes differ".into(),
        });
    }
    let pi = tape.softmax(logits_i, 1.0)?;
    let pj = tape.softmax(logits_j, 1.0)?;
    let prod = tape.mul(pi, pj)?;
    let p = tape.sum(prod)?;
    let p = if positive {
        tape.clamp(p, LOG_CLAMP_FLOOR, 1.0 - LOG_CLAMP_FLOOR)?
    } else {
        let neg = tape.scale(p, -1.0)?;
        let q = tape.add_scalar(neg, 1.0)?;
        tape.clamp(q, LOG_CLAMP_FLOOR, 1.0 - LOG_CLAMP_FLOOR)?
    };
    let lp = tape.log(p)?;
    tape.scale(lp, -1.0)
}

/// Mean pairwise BCE over every unordered pair (i < j) within a batch of
/// novel logits. `labels` follows the order produced by `rank_pair_labels`.
pub fn pairwise_bce_all_pairs(tape: &mut Tape, novel_logits: Var, labels: &[bool]) -> Result<Var> {
    let (b, _c) = tape.value(novel_logits).dims2()?;
    if b < 2 {
        return Err(Error::Validation(
            "pairwise BCE needs a batch of at least two".into(),
        ));
    }
    let pairs = b * (b - 1) / 2;
    if labels.len() != pairs {
        return Err(Error::Validation(format!(
            "expected {pairs} pair labels for batch {b}, got {}",
            labels.len()
        )));
    }
    let mut pos = vec![0.0; b * b];
    let mut neg = vec![0.0; b * b];
    let mut idx = 0;
    for i in 0..b {
        for j in i + 1..b {
            if labels[idx] {
                pos[i * b + j] = 1.0;
            } else {
                neg[i * b + j] = 1.0;
            }
            idx += 1;
        }
    }
    let pos = tape.leaf(Tensor::new(vec![b, b], pos)?);
    let neg = tape.leaf(Tensor::new(vec![b, b], neg)?);

    let probs = tape.softmax(novel_logits, 1.0)?;
    let probs_t = tape.transpose(probs)?;
    let sim = tape.matmul(probs, probs_t)?; // sim[i][j] = <p_i, p_j>
    let sim_pos = tape.clamp(sim, LOG_CLAMP_FLOOR, 1.0 - LOG_CLAMP_FLOOR)?;
    let log_pos = tape.log(sim_pos)?;
    let flipped = tape.scale(sim, -1.0)?;
    let one_minus = tape.add_scalar(flipped, 1.0)?;
    let sim_neg = tape.clamp(one_minus, LOG_CLAMP_FLOOR, 1.0 - LOG_CLAMP_FLOOR)?;
    let log_neg = tape.log(sim_neg)?;

    let pos_part = tape.mul(log_pos, pos)?;
    let neg_part = tape.mul(log_neg, neg)?;
    let both = tape.add(pos_part, neg_part)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0 / pairs as f64)
}

/// Pseudo label for one sample: offset plus the argmax of its novel logits
/// (value ties take the lower index). Detached by construction — this reads
/// plain values, never tape nodes.
pub fn make_pseudo_label(novel_logits: &[f64], n_old: usize) -> usize {
    n_old + argmax(novel_logits)
}

/// Self-training cross-entropy of joint logits against pseudo labels,
/// scaled by the reciprocal of the total class count.
pub fn self_training_loss(tape: &mut Tape, joint_logits: Var, pseudo: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(joint_logits).dims2()?;
    if pseudo.len() != b {
        return Err(Error::Validation(format!(
            "{} pseudo labels for batch {b}",
            pseudo.len()
        )));
    }
    let targets = one_hot(pseudo, c)?;
    cross_entropy_rows(tape, joint_logits, &targets, 1.0 / (b as f64 * c as f64))
}

/// Two-view consistency: mean squared difference between softmax outputs of
/// the same samples under different augmentations.
pub fn consistency_mse(tape: &mut Tape, probs_a: Var, probs_b: Var) -> Result<Var> {
    let (b, c) = tape.value(probs_a).dims2()?;
    if tape.value(probs_b).dims2()? != (b, c) {
        return Err(Error::Shape {
            op: "consistency_mse",
            detail: "view shapes differ".into(),
        });
    }
    for v in tape
        .value(probs_a)
        .data()
        .iter()
        .chain(tape.value(probs_b).data())
    {
        if !(-1e-12..=1.0 + 1e-12).contains(v) {
            return Err(Error::Validation(
                "consistency inputs must be softmax outputs in [0, 1]".into(),
            ));
        }
    }
    let diff = tape.sub(probs_a, probs_b)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (b as f64 * c as f64))
}

/// Replay cross-entropy on features sampled from old-class prototypes.
/// Plain mean over the batch — no class-count scale factor.
pub fn replay_loss(
    tape: &mut Tape,
    joint_logits: Var,
    labels: &[usize],
    n_old: usize,
) -> Result<Var> {
    let (b, c) = tape.value(joint_logits).dims2()?;
    if labels.len() != b {
        return Err(Error::Validation(format!(
            "{} replay labels for batch {b}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_old) {
        return Err(Error::Validation(format!(
            "replay label {bad} outside old-class range [0, {n_old})"
        )));
    }
    let targets = one_hot(labels, c)?;
    cross_entropy_rows(tape, joint_logits, &targets, 1.0 / b as f64)
}

/// Feature distillation: mean Euclidean distance between frozen-extractor
/// features (constant) and live features, row by row.
pub fn feature_kd(tape: &mut Tape, frozen_features: &Tensor, live_features: Var) -> Result<Var> {
    let (b, d) = tape.value(live_features).dims2()?;
    if frozen_features.dims2()? != (b, d) {
        return Err(Error::Shape {
            op: "feature_kd",
            detail: format!(
                "frozen {:?} vs live [{b}, {d}]",
                frozen_features.shape()
            ),
        });
    }
    let frozen = tape.leaf(frozen_features.clone());
    let diff = tape.sub(live_features, frozen)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.row_sums(sq)?;
    let norms = tape.sqrt(per_row)?;
    let total = tape.sum(norms)?;
    tape.scale(total, 1.0 / b as f64)
}

fn cross_entropy_rows(tape: &mut Tape, logits: Var, targets: &Tensor, scale: f64) -> Result<Var> {
    let mask = tape.leaf(targets.clone());
    let probs = tape.softmax(logits, 1.0)?;
    let clamped = tape.clamp(probs, LOG_CLAMP_FLOOR, f64::INFINITY)?;
    let logs = tape.log(clamped)?;
    let picked = tape.mul(logs, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -scale)
}

/// Loss terms present in one training step. Absent terms contribute nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub supervised: Option<Var>,
    pub bce: Option<Var>,
    pub self_train: Option<Var>,
    pub mse: Option<Var>,
    pub replay: Option<Var>,
    pub feat_kd: Option<Var>,
    pub lwf: Option<Var>,
}

/// Scalar values of every term after weighting metadata, plus the total.
///
/// For a discovery step without distillation substitutes the identity
/// total = bce + omega_self * self_train + omega_mse * mse + replay
///       + lambda * feat_kd
/// holds to within accumulation round-off; `lwf` and `supervised` extend it
/// for the substitution arms and the pretraining stage respectively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub bce: f64,
    pub self_train: f64,
    pub mse: f64,
    pub replay: f64,
    pub feat_kd: f64,
    pub lwf: f64,
    pub omega_self: f64,
    pub omega_mse: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zeroed() -> Self {
        LossBreakdown {
            supervised: 0.0,
            bce: 0.0,
            self_train: 0.0,
            mse: 0.0,
            replay: 0.0,
            feat_kd: 0.0,
            lwf: 0.0,
            omega_self: 0.0,
            omega_mse: 0.0,
            lambda: 0.0,
            total: 0.0,
        }
    }
}

/// Combines weighted loss terms into a single differentiable total.
///
/// Ramp-up weights are evaluated at epoch `t`. Terms that are absent or
/// carry a weight of exactly zero are skipped entirely, so an all-zero
/// weighting yields a constant total with no gradient.
#[allow(clippy::too_many_arguments)]
pub fn frost_total(
    tape: &mut Tape,
    terms: &LossTerms,
    t: usize,
    self_schedule: &RampUpSchedule,
    mse_schedule: &RampUpSchedule,
    lambda: f64,
    w_bce: f64,
    w_replay: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda >= 0.0) || !(w_bce >= 0.0) || !(w_replay >= 0.0) {
        return Err(Error::Param {
            name: "loss weights",
            detail: "weights must be non-negative".into(),
        });
    }
    let omega_self = self_schedule.value(t);
    let omega_mse = mse_schedule.value(t);

    let mut acc: Option<Var> = None;
    let mut weighted = |tape: &mut Tape, term: Option<Var>, w: f64| -> Result<f64> {
        let Some(v) = term else { return Ok(0.0) };
        let raw = tape.value(v).value()?;
        if w == 0.0 {
            return Ok(raw);
        }
        let scaled = if w == 1.0 { v } else { tape.scale(v, w)? };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
        Ok(raw)
    };

    let supervised = weighted(tape, terms.supervised, 1.0)?;
    let bce = weighted(tape, terms.bce, w_bce)?;
    let self_train = weighted(tape, terms.self_train, omega_self)?;
    let mse = weighted(tape, terms.mse, omega_mse)?;
    let replay = weighted(tape, terms.replay, w_replay)?;
    let feat_kd = weighted(tape, terms.feat_kd, lambda)?;
    let lwf = weighted(tape, terms.lwf, 1.0)?;

    let total_var = match acc {
        Some(v) => v,
        None => tape.leaf(Tensor::scalar(0.0)?),
    };
    let breakdown = LossBreakdown {
        supervised,
        bce,
        self_train,
        mse,
        replay,
        feat_kd,
        lwf,
        omega_self,
        omega_mse,
        lambda,
        total: tape.value(total_var).value()?,
    };
    Ok((total_var, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use frost_oracles::{brute_pair_label, finite_difference_gradient};
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_check<F>(build: F, x0: &[f64], tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let n = x0.len();
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(vec![1, n], x.to_vec()).unwrap());
            let loss = build(&mut tape, v);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data()[0],
                tape.grad(v).unwrap().data().to_vec(),
            )
        };
        let (_, g) = eval(x0);
        let fd = finite_difference_gradient(|x| eval(x).0, x0, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= tol * (1.0 + b.abs()), "grad {a} vs fd {b}");
        }
    }

    #[test]
    fn ramp_up_matches_closed_form() {
        let s = RampUpSchedule::new(50.0, 150).unwrap();
        assert!((s.value(0) - 50.0 * (-5.0f64).exp()).abs() < 1e-12);
        assert_eq!(s.value(150), 50.0);
        assert_eq!(s.value(151), 50.0);
        let mid = RampUpSchedule::new(5.0, 50).unwrap();
        assert!((mid.value(25) - 5.0 * (-5.0 * 0.25).exp()).abs() < 1e-12);
    }

    #[test]
    fn ramp_up_is_monotone_on_the_ramp() {
        let s = RampUpSchedule::new(5.0, 50).unwrap();
        for t in 0..50 {
            assert!(s.value(t) < s.value(t + 1));
        }
    }

    #[test]
    fn ramp_up_rejects_bad_parameters() {
        assert!(RampUpSchedule::new(-1.0, 50).is_err());
        assert!(RampUpSchedule::new(1.0, 0).is_err());
    }

    #[test]
    fn supervised_ce_uniform_two_class_is_half_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap());
        let targets = one_hot(&[0], 2).unwrap();
        let loss = cross_entropy_supervised(&mut tape, logits, &targets).unwrap();
        let expect = (2.0f64).ln() / 2.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn supervised_ce_gradient_is_softmax_minus_target_over_c() {
        let raw = vec![0.4, -1.1, 0.9];
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], raw.clone()).unwrap());
        let targets = one_hot(&[2], 3).unwrap();
        let loss = cross_entropy_supervised(&mut tape, logits, &targets).unwrap();
        tape.backward(loss).unwrap();
        let probs = Tensor::new(vec![3], raw).unwrap().softmax(1.0).unwrap();
        let g = tape.grad(logits).unwrap();
        for k in 0..3 {
            let y = if k == 2 { 1.0 } else { 0.0 };
            let expect = (probs.data()[k] - y) / 3.0;
            assert!((g.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn supervised_ce_saturated_correct_logit_is_tiny() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![50.0, -50.0]).unwrap());
        let targets = one_hot(&[0], 2).unwrap();
        let loss = cross_entropy_supervised(&mut tape, logits, &targets).unwrap();
        assert!(tape.value(loss).data()[0] <= 1e-10);
    }

    #[test]
    fn supervised_ce_rejects_non_one_hot_targets() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let bad = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!(cross_entropy_supervised(&mut tape, logits, &bad).is_err());
    }

    #[test]
    fn supervised_ce_matches_finite_differences() {
        let targets = one_hot(&[1], 4).unwrap();
        fd_check(
            |tape, v| cross_entropy_supervised(tape, v, &targets).unwrap(),
            &[0.3, -0.8, 1.2, 0.1],
            1e-6,
        );
    }

    #[test]
    fn lwf_softmax_identical_logits_equals_teacher_self_entropy() {
        let frozen = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let live = tape.leaf(frozen.clone());
        let loss = lwf_logit_kd(&mut tape, &frozen, live, 2.0, LwfMode::Softmax).unwrap();
        let pi = frozen.softmax(2.0).unwrap();
        let expect: f64 = -pi
            .data()
            .iter()
            .map(|p| p * p.ln())
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lwf_presoftmax_identical_logits_is_zero() {
        let frozen = Tensor::new(vec![2, 3], vec![1.0, -0.5, 2.0, 0.0, 0.3, -1.0]).unwrap();
        let mut tape = Tape::new();
        let live = tape.leaf(frozen.clone());
        let loss = lwf_logit_kd(&mut tape, &frozen, live, 2.0, LwfMode::PreSoftmax).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn lwf_hand_example_matches_direct_formula() {
        let frozen = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let live_vals = vec![0.0, 1.0];
        let mut tape = Tape::new();
        let live = tape.leaf(Tensor::new(vec![1, 2], live_vals.clone()).unwrap());
        let loss = lwf_logit_kd(&mut tape, &frozen, live, 1.0, LwfMode::Softmax).unwrap();
        let pf = frozen.softmax(1.0).unwrap();
        let pl = Tensor::new(vec![2], live_vals)
            .unwrap()
            .softmax(1.0)
            .unwrap();
        let expect: f64 = -pf
            .data()
            .iter()
            .zip(pl.data())
            .map(|(f, l)| f * l.ln())
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lwf_gradients_match_finite_differences_in_both_modes() {
        let frozen = Tensor::new(vec![1, 3], vec![0.9, -0.2, 0.4]).unwrap();
        for mode in [LwfMode::Softmax, LwfMode::PreSoftmax] {
            let f = frozen.clone();
            fd_check(
                move |tape, v| lwf_logit_kd(tape, &f, v, 2.0, mode).unwrap(),
                &[0.1, 0.7, -1.3],
                1e-6,
            );
        }
    }

    #[test]
    fn rank_labels_match_spec_examples() {
        assert!(!rank_stats_pair_label(&[3.0, 2.0, 1.0, 0.0], &[0.0, 1.0, 2.0, 3.0], 2).unwrap());
        assert!(rank_stats_pair_label(&[5.0, 4.0, 0.0], &[4.0, 5.0, 0.0], 2).unwrap());
    }

    #[test]
    fn rank_labels_agree_with_brute_force() {
        let mut rng = crate::rng::substream(42, "rank-test");
        for _ in 0..200 {
            let zi: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zj: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            for k in [1, 3, 5] {
                assert_eq!(
                    rank_stats_pair_label(&zi, &zj, k).unwrap(),
                    brute_pair_label(&zi, &zj, k)
                );
            }
        }
    }

    #[test]
    fn rank_pair_labels_order_and_reflexivity() {
        let f = Tensor::from_rows(&[
            vec![5.0, 4.0, 0.0],
            vec![4.0, 5.0, 0.0],
            vec![0.0, 1.0, 9.0],
        ])
        .unwrap();
        let labels = rank_pair_labels(&f, 2).unwrap();
        // pairs in order: (0,1), (0,2), (1,2)
        assert_eq!(labels, vec![true, false, false]);
    }

    proptest! {
        #[test]
        fn rank_label_is_symmetric_and_reflexive(
            zi in proptest::collection::vec(-10.0f64..10.0, 8),
            zj in proptest::collection::vec(-10.0f64..10.0, 8),
            k in 1usize..8,
        ) {
            prop_assert!(rank_stats_pair_label(&zi, &zi, k).unwrap());
            prop_assert_eq!(
                rank_stats_pair_label(&zi, &zj, k).unwrap(),
                rank_stats_pair_label(&zj, &zi, k).unwrap()
            );
        }

        #[test]
        fn rank_label_survives_monotone_transforms(
            zi in proptest::collection::vec(-10.0f64..10.0, 8),
            zj in proptest::collection::vec(-10.0f64..10.0, 8),
            k in 1usize..8,
            scale in 0.1f64..4.0,
            shift in -5.0f64..5.0,
        ) {
            let m = |z: &[f64]| -> Vec<f64> { z.iter().map(|v| v * scale + shift).collect() };
            prop_assert_eq!(
                rank_stats_pair_label(&zi, &zj, k).unwrap(),
                rank_stats_pair_label(&m(&zi), &m(&zj), k).unwrap()
            );
        }

        #[test]
        fn pseudo_label_is_shift_invariant(
            logits in proptest::collection::vec(-10.0f64..10.0, 5),
            shift in -5.0f64..5.0,
            n_old in 0usize..10,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            prop_assert_eq!(
                make_pseudo_label(&logits, n_old),
                make_pseudo_label(&shifted, n_old)
            );
        }
    }

    #[test]
    fn pairwise_bce_same_one_hot_positive_pair_is_tiny() {
        let mut tape = Tape::new();
        let li = tape.leaf(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
        let lj = tape.leaf(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
        let loss = pairwise_bce(&mut tape, li, lj, true).unwrap();
        assert!(tape.value(loss).data()[0] <= 1.1e-6);
    }

    #[test]
    fn pairwise_bce_hand_example() {
        let mut tape = Tape::new();
        let li = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let lj = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let loss = pairwise_bce(&mut tape, li, lj, false).unwrap();
        let a = 1.0f64.exp() / (1.0 + 1.0f64.exp());
        let p = 2.0 * a * (1.0 - a);
        assert!((tape.value(loss).data()[0] - (-(1.0 - p).ln())).abs() < 1e-12);
    }

    #[test]
    fn pairwise_bce_matches_finite_differences() {
        // Differentiate w.r.t. logits_i with logits_j held fixed.
        let fixed = Tensor::new(vec![1, 3], vec![0.2, -0.5, 0.9]).unwrap();
        for positive in [true, false] {
            let f = fixed.clone();
            fd_check(
                move |tape, v| {
                    let lj = tape.leaf(f.clone());
                    pairwise_bce(tape, v, lj, positive).unwrap()
                },
                &[0.4, 0.1, -0.7],
                1e-6,
            );
        }
    }

    #[test]
    fn batch_bce_equals_mean_of_single_pairs() {
        let rows = vec![
            vec![0.5, -0.2, 0.8],
            vec![-0.1, 0.9, 0.3],
            vec![1.2, 0.0, -0.4],
        ];
        let feats = Tensor::from_rows(&rows).unwrap();
        let labels = vec![true, false, true];

        let mut tape = Tape::new();
        let batch = tape.leaf(feats);
        let batched = pairwise_bce_all_pairs(&mut tape, batch, &labels).unwrap();
        let got = tape.value(batched).data()[0];

        let mut expect = 0.0;
        let mut idx = 0;
        for i in 0..3 {
            for j in i + 1..3 {
                let mut t2 = Tape::new();
                let li = t2.leaf(Tensor::new(vec![1, 3], rows[i].clone()).unwrap());
                let lj = t2.leaf(Tensor::new(vec![1, 3], rows[j].clone()).unwrap());
                let l = pairwise_bce(&mut t2, li, lj, labels[idx]).unwrap();
                expect += t2.value(l).data()[0];
                idx += 1;
            }
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_bce_gradient_matches_finite_differences() {
        let labels = vec![true, false, false];
        let x0 = vec![0.5, -0.2, 0.8, -0.1, 0.9, 0.3, 1.2, 0.0, -0.4];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::new(vec![3, 3], x.to_vec()).unwrap());
            let loss = pairwise_bce_all_pairs(&mut tape, v, &labels).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data()[0],
                tape.grad(v).unwrap().data().to_vec(),
            )
        };
        let (_, g) = eval(&x0);
        let fd = finite_difference_gradient(|x| eval(x).0, &x0, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pseudo_labels_offset_and_break_ties_low() {
        assert_eq!(make_pseudo_label(&[0.1, 0.9, 0.3], 5), 6);
        assert_eq!(make_pseudo_label(&[0.7, 0.7], 3), 3);
    }

    #[test]
    fn self_training_uniform_two_class_is_quarter_of_ln4() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = self_training_loss(&mut tape, logits, &[1]).unwrap();
        assert!((tape.value(loss).data()[0] - (2.0f64).ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn self_training_rejects_out_of_range_pseudo_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(self_training_loss(&mut tape, logits, &[2]).is_err());
    }

    #[test]
    fn self_training_matches_finite_differences() {
        fd_check(
            |tape, v| self_training_loss(tape, v, &[2]).unwrap(),
            &[0.3, -0.8, 1.2, 0.1],
            1e-6,
        );
    }

    #[test]
    fn consistency_mse_orthogonal_one_hots_is_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let loss = consistency_mse(&mut tape, a, b).unwrap();
        assert!((tape.value(loss).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_mse_identical_views_is_zero() {
        let probs = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(probs.clone());
        let b = tape.leaf(probs);
        let loss = consistency_mse(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn consistency_mse_gradient_through_softmax_matches_fd() {
        let fixed = Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let f = fixed;
        fd_check(
            move |tape, v| {
                let p = tape.softmax(v, 1.0).unwrap();
                let q = tape.leaf(f.clone());
                consistency_mse(tape, p, q).unwrap()
            },
            &[0.4, -0.6, 0.2],
            1e-6,
        );
    }

    #[test]
    fn replay_loss_uniform_two_class_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = replay_loss(&mut tape, logits, &[0], 2).unwrap();
        assert!((tape.value(loss).data()[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn replay_loss_rejects_new_class_labels() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        assert!(replay_loss(&mut tape, logits, &[2], 2).is_err());
    }

    #[test]
    fn replay_gradient_touches_every_class_row_through_softmax() {
        // One replayed sample of class 0 in a 3-class head: the softmax
        // denominator couples all logits, so no gradient entry is zero.
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.1]).unwrap());
        let loss = replay_loss(&mut tape, logits, &[0], 2).unwrap();
        tape.backward(loss).unwrap();
        for g in tape.grad(logits).unwrap().data() {
            assert!(g.abs() > 1e-6);
        }
    }

    #[test]
    fn replay_matches_finite_differences() {
        fd_check(
            |tape, v| replay_loss(tape, v, &[1], 2).unwrap(),
            &[0.3, -0.8, 1.2, 0.1],
            1e-6,
        );
    }

    #[test]
    fn feature_kd_hand_example_is_five() {
        let frozen = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let live = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 3.0, 4.0]).unwrap());
        let loss = feature_kd(&mut tape, &frozen, live).unwrap();
        assert!((tape.value(loss).data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn feature_kd_identical_features_gives_zero_loss_and_gradient() {
        let frozen = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let mut tape = Tape::new();
        let live = tape.leaf(frozen.clone());
        let loss = feature_kd(&mut tape, &frozen, live).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(live).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn feature_kd_matches_finite_differences() {
        let frozen = Tensor::new(vec![1, 4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let f = frozen;
        fd_check(
            move |tape, v| feature_kd(tape, &f, v).unwrap(),
            &[0.5, 0.4, -0.9, 0.2],
            1e-5,
        );
    }

    #[test]
    fn frost_total_unit_components_add_up_to_fourteen() {
        let mut tape = Tape::new();
        let one = || Tensor::scalar(1.0).unwrap();
        let terms = LossTerms {
            bce: Some(tape.leaf(one())),
            self_train: Some(tape.leaf(one())),
            mse: Some(tape.leaf(one())),
            replay: Some(tape.leaf(one())),
            feat_kd: Some(tape.leaf(one())),
            ..Default::default()
        };
        // Schedules already past their ramp, both with gamma = 1.
        let s = RampUpSchedule::new(1.0, 1).unwrap();
        let (total, bd) = frost_total(&mut tape, &terms, 5, &s, &s, 10.0, 1.0, 1.0).unwrap();
        assert!((tape.value(total).data()[0] - 14.0).abs() < 1e-12);
        assert!((bd.total - 14.0).abs() < 1e-12);
    }

    #[test]
    fn frost_total_breakdown_identity_holds() {
        let mut tape = Tape::new();
        let mut leaf = |v: f64| tape.leaf(Tensor::scalar(v).unwrap());
        let terms = LossTerms {
            bce: Some(leaf(0.37)),
            self_train: Some(leaf(1.21)),
            mse: Some(leaf(0.05)),
            replay: Some(leaf(2.4)),
            feat_kd: Some(leaf(0.66)),
            ..Default::default()
        };
        let self_s = RampUpSchedule::new(0.05, 50).unwrap();
        let mse_s = RampUpSchedule::new(5.0, 50).unwrap();
        let (_, bd) = frost_total(&mut tape, &terms, 7, &self_s, &mse_s, 10.0, 1.0, 1.0).unwrap();
        let rebuilt = bd.bce
            + bd.omega_self * bd.self_train
            + bd.omega_mse * bd.mse
            + bd.replay
            + bd.lambda * bd.feat_kd;
        assert!((bd.total - rebuilt).abs() < 1e-10);
    }

    #[test]
    fn frost_total_with_all_weights_zero_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let bce = tape.sum(sq).unwrap();
        let terms = LossTerms {
            bce: Some(bce),
            ..Default::default()
        };
        let s = RampUpSchedule::new(0.0, 50).unwrap();
        let (total, bd) = frost_total(&mut tape, &terms, 0, &s, &s, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(bd.total, 0.0);
        assert_eq!(bd.bce, 9.0); // raw value still reported
        tape.backward(total).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }
}
