//! Training drivers: supervised pretraining on labelled old classes,
//! discovery of new classes from unlabelled data behind a growing joint
//! head, multi-step incremental runs, and the ablation grid.
//!
//! Determinism: every random decision draws from a seed-plus-label
//! substream, so identical configurations reproduce identical runs on any
//! machine.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{jitter_batch, SplitSet};
use crate::error::{Error, Result};
use crate::evaluation::{
    eval_class_incd, eval_class_incd_multi, eval_original_rt, reassign_new_ground_truth,
    EvalReport, StepEvalInput,
};
use crate::model::{extend_head, rows_argmax, Backbone, Head, ModelBundle};
use crate::objectives::{
    consistency_mse, cross_entropy_supervised, feature_kd, frost_total, lwf_logit_kd,
    make_pseudo_label, one_hot, pairwise_bce_all_pairs, rank_pair_labels, replay_loss,
    self_training_loss, LossBreakdown, LossTerms, LwfMode, RampUpSchedule,
};
use crate::prototypes::PrototypeStore;
use crate::rng::substream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial half-width for joint-head extension rows and fresh novel heads.
const NEW_ROW_INIT: f64 = 0.1;

/// Which combination of loss terms a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Pairwise BCE + consistency + self-training + feature replay +
    /// feature distillation.
    Full,
    /// Replay kept, feature distillation removed.
    NoFd,
    /// Feature distillation kept, replay removed.
    NoFr,
    /// Both old-class defences removed; forgets catastrophically.
    NoFdFr,
    /// Self-training removed; the joint head learns new classes only through
    /// whatever other terms touch it.
    NoSt,
    /// Self-training and the consistency term both removed.
    NoAllSt,
    /// Old-class defence replaced by logit distillation on softened softmax
    /// outputs.
    LwfSoftmax,
    /// Softmax-mode logit distillation plus feature replay.
    LwfSoftmaxFr,
    /// Old-class defence replaced by mean squared distance of raw logits.
    LwfPresoftmax,
    /// Pre-softmax logit distillation plus feature replay.
    LwfPresoftmaxFr,
    /// No separate novel head: the pairwise and consistency losses act on
    /// the new-class block of the joint head directly.
    JointOnly,
    /// Joint-only variant without self-training.
    JointOnlyNoSt,
}

impl Ablation {
    pub fn all() -> [Ablation; 12] {
        [
            Ablation::Full,
            Ablation::NoFd,
            Ablation::NoFr,
            Ablation::NoFdFr,
            Ablation::NoSt,
            Ablation::NoAllSt,
            Ablation::LwfSoftmax,
            Ablation::LwfSoftmaxFr,
            Ablation::LwfPresoftmax,
            Ablation::LwfPresoftmaxFr,
            Ablation::JointOnly,
            Ablation::JointOnlyNoSt,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFd => "no_fd",
            Ablation::NoFr => "no_fr",
            Ablation::NoFdFr => "no_fd_fr",
            Ablation::NoSt => "no_st",
            Ablation::NoAllSt => "no_all_st",
            Ablation::LwfSoftmax => "lwf_softmax",
            Ablation::LwfSoftmaxFr => "lwf_softmax_fr",
            Ablation::LwfPresoftmax => "lwf_presoftmax",
            Ablation::LwfPresoftmaxFr => "lwf_presoftmax_fr",
            Ablation::JointOnly => "joint_only",
            Ablation::JointOnlyNoSt => "joint_only_no_st",
        }
    }

    pub fn parse(text: &str) -> Result<Ablation> {
        Ablation::all()
            .into_iter()
            .find(|a| a.name() == text)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::all().iter().map(|a| a.name()).collect();
                Error::Parse(format!(
                    "unknown ablation '{text}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    /// Feature replay from class prototypes through the joint head.
    pub fn uses_replay(&self) -> bool {
        matches!(
            self,
            Ablation::Full
                | Ablation::NoFd
                | Ablation::NoSt
                | Ablation::NoAllSt
                | Ablation::LwfSoftmaxFr
                | Ablation::LwfPresoftmaxFr
                | Ablation::JointOnly
                | Ablation::JointOnlyNoSt
        )
    }

    /// Feature distillation against the frozen extractor.
    pub fn uses_feature_kd(&self) -> bool {
        matches!(
            self,
            Ablation::Full
                | Ablation::NoFr
                | Ablation::NoSt
                | Ablation::NoAllSt
                | Ablation::JointOnly
                | Ablation::JointOnlyNoSt
        )
    }

    /// Pseudo-label cross-entropy on the joint head.
    pub fn uses_self_training(&self) -> bool {
        !matches!(
            self,
            Ablation::NoSt | Ablation::NoAllSt | Ablation::JointOnlyNoSt
        )
    }

    /// Two-view consistency on the novel-view softmax.
    pub fn uses_consistency(&self) -> bool {
        !matches!(self, Ablation::NoAllSt)
    }

    /// Logit-distillation substitute for the old-class defences, if any.
    pub fn lwf_mode(&self) -> Option<LwfMode> {
        match self {
            Ablation::LwfSoftmax | Ablation::LwfSoftmaxFr => Some(LwfMode::Softmax),
            Ablation::LwfPresoftmax | Ablation::LwfPresoftmaxFr => Some(LwfMode::PreSoftmax),
            _ => None,
        }
    }

    /// Whether discovery trains a separate novel head (otherwise the new
    /// block of the joint head plays that role).
    pub fn separate_novel_head(&self) -> bool {
        !matches!(self, Ablation::JointOnly | Ablation::JointOnlyNoSt)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// All training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub discover_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiplier applied to the learning rate late in each stage.
    pub decay_factor: f64,
    /// Fraction of the stage after which the decay kicks in.
    pub decay_fraction: f64,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Size of the top-k sets compared by the pairwise rank statistic.
    pub top_k: usize,
    /// Ramp-up ceiling for the consistency weight.
    pub gamma_mse: f64,
    /// Ramp-up ceiling for the self-training weight.
    pub gamma_self: f64,
    /// Ramp-up length in epochs.
    pub rampup_length: usize,
    /// Weight of the feature-distillation term.
    pub lambda: f64,
    /// Temperature for softmax-mode logit distillation.
    pub lwf_temperature: f64,
    pub w_bce: f64,
    pub w_replay: f64,
    /// Std-dev of the second-view jitter; defaults to half the task noise.
    pub aug_jitter: Option<f64>,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 30,
            discover_epochs: 40,
            learning_rate: 0.1,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_fraction: 0.85,
            batch_size: 128,
            hidden_dim: 64,
            feature_dim: 16,
            top_k: 5,
            gamma_mse: 5.0,
            gamma_self: 0.05,
            rampup_length: 50,
            lambda: 10.0,
            lwf_temperature: 2.0,
            w_bce: 1.0,
            w_replay: 1.0,
            aug_jitter: None,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Param {
                    name,
                    detail: format!("must be positive and finite, got {v}"),
                })
            }
        };
        let non_negative = |name: &'static str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Param {
                    name,
                    detail: format!("must be non-negative and finite, got {v}"),
                })
            }
        };
        positive("learning_rate", self.learning_rate)?;
        non_negative("momentum", self.momentum)?;
        if self.momentum >= 1.0 {
            return Err(Error::Param {
                name: "momentum",
                detail: format!("must be below 1, got {}", self.momentum),
            });
        }
        positive("decay_factor", self.decay_factor)?;
        if self.decay_factor > 1.0 {
            return Err(Error::Param {
                name: "decay_factor",
                detail: "must not exceed 1".into(),
            });
        }
        positive("decay_fraction", self.decay_fraction)?;
        if self.decay_fraction > 1.0 {
            return Err(Error::Param {
                name: "decay_fraction",
                detail: "must not exceed 1".into(),
            });
        }
        if self.batch_size < 2 {
            return Err(Error::Param {
                name: "batch_size",
                detail: "pairwise losses need batches of at least two".into(),
            });
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Param {
                name: "hidden_dim/feature_dim",
                detail: "model dimensions must be positive".into(),
            });
        }
        if self.top_k == 0 || self.top_k > self.feature_dim {
            return Err(Error::Param {
                name: "top_k",
                detail: format!(
                    "must lie in 1..={}, got {}",
                    self.feature_dim, self.top_k
                ),
            });
        }
        non_negative("gamma_mse", self.gamma_mse)?;
        non_negative("gamma_self", self.gamma_self)?;
        if self.rampup_length == 0 {
            return Err(Error::Param {
                name: "rampup_length",
                detail: "must be positive".into(),
            });
        }
        non_negative("lambda", self.lambda)?;
        positive("lwf_temperature", self.lwf_temperature)?;
        non_negative("w_bce", self.w_bce)?;
        non_negative("w_replay", self.w_replay)?;
        if let Some(j) = self.aug_jitter {
            non_negative("aug_jitter", j)?;
        }
        Ok(())
    }
}

/// Everything recorded about one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// "pretrain", "discover-1", "discover-2", ...
    pub stage: String,
    pub ablation: String,
    pub seed: u64,
    pub epochs: usize,
    /// Per-epoch mean loss breakdowns.
    pub history: Vec<LossBreakdown>,
    /// Training-set accuracy, where labels exist (pretraining only).
    pub train_accuracy: Option<f64>,
    /// Whether head extension kept the previous rows bit-identical.
    pub boundary_preserved: Option<bool>,
    /// How often each old class was drawn for feature replay.
    pub replay_class_counts: BTreeMap<usize, u64>,
    /// Class-to-cluster mapping frozen at the end of a discovery step.
    pub novel_mapping: Option<Vec<usize>>,
    pub eval_class_incd: Option<EvalReport>,
    pub eval_original_rt: Option<EvalReport>,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Plain SGD with momentum over named parameters.
struct Sgd {
    momentum: f64,
    velocity: BTreeMap<&'static str, Tensor>,
}

impl Sgd {
    fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step(
        &mut self,
        model: &mut ModelBundle,
        lr: f64,
        grads: Vec<(&'static str, Tensor)>,
    ) -> Result<()> {
        for (name, grad) in grads {
            if !self.velocity.contains_key(name) {
                self.velocity
                    .insert(name, Tensor::zeros(grad.shape().to_vec())?);
            }
            let v = self.velocity.get_mut(name).expect("velocity just inserted");
            *v = v.scale(self.momentum)?.add(&grad)?;
            let update = v.scale(lr)?;
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {name}")))?;
            *p = p.sub(&update)?;
        }
        Ok(())
    }
}

fn lr_at(cfg: &TrainConfig, stage_epochs: usize, epoch: usize) -> f64 {
    let cut = (stage_epochs as f64 * cfg.decay_fraction).floor() as usize;
    if epoch >= cut {
        cfg.learning_rate * cfg.decay_factor
    } else {
        cfg.learning_rate
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = t.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(t.row(i)?);
    }
    Tensor::new(vec![idx.len(), d], data)
}

fn collect_grads(
    tape: &Tape,
    params: &[(&'static str, Var)],
) -> Result<Vec<(&'static str, Tensor)>> {
    params
        .iter()
        .map(|&(name, var)| {
            let g = tape
                .grad(var)
                .ok_or_else(|| Error::Validation(format!("no gradient for {name}")))?
                .clone();
            Ok((name, g))
        })
        .collect()
}

/// Non-finite failures during training are reported як divergence of the
/// term being evaluated at that epoch.
fn guard<T>(term: &'static str, epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged { term, epoch },
        other => other,
    })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    if items.is_empty() {
        return LossBreakdown::zeroed();
    }
    let n = items.len() as f64;
    let mut acc = LossBreakdown::zeroed();
    for b in items {
        acc.supervised += b.supervised;
        acc.bce += b.bce;
        acc.self_train += b.self_train;
        acc.mse += b.mse;
        acc.replay += b.replay;
        acc.feat_kd += b.feat_kd;
        acc.lwf += b.lwf;
        acc.omega_self += b.omega_self;
        acc.omega_mse += b.omega_mse;
        acc.lambda += b.lambda;
        acc.total += b.total;
    }
    acc.supervised /= n;
    acc.bce /= n;
    acc.self_train /= n;
    acc.mse /= n;
    acc.replay /= n;
    acc.feat_kd /= n;
    acc.lwf /= n;
    acc.omega_self /= n;
    acc.omega_mse /= n;
    acc.lambda /= n;
    acc.total /= n;
    acc
}

/// Stage one: supervised training of the backbone and old head on labelled
/// old-class data, then prototype banking and a frozen extractor snapshot.
/// The joint head leaves this stage as an exact copy of the old head.
pub fn pretrain_supervised(
    task: &SplitSet,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, PrototypeStore, RunRecord)> {
    cfg.validate()?;
    task.spec.validate()?;
    if task.labelled.is_empty() {
        return Err(Error::Validation("empty labelled training set".into()));
    }
    let n_old = task.spec.old_classes;
    let mut init_rng = substream(cfg.seed, "init-stage1");
    let mut model = ModelBundle::new_stage1(
        task.spec.input_dim,
        cfg.hidden_dim,
        cfg.feature_dim,
        n_old,
        &mut init_rng,
    )?;
    let mut shuffle_rng = substream(cfg.seed, "shuffle-pretrain");
    let mut sgd = Sgd::new(cfg.momentum);
    let zero = RampUpSchedule::new(0.0, 1)?;
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    let mut indices: Vec<usize> = (0..task.labelled.len()).collect();

    for epoch in 0..cfg.pretrain_epochs {
        let lr = lr_at(cfg, cfg.pretrain_epochs, epoch);
        indices.shuffle(&mut shuffle_rng);
        let mut batch_logs = Vec::new();
        for chunk in indices.chunks(cfg.batch_size) {
            let x = gather_rows(&task.labelled.features, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| task.labelled.labels[i]).collect();
            let targets = one_hot(&y, n_old)?;

            let mut tape = Tape::new();
            let bv = model.backbone.register(&mut tape);
            let hv = model.old_head.register(&mut tape);
            let params = [
                ("backbone.w1", bv.w1),
                ("backbone.b1", bv.b1),
                ("backbone.w2", bv.w2),
                ("backbone.b2", bv.b2),
                ("old_head.weight", hv.weight),
                ("old_head.bias", hv.bias),
            ];
            let xv = tape.leaf(x);
            let feats = guard("supervised", epoch, Backbone::forward_on(&mut tape, bv, xv))?;
            let logits = guard("supervised", epoch, Head::forward_on(&mut tape, hv, feats))?;
            let ce = guard(
                "supervised",
                epoch,
                cross_entropy_supervised(&mut tape, logits, &targets),
            )?;
            let terms = LossTerms {
                supervised: Some(ce),
                ..Default::default()
            };
            let (total, breakdown) = frost_total(&mut tape, &terms, epoch, &zero, &zero, 0.0, 1.0, 1.0)?;
            guard("supervised", epoch, tape.backward(total))?;
            let grads = collect_grads(&tape, &params)?;
            guard("update", epoch, sgd.step(&mut model, lr, grads))?;
            batch_logs.push(breakdown);
        }
        history.push(mean_breakdown(&batch_logs));
    }

    model.joint_head = model.old_head.clone();
    let feats = model.forward_features(&task.labelled.features)?;
    let store = PrototypeStore::compute(&feats, &task.labelled.labels)?;
    model.snapshot_frozen()?;
    model.validate()?;

    let preds = model.old_head_predictions(&task.labelled.features)?;
    let hits = preds
        .iter()
        .zip(&task.labelled.labels)
        .filter(|(p, g)| p == g)
        .count();
    let record = RunRecord {
        stage: "pretrain".into(),
        ablation: cfg.ablation.name().into(),
        seed: cfg.seed,
        epochs: cfg.pretrain_epochs,
        history,
        train_accuracy: Some(hits as f64 / task.labelled.len() as f64),
        boundary_preserved: None,
        replay_class_counts: BTreeMap::new(),
        novel_mapping: None,
        eval_class_incd: None,
        eval_original_rt: None,
    };
    Ok((model, store, record))
}

/// Stage two: discovers the classes of `task.unlabelled[step]` without ever
/// reading their hidden labels. Extends the joint head, optionally creates a
/// novel head, and trains with the terms selected by the ablation.
pub fn discover_step(
    model: &mut ModelBundle,
    store: &PrototypeStore,
    task: &SplitSet,
    step: usize,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if step >= task.spec.steps() {
        return Err(Error::Config(format!(
            "task has {} discovery steps, requested step index {step}",
            task.spec.steps()
        )));
    }
    let offset = task.spec.step_offset(step);
    if model.n_old != offset {
        return Err(Error::Config(format!(
            "model knows {} old classes but step {step} starts at class {offset}",
            model.n_old
        )));
    }
    if model.n_new != 0 {
        return Err(Error::Config(
            "previous discovery step has not been consolidated".into(),
        ));
    }
    if model.frozen_backbone.is_none() {
        return Err(Error::Config(
            "discovery requires a frozen extractor snapshot".into(),
        ));
    }
    let ablation = cfg.ablation;
    if ablation.uses_replay() {
        if store.is_empty() {
            return Err(Error::Config(format!(
                "ablation '{}' uses feature replay but the prototype store is empty; \
                 supply prototypes or choose an ablation without replay",
                ablation.name()
            )));
        }
        if store.dim() != model.feature_dim() {
            return Err(Error::Config(format!(
                "prototype dimension {} does not match feature width {}",
                store.dim(),
                model.feature_dim()
            )));
        }
    }
    let n_old = model.n_old;
    let n_new = task.spec.n_new(step);
    let unlabelled = &task.unlabelled[step];
    if unlabelled.len() < 2 {
        return Err(Error::Validation(
            "discovery needs at least two unlabelled samples".into(),
        ));
    }

    // Teacher for logit distillation: the joint head as it stood before this
    // step, read on frozen features.
    let previous_joint = model.joint_head.clone();

    let mut extend_rng = substream(cfg.seed, &format!("init-extend-{step}"));
    model.joint_head = extend_head(&model.joint_head, n_new, NEW_ROW_INIT, &mut extend_rng)?;
    let boundary_preserved =
        model.joint_head.slice_rows(0, n_old)?.bits_hash() == previous_joint.bits_hash();
    model.n_new = n_new;
    model.novel_head = if ablation.separate_novel_head() {
        let mut novel_rng = substream(cfg.seed, &format!("init-novel-{step}"));
        Some(Head::init(n_new, cfg.feature_dim, NEW_ROW_INIT, &mut novel_rng)?)
    } else {
        None
    };
    model.validate()?;

    let self_schedule = RampUpSchedule::new(cfg.gamma_self, cfg.rampup_length)?;
    let mse_schedule = RampUpSchedule::new(cfg.gamma_mse, cfg.rampup_length)?;
    let sigma = cfg.aug_jitter.unwrap_or(0.5 * task.spec.noise_sigma);
    let mut shuffle_rng = substream(cfg.seed, &format!("shuffle-discover-{step}"));
    let mut aug_rng = substream(cfg.seed, &format!("aug-{step}"));
    let mut replay_rng = substream(cfg.seed, &format!("replay-{step}"));
    let mut sgd = Sgd::new(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.discover_epochs);
    let mut replay_counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut indices: Vec<usize> = (0..unlabelled.len()).collect();

    for epoch in 0..cfg.discover_epochs {
        let lr = lr_at(cfg, cfg.discover_epochs, epoch);
        indices.shuffle(&mut shuffle_rng);
        let mut batch_logs = Vec::new();
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // the pairwise loss needs at least one pair
            }
            let x = gather_rows(unlabelled.features(), chunk)?;
            let x2 = jitter_batch(&x, sigma, &mut aug_rng)?;
            let frozen_feats = if ablation.uses_feature_kd() || ablation.lwf_mode().is_some() {
                Some(model.frozen_features(&x)?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let bv = model.backbone.register(&mut tape);
            let jv = model.joint_head.register(&mut tape);
            let nv = model.novel_head.as_ref().map(|h| h.register(&mut tape));
            let mut params: Vec<(&'static str, Var)> = vec![
                ("backbone.w1", bv.w1),
                ("backbone.b1", bv.b1),
                ("backbone.w2", bv.w2),
                ("backbone.b2", bv.b2),
                ("joint_head.weight", jv.weight),
                ("joint_head.bias", jv.bias),
            ];
            if let Some(nv) = nv {
                params.push(("novel_head.weight", nv.weight));
                params.push(("novel_head.bias", nv.bias));
            }

            let xv = tape.leaf(x);
            let feats = guard("features", epoch, Backbone::forward_on(&mut tape, bv, xv))?;
            let joint_logits = guard("features", epoch, Head::forward_on(&mut tape, jv, feats))?;
            let novel_logits = match nv {
                Some(nv) => guard("features", epoch, Head::forward_on(&mut tape, nv, feats))?,
                None => tape.slice_cols(joint_logits, n_old, n_new)?,
            };

            // Pairwise targets come from detached live features.
            let pair_labels = rank_pair_labels(tape.value(feats), cfg.top_k)?;
            let bce = guard(
                "bce",
                epoch,
                pairwise_bce_all_pairs(&mut tape, novel_logits, &pair_labels),
            )?;

            let mse = if ablation.uses_consistency() {
                let x2v = tape.leaf(x2);
                let feats2 = guard("mse", epoch, Backbone::forward_on(&mut tape, bv, x2v))?;
                let novel2 = match nv {
                    Some(nv) => guard("mse", epoch, Head::forward_on(&mut tape, nv, feats2))?,
                    None => {
                        let joint2 = guard("mse", epoch, Head::forward_on(&mut tape, jv, feats2))?;
                        tape.slice_cols(joint2, n_old, n_new)?
                    }
                };
                let p1 = tape.softmax(novel_logits, 1.0)?;
                let p2 = tape.softmax(novel2, 1.0)?;
                Some(guard("mse", epoch, consistency_mse(&mut tape, p1, p2))?)
            } else {
                None
            };

            let st = if ablation.uses_self_training() {
                let pseudo: Vec<usize> = {
                    let novel_vals = tape.value(novel_logits);
                    (0..chunk.len())
                        .map(|r| novel_vals.row(r).map(|row| make_pseudo_label(row, n_old)))
                        .collect::<Result<_>>()?
                };
                Some(guard(
                    "self_train",
                    epoch,
                    self_training_loss(&mut tape, joint_logits, &pseudo),
                )?)
            } else {
                None
            };

            let replay = if ablation.uses_replay() {
                let (rfeats, rlabels) = store.sample_batch(cfg.batch_size, &mut replay_rng)?;
                for &l in &rlabels {
                    *replay_counts.entry(l).or_insert(0) += 1;
                }
                let rv = tape.leaf(rfeats);
                let rlogits = guard("replay", epoch, Head::forward_on(&mut tape, jv, rv))?;
                Some(guard(
                    "replay",
                    epoch,
                    replay_loss(&mut tape, rlogits, &rlabels, n_old),
                )?)
            } else {
                None
            };

            let kd = if ablation.uses_feature_kd() {
                let fr = frozen_feats.as_ref().expect("frozen features computed above");
                Some(guard("feat_kd", epoch, feature_kd(&mut tape, fr, feats))?)
            } else {
                None
            };

            let lwf = if let Some(mode) = ablation.lwf_mode() {
                let fr = frozen_feats.as_ref().expect("frozen features computed above");
                let teacher = previous_joint.logits(fr)?;
                let live_old = tape.slice_cols(joint_logits, 0, n_old)?;
                Some(guard(
                    "lwf",
                    epoch,
                    lwf_logit_kd(&mut tape, &teacher, live_old, cfg.lwf_temperature, mode),
                )?)
            } else {
                None
            };

            let terms = LossTerms {
                supervised: None,
                bce: Some(bce),
                self_train: st,
                mse,
                replay,
                feat_kd: kd,
                lwf,
            };
            let (total, breakdown) = frost_total(
                &mut tape,
                &terms,
                epoch,
                &self_schedule,
                &mse_schedule,
                cfg.lambda,
                cfg.w_bce,
                cfg.w_replay,
            )?;
            guard("total", epoch, tape.backward(total))?;
            let grads = collect_grads(&tape, &params)?;
            guard("update", epoch, sgd.step(model, lr, grads))?;
            batch_logs.push(breakdown);
        }
        if batch_logs.is_empty() {
            return Err(Error::Validation(
                "no trainable batches in a discovery epoch".into(),
            ));
        }
        history.push(mean_breakdown(&batch_logs));
    }

    model.validate()?;
    Ok(RunRecord {
        stage: format!("discover-{}", step + 1),
        ablation: ablation.name().into(),
        seed: cfg.seed,
        epochs: cfg.discover_epochs,
        history,
        train_accuracy: None,
        boundary_preserved: Some(boundary_preserved),
        replay_class_counts: replay_counts,
        novel_mapping: None,
        eval_class_incd: None,
        eval_original_rt: None,
    })
}

/// Pretraining plus one discovery step plus both evaluations.
#[derive(Debug, Clone)]
pub struct SingleRunOutput {
    pub model: ModelBundle,
    pub store: PrototypeStore,
    pub pretrain: RunRecord,
    pub discovery: RunRecord,
}

pub fn run_single(task: &SplitSet, cfg: &TrainConfig) -> Result<SingleRunOutput> {
    if task.spec.steps() != 1 {
        return Err(Error::Config(format!(
            "single-step run needs exactly one discovery step, task has {}",
            task.spec.steps()
        )));
    }
    let (mut model, store, pretrain) = pretrain_supervised(task, cfg)?;
    let mut discovery = discover_step(&mut model, &store, task, 0, cfg)?;
    let clusters = model.novel_clusters(&task.test_new[0].features)?;
    let fresh = reassign_new_ground_truth(&clusters, &task.test_new[0].labels, model.n_new)?;
    discovery.novel_mapping = Some(fresh.class_to_cluster);
    discovery.eval_class_incd = Some(eval_class_incd(&model, &task.test_old, &task.test_new[0])?);
    discovery.eval_original_rt =
        Some(eval_original_rt(&model, &task.test_old, &task.test_new[0])?);
    Ok(SingleRunOutput {
        model,
        store,
        pretrain,
        discovery,
    })
}

/// Pretraining plus every discovery step of the task in order.
#[derive(Debug, Clone)]
pub struct IncrementalOutput {
    pub model: ModelBundle,
    pub store: PrototypeStore,
    pub pretrain: RunRecord,
    pub steps: Vec<RunRecord>,
}

/// Folds a finished discovery step into the old-class state: banks replay
/// prototypes from pseudo-labelled step data, retires the novel view, and
/// refreshes the frozen extractor.
fn consolidate_step(
    model: &mut ModelBundle,
    store: &mut PrototypeStore,
    task: &SplitSet,
    finished_step: usize,
    mapping: Vec<usize>,
    retired: &mut Vec<(Head, Vec<usize>)>,
) -> Result<()> {
    let offset = task.spec.step_offset(finished_step);
    let n_new = task.spec.n_new(finished_step);
    // Pseudo labels for prototype banking come from the joint head itself,
    // restricted to the finished step's block — never from hidden labels.
    let feats = model.forward_features(task.unlabelled[finished_step].features())?;
    let block = model.joint_head.logits(&feats)?.slice_cols(offset, n_new)?;
    let pseudo: Vec<usize> = rows_argmax(&block)?.into_iter().map(|c| offset + c).collect();
    store.merge(PrototypeStore::compute(&feats, &pseudo)?)?;

    retired.push((model.novel_view_head()?, mapping));

    model.n_old += model.n_new;
    model.n_new = 0;
    model.novel_head = None;
    model.frozen_backbone = None;
    model.snapshot_frozen()?;
    model.validate()
}

pub fn run_incremental(task: &SplitSet, cfg: &TrainConfig) -> Result<IncrementalOutput> {
    let (mut model, mut store, pretrain) = pretrain_supervised(task, cfg)?;
    let single_step = task.spec.steps() == 1;
    let mut records: Vec<RunRecord> = Vec::new();
    let mut retired: Vec<(Head, Vec<usize>)> = Vec::new();

    for step in 0..task.spec.steps() {
        if step > 0 {
            let mapping = records[step - 1]
                .novel_mapping
                .clone()
                .ok_or_else(|| Error::Validation("previous step has no frozen mapping".into()))?;
            consolidate_step(&mut model, &mut store, task, step - 1, mapping, &mut retired)?;
        }
        let mut rec = discover_step(&mut model, &store, task, step, cfg)?;
        let clusters = model.novel_clusters(&task.test_new[step].features)?;
        let fresh = reassign_new_ground_truth(&clusters, &task.test_new[step].labels, model.n_new)?;
        rec.novel_mapping = Some(fresh.class_to_cluster.clone());

        let current_head = model.novel_view_head()?;
        let mut inputs: Vec<StepEvalInput> = retired
            .iter()
            .enumerate()
            .map(|(k, (head, mapping))| StepEvalInput {
                test: &task.test_new[k],
                head,
                frozen_map: Some(mapping.as_slice()),
            })
            .collect();
        inputs.push(StepEvalInput {
            test: &task.test_new[step],
            head: &current_head,
            frozen_map: Some(fresh.class_to_cluster.as_slice()),
        });
        rec.eval_class_incd = Some(eval_class_incd_multi(&model, &task.test_old, &inputs)?);
        if single_step {
            rec.eval_original_rt =
                Some(eval_original_rt(&model, &task.test_old, &task.test_new[0])?);
        }
        records.push(rec);
    }

    Ok(IncrementalOutput {
        model,
        store,
        pretrain,
        steps: records,
    })
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridEntry {
    pub ablation: String,
    pub class_incd: EvalReport,
    pub original_rt: EvalReport,
}

fn run_arm(
    model: &ModelBundle,
    store: &PrototypeStore,
    task: &SplitSet,
    cfg: &TrainConfig,
    arm: Ablation,
) -> Result<GridEntry> {
    let mut m = model.clone();
    let arm_cfg = TrainConfig {
        ablation: arm,
        ..cfg.clone()
    };
    discover_step(&mut m, store, task, 0, &arm_cfg)?;
    Ok(GridEntry {
        ablation: arm.name().into(),
        class_incd: eval_class_incd(&m, &task.test_old, &task.test_new[0])?,
        original_rt: eval_original_rt(&m, &task.test_old, &task.test_new[0])?,
    })
}

/// Runs every ablation arm against one shared pretraining, optionally on
/// several worker threads. Results keep the canonical arm order.
pub fn run_ablation_grid(
    task: &SplitSet,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<GridEntry>> {
    if task.spec.steps() != 1 {
        return Err(Error::Config(
            "the ablation grid runs on single-step tasks".into(),
        ));
    }
    let workers = threads.max(1);
    let (model, store, _) = pretrain_supervised(task, cfg)?;
    let arms = Ablation::all();
    let next = AtomicUsize::new(0);
    let cells: Vec<Mutex<Option<Result<GridEntry>>>> =
        arms.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers.min(arms.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= arms.len() {
                    break;
                }
                let out = run_arm(&model, &store, task, cfg, arms[i]);
                *cells[i].lock().expect("grid cell lock") = Some(out);
            });
        }
    });

    cells
        .into_iter()
        .zip(arms)
        .map(|(cell, arm)| {
            cell.into_inner()
                .expect("grid cell lock")
                .unwrap_or_else(|| {
                    Err(Error::Validation(format!(
                        "ablation '{}' was never executed",
                        arm.name()
                    )))
                })
        })
        .collect()
}

/// Per-epoch loss table as CSV.
pub fn losses_csv(history: &[LossBreakdown]) -> String {
    let mut out = String::from(
        "epoch,supervised,bce,self_train,mse,replay,feat_kd,lwf,omega_self,omega_mse,lambda,total\n",
    );
    for (e, b) in history.iter().enumerate() {
        out.push_str(&format!(
            "{e},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            b.supervised,
            b.bce,
            b.self_train,
            b.mse,
            b.replay,
            b.feat_kd,
            b.lwf,
            b.omega_self,
            b.omega_mse,
            b.lambda,
            b.total,
        ));
    }
    out
}

/// Grid summary as CSV, one row per ablation arm.
pub fn grid_csv(entries: &[GridEntry]) -> String {
    let mut out = String::from("ablation,old_incd,new_incd,all_incd,old_rt,new_rt,all_rt\n");
    for e in entries {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            e.ablation,
            e.class_incd.old_acc,
            e.class_incd.new_acc,
            e.class_incd.all_acc,
            e.original_rt.old_acc,
            e.original_rt.new_acc,
            e.original_rt.all_acc,
        ));
    }
    out
}

/// Per-step accuracy table for incremental runs. Columns for steps that had
/// not happened yet are left blank.
pub fn steps_csv(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Validation("no step reports to tabulate".into()));
    }
    let width = reports
        .iter()
        .map(|r| r.step_new_joint.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("step,old");
    for k in 1..=width {
        out.push_str(&format!(",new{k}_joint,new{k}_novel"));
    }
    out.push_str(",all\n");
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!("{},{:?}", i + 1, r.old_acc));
        for k in 0..width {
            match (r.step_new_joint.get(k), r.step_new_novel.get(k)) {
                (Some(j), Some(n)) => out.push_str(&format!(",{j:?},{n:?}")),
                _ => out.push_str(",,"),
            }
        }
        out.push_str(&format!(",{:?}\n", r.all_acc));
    }
    Ok(out)
}
