//! Model components: a two-layer MLP feature extractor, linear classifier
//! heads, and the bundle that tracks live/frozen extractors plus the old,
//! joint, and novel heads across discovery stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Two-layer MLP: input -> hidden (relu) -> linear feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub w1: Tensor, // [input, hidden]
    pub b1: Tensor, // [hidden]
    pub w2: Tensor, // [hidden, feature]
    pub b2: Tensor, // [feature]
}

/// Tape handles for a registered backbone.
#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Backbone {
    /// Random init with uniform weights of half-width 1/sqrt(fan_in), zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, feature: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || hidden == 0 || feature == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        Ok(Backbone {
            w1: uniform_tensor(vec![input, hidden], 1.0 / (input as f64).sqrt(), rng)?,
            b1: Tensor::zeros(vec![hidden])?,
            w2: uniform_tensor(vec![hidden, feature], 1.0 / (hidden as f64).sqrt(), rng)?,
            b2: Tensor::zeros(vec![feature])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Eager forward pass: features for a [batch, input] matrix.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.w1)?.add_row_bias(&self.b1)?.relu()?;
        h.matmul(&self.w2)?.add_row_bias(&self.b2)
    }

    /// Registers the parameters on a tape for a differentiable forward pass.
    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// Tape forward pass; mirrors `features` exactly.
    pub fn forward_on(tape: &mut Tape, vars: BackboneVars, x: Var) -> Result<Var> {
        let h = tape.matmul(x, vars.w1)?;
        let h = tape.add_row_bias(h, vars.b1)?;
        let h = tape.relu(h)?;
        let f = tape.matmul(h, vars.w2)?;
        tape.add_row_bias(f, vars.b2)
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn bits_hash(&self) -> u64 {
        self.w1.bits_hash() ^ self.b1.bits_hash().rotate_left(1)
            ^ self.w2.bits_hash().rotate_left(2)
            ^ self.b2.bits_hash().rotate_left(3)
    }
}

/// Linear classifier head with one weight row and one bias entry per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor, // [classes, feature]
    pub bias: Tensor,   // [classes]
}

/// Tape handles for a registered head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    /// Rows drawn i.i.d. uniform from [-half_width, half_width], zero biases.
    pub fn init<R: Rng>(
        classes: usize,
        feature: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || feature == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(Head {
            weight: uniform_tensor(vec![classes, feature], half_width, rng)?,
            bias: Tensor::zeros(vec![classes])?,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Eager logits for a [batch, feature] matrix.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        features
            .matmul(&self.weight.transpose()?)?
            .add_row_bias(&self.bias)
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }

    /// Tape forward pass; mirrors `logits` exactly.
    pub fn forward_on(tape: &mut Tape, vars: HeadVars, features: Var) -> Result<Var> {
        let wt = tape.transpose(vars.weight)?;
        let l = tape.matmul(features, wt)?;
        tape.add_row_bias(l, vars.bias)
    }

    /// Euclidean norm of each class row concatenated with its bias entry.
    pub fn weight_norms(&self) -> Vec<f64> {
        let (classes, feat) = (self.classes(), self.feature_dim());
        (0..classes)
            .map(|c| {
                let row = &self.weight.data()[c * feat..(c + 1) * feat];
                let sq: f64 = row.iter().map(|v| v * v).sum::<f64>()
                    + self.bias.data()[c] * self.bias.data()[c];
                sq.sqrt()
            })
            .collect()
    }

    /// A head made of rows [start, start+len), sharing no storage.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Head> {
        let bias = self.bias.data()[start..start + len].to_vec();
        Ok(Head {
            weight: self.weight.slice_rows(start, len)?,
            bias: Tensor::new(vec![len], bias)?,
        })
    }

    pub fn bits_hash(&self) -> u64 {
        self.weight.bits_hash() ^ self.bias.bits_hash().rotate_left(1)
    }
}

/// Appends `new_classes` freshly initialised rows to a head. Existing rows
/// and biases are copied bit-exactly; new rows are uniform in
/// [-init_scale, init_scale] with zero biases.
pub fn extend_head<R: Rng>(
    old: &Head,
    new_classes: usize,
    init_scale: f64,
    rng: &mut R,
) -> Result<Head> {
    if new_classes == 0 {
        return Err(Error::Config("extend_head needs at least one new class".into()));
    }
    let feat = old.feature_dim();
    let mut weight = old.weight.data().to_vec();
    for _ in 0..new_classes * feat {
        weight.push(symmetric_uniform(init_scale, rng));
    }
    let mut bias = old.bias.data().to_vec();
    bias.extend(std::iter::repeat(0.0).take(new_classes));
    Ok(Head {
        weight: Tensor::new(vec![old.classes() + new_classes, feat], weight)?,
        bias: Tensor::new(vec![old.classes() + new_classes], bias)?,
    })
}

/// Everything the trainer and evaluator act on: live and frozen extractors,
/// the stage-one head, the growing joint head, and the current novel head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub backbone: Backbone,
    pub frozen_backbone: Option<Backbone>,
    /// Stage-one supervised head; kept for the task-aware baseline protocol
    /// and never trained during discovery.
    pub old_head: Head,
    /// Task-agnostic classifier over every class seen so far.
    pub joint_head: Head,
    /// Classifier over the classes of the current discovery step, if any.
    pub novel_head: Option<Head>,
    /// Classes known before the current discovery step.
    pub n_old: usize,
    /// Classes under discovery in the current step.
    pub n_new: usize,
}

impl ModelBundle {
    /// Fresh stage-one model: random backbone, random old head, and a joint
    /// head that starts as a copy of the old head.
    pub fn new_stage1<R: Rng>(
        input: usize,
        hidden: usize,
        feature: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::init(input, hidden, feature, rng)?;
        let old_head = Head::init(classes, feature, 1.0 / (feature as f64).sqrt(), rng)?;
        let joint_head = old_head.clone();
        Ok(ModelBundle {
            backbone,
            frozen_backbone: None,
            old_head,
            joint_head,
            novel_head: None,
            n_old: classes,
            n_new: 0,
        })
    }

    pub fn n_all(&self) -> usize {
        self.n_old + self.n_new
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Freezes a copy of the live extractor. At most one snapshot may exist
    /// per stage; taking a second without clearing the first is an error.
    pub fn snapshot_frozen(&mut self) -> Result<()> {
        if self.frozen_backbone.is_some() {
            return Err(Error::Validation(
                "frozen snapshot already taken for this stage".into(),
            ));
        }
        self.frozen_backbone = Some(self.backbone.clone());
        Ok(())
    }

    /// Live-extractor features for a batch.
    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.features(x)
    }

    /// Frozen-extractor features; errors if no snapshot exists.
    pub fn frozen_features(&self, x: &Tensor) -> Result<Tensor> {
        self.frozen_backbone
            .as_ref()
            .ok_or_else(|| Error::Validation("no frozen snapshot taken".into()))?
            .features(x)
    }

    /// Joint-head argmax predictions over all known classes.
    pub fn joint_predictions(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.joint_head.logits(&self.forward_features(x)?)?;
        rows_argmax(&logits)
    }

    /// The classifier over the current step's new classes: the novel head if
    /// present, otherwise the new-class block of the joint head.
    pub fn novel_view_head(&self) -> Result<Head> {
        if let Some(h) = &self.novel_head {
            return Ok(h.clone());
        }
        if self.n_new == 0 {
            return Err(Error::Validation("model has no novel classes".into()));
        }
        self.joint_head.slice_rows(self.n_old, self.n_new)
    }

    /// Cluster assignments for the current step's new classes, in [0, n_new).
    pub fn novel_clusters(&self, x: &Tensor) -> Result<Vec<usize>> {
        let head = self.novel_view_head()?;
        let logits = head.logits(&self.forward_features(x)?)?;
        rows_argmax(&logits)
    }

    /// Stage-one head argmax predictions (task-aware old classifier).
    pub fn old_head_predictions(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.old_head.logits(&self.forward_features(x)?)?;
        rows_argmax(&logits)
    }

    /// Argmax over the concatenation of old-head and novel-view logits;
    /// indices >= old-head classes denote novel classes.
    pub fn concat_predictions(&self, x: &Tensor) -> Result<Vec<usize>> {
        let feats = self.forward_features(x)?;
        let old_logits = self.old_head.logits(&feats)?;
        let novel_logits = self.novel_view_head()?.logits(&feats)?;
        let (rows, c_old) = old_logits.dims2()?;
        let (_, c_new) = novel_logits.dims2()?;
        let mut preds = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut joined = Vec::with_capacity(c_old + c_new);
            joined.extend_from_slice(old_logits.row(r)?);
            joined.extend_from_slice(novel_logits.row(r)?);
            preds.push(argmax(&joined));
        }
        Ok(preds)
    }

    /// Mutable access to a parameter by its checkpoint name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "backbone.w1" => Some(&mut self.backbone.w1),
            "backbone.b1" => Some(&mut self.backbone.b1),
            "backbone.w2" => Some(&mut self.backbone.w2),
            "backbone.b2" => Some(&mut self.backbone.b2),
            "old_head.weight" => Some(&mut self.old_head.weight),
            "old_head.bias" => Some(&mut self.old_head.bias),
            "joint_head.weight" => Some(&mut self.joint_head.weight),
            "joint_head.bias" => Some(&mut self.joint_head.bias),
            "novel_head.weight" => self.novel_head.as_mut().map(|h| &mut h.weight),
            "novel_head.bias" => self.novel_head.as_mut().map(|h| &mut h.bias),
            _ => None,
        }
    }

    /// Hash over every live (trainable) parameter.
    pub fn live_param_hash(&self) -> u64 {
        let mut h = self.backbone.bits_hash() ^ self.joint_head.bits_hash().rotate_left(7);
        if let Some(n) = &self.novel_head {
            h ^= n.bits_hash().rotate_left(13);
        }
        h
    }

    pub fn frozen_hash(&self) -> Option<u64> {
        self.frozen_backbone.as_ref().map(Backbone::bits_hash)
    }

    // ── checkpoint serialization ─────────────────────────────────────────

    /// Serializes every parameter to a versioned JSON document. Values are
    /// written as decimal floats whose round-trip is value-exact.
    pub fn save_checkpoint(&self) -> Result<String> {
        let mut params = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            params.push(ParamDoc {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            });
        };
        for (n, t) in self.backbone.params() {
            push(format!("backbone.{n}"), t);
        }
        if let Some(fb) = &self.frozen_backbone {
            for (n, t) in fb.params() {
                push(format!("frozen.{n}"), t);
            }
        }
        push("old_head.weight".into(), &self.old_head.weight);
        push("old_head.bias".into(), &self.old_head.bias);
        push("joint_head.weight".into(), &self.joint_head.weight);
        push("joint_head.bias".into(), &self.joint_head.bias);
        if let Some(nh) = &self.novel_head {
            push("novel_head.weight".into(), &nh.weight);
            push("novel_head.bias".into(), &nh.bias);
        }
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            n_old: self.n_old,
            n_new: self.n_new,
            params,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Rebuilds a bundle from `save_checkpoint` output, validating shapes,
    /// finiteness, and class-count consistency.
    pub fn load_checkpoint(json: &str) -> Result<Self> {
        let doc: CheckpointDoc =
            serde_json::from_str(json).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let mut lookup = std::collections::BTreeMap::new();
        for p in doc.params {
            let t = Tensor::new(p.shape, p.values)
                .map_err(|e| Error::Parse(format!("parameter {}: {e}", p.name)))?;
            if lookup.insert(p.name.clone(), t).is_some() {
                return Err(Error::Parse(format!("duplicate parameter {}", p.name)));
            }
        }
        let mut take = |name: &str| -> Result<Tensor> {
            lookup
                .remove(name)
                .ok_or_else(|| Error::Parse(format!("missing parameter {name}")))
        };
        let backbone = Backbone {
            w1: take("backbone.w1")?,
            b1: take("backbone.b1")?,
            w2: take("backbone.w2")?,
            b2: take("backbone.b2")?,
        };
        let frozen_backbone = if lookup.contains_key("frozen.w1") {
            Some(Backbone {
                w1: take("frozen.w1")?,
                b1: take("frozen.b1")?,
                w2: take("frozen.w2")?,
                b2: take("frozen.b2")?,
            })
        } else {
            None
        };
        let old_head = Head {
            weight: take("old_head.weight")?,
            bias: take("old_head.bias")?,
        };
        let joint_head = Head {
            weight: take("joint_head.weight")?,
            bias: take("joint_head.bias")?,
        };
        let novel_head = if lookup.contains_key("novel_head.weight") {
            Some(Head {
                weight: take("novel_head.weight")?,
                bias: take("novel_head.bias")?,
            })
        } else {
            None
        };
        let bundle = ModelBundle {
            backbone,
            frozen_backbone,
            old_head,
            joint_head,
            novel_head,
            n_old: doc.n_old,
            n_new: doc.n_new,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Structural consistency checks shared by construction and loading.
    pub fn validate(&self) -> Result<()> {
        let feat = self.backbone.feature_dim();
        if self.joint_head.feature_dim() != feat || self.old_head.feature_dim() != feat {
            return Err(Error::Validation(
                "head feature width does not match backbone output".into(),
            ));
        }
        if self.joint_head.classes() != self.n_all() {
            return Err(Error::Validation(format!(
                "joint head has {} rows for {} classes",
                self.joint_head.classes(),
                self.n_all()
            )));
        }
        if let Some(nh) = &self.novel_head {
            if nh.classes() != self.n_new || nh.feature_dim() != feat {
                return Err(Error::Validation("novel head shape mismatch".into()));
            }
        }
        if let Some(fb) = &self.frozen_backbone {
            if fb.input_dim() != self.backbone.input_dim() || fb.feature_dim() != feat {
                return Err(Error::Validation("frozen backbone shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Argmax per row of a logits matrix; ties take the lowest index.
pub fn rows_argmax(logits: &Tensor) -> Result<Vec<usize>> {
    let (rows, _) = logits.dims2()?;
    (0..rows).map(|r| Ok(argmax(logits.row(r)?))).collect()
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    n_old: usize,
    n_new: usize,
    params: Vec<ParamDoc>,
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, half_width: f64, rng: &mut R) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| symmetric_uniform(half_width, rng))
        .collect();
    Tensor::new(shape, data)
}

fn symmetric_uniform<R: Rng>(half_width: f64, rng: &mut R) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}
