//! Per-class feature prototypes: mean and per-dimension population variance
//! of the features of each old class, plus Gaussian replay sampling.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean and per-dimension population variance of one class's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Collection of class prototypes sharing one feature dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    dim: usize,
    protos: BTreeMap<usize, ClassPrototype>,
}

#[derive(Serialize, Deserialize)]
struct StoreDoc {
    version: u32,
    dim: usize,
    prototypes: Vec<ClassPrototype>,
}

const STORE_VERSION: u32 = 1;

impl PrototypeStore {
    /// Computes a prototype per distinct label from a feature matrix.
    pub fn compute(features: &Tensor, labels: &[usize]) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            by_class.entry(label).or_default().push(row);
        }
        let mut protos = BTreeMap::new();
        for (class_id, rows) in by_class {
            let count = rows.len();
            let mut mean = vec![0.0; d];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(features.row(r)?) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            let mut variance = vec![0.0; d];
            for &r in &rows {
                for ((s, v), m) in variance.iter_mut().zip(features.row(r)?).zip(&mean) {
                    let diff = v - m;
                    *s += diff * diff;
                }
            }
            for s in &mut variance {
                *s /= count as f64;
            }
            protos.insert(
                class_id,
                ClassPrototype {
                    class_id,
                    count,
                    mean,
                    variance,
                },
            );
        }
        Ok(PrototypeStore { dim: d, protos })
    }

    /// Creates an empty store for a known feature dimensionality.
    pub fn empty(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Param {
                name: "dim",
                detail: "feature dimension must be positive".into(),
            });
        }
        Ok(PrototypeStore {
            dim,
            protos: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.protos.keys().copied().collect()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassPrototype> {
        self.protos.get(&class_id)
    }

    /// Draws one feature vector from the class's diagonal Gaussian.
    /// Zero-variance dimensions return the mean exactly.
    pub fn sample(&self, class_id: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let proto = self
            .protos
            .get(&class_id)
            .ok_or(Error::UnknownClass(class_id))?;
        Ok(proto
            .mean
            .iter()
            .zip(&proto.variance)
            .map(|(&m, &v)| {
                if v == 0.0 {
                    m
                } else {
                    let z: f64 = StandardNormal.sample(rng);
                    m + v.sqrt() * z
                }
            })
            .collect())
    }

    /// Draws a batch of replay features with classes chosen uniformly from
    /// the stored ones. Returns the feature matrix and matching labels.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
        if self.protos.is_empty() {
            return Err(Error::Validation(
                "cannot sample replay features from an empty prototype store".into(),
            ));
        }
        if n == 0 {
            return Err(Error::Validation("replay batch size must be positive".into()));
        }
        let keys = self.classes();
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let class = keys[rng.random_range(0..keys.len())];
            data.extend(self.sample(class, rng)?);
            labels.push(class);
        }
        Ok((Tensor::new(vec![n, self.dim], data)?, labels))
    }

    /// Adds every prototype from `other`. A class present in both is an error.
    pub fn merge(&mut self, other: PrototypeStore) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Validation(format!(
                "prototype dimension mismatch: {} vs {}",
                self.dim, other.dim
            )));
        }
        for (class_id, proto) in other.protos {
            if self.protos.contains_key(&class_id) {
                return Err(Error::Validation(format!(
                    "duplicate prototype for class {class_id}"
                )));
            }
            self.protos.insert(class_id, proto);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = StoreDoc {
            version: STORE_VERSION,
            dim: self.dim,
            prototypes: self.protos.values().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StoreDoc = serde_json::from_str(text)?;
        if doc.version != STORE_VERSION {
            return Err(Error::Validation(format!(
                "unsupported prototype store version {}",
                doc.version
            )));
        }
        if doc.dim == 0 {
            return Err(Error::Validation("prototype dimension must be positive".into()));
        }
        let mut protos = BTreeMap::new();
        for proto in doc.prototypes {
            if proto.mean.len() != doc.dim || proto.variance.len() != doc.dim {
                return Err(Error::Validation(format!(
                    "prototype for class {} has wrong dimensionality",
                    proto.class_id
                )));
            }
            if proto.count == 0 {
                return Err(Error::Validation(format!(
                    "prototype for class {} has zero count",
                    proto.class_id
                )));
            }
            for v in proto.mean.iter().chain(&proto.variance) {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "prototype for class {} contains non-finite values",
                        proto.class_id
                    )));
                }
            }
            if proto.variance.iter().any(|&v| v < 0.0) {
                return Err(Error::Validation(format!(
                    "prototype for class {} has negative variance",
                    proto.class_id
                )));
            }
            if protos.insert(proto.class_id, proto.clone()).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate prototype for class {}",
                    proto.class_id
                )));
            }
        }
        Ok(PrototypeStore {
            dim: doc.dim,
            protos,
        })
    }
}
