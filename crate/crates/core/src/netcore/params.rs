use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::Mat;
use crate::error::{Error, Result};

/// Which independently parameterized component a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Classifier,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub component: Component,
    pub index: usize,
}

/// Named parameter tensors of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    component: Component,
    names: Vec<String>,
    values: Vec<Mat>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(component: Component) -> Self {
        Self {
            component,
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        let index = self.values.len();
        assert!(
            self.by_name.insert(name.clone(), index).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.values.push(value);
        index
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            component: self.component,
            index,
        }
    }

    pub fn value(&self, index: usize) -> &Mat {
        &self.values[index]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Mat {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites every tensor from `tensors`, which must cover all names with
    /// matching shapes.
    pub fn load_named(&mut self, tensors: &HashMap<String, Mat>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != self.values[i].dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i].assign(t);
        }
        Ok(())
    }
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub grads: Vec<Mat>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

pub fn random_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}
