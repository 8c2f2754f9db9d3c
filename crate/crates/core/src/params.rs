//! Named parameter storage, trainability groups and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::Mat;

/// Trainability group of a parameter. Freezing rules and learning-rate
/// multipliers are expressed per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    PatchEmbed,
    Encoder,
    VisualTokens,
    BnNeck,
    Classifier,
    Rmp,
    TextEncoder,
    Prompts,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::PatchEmbed,
        Group::Encoder,
        Group::VisualTokens,
        Group::BnNeck,
        Group::Classifier,
        Group::Rmp,
        Group::TextEncoder,
        Group::Prompts,
    ];

    pub fn code(self) -> u8 {
        Group::ALL.iter().position(|&g| g == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Group> {
        Group::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat) -> usize {
        self.params.push(Param { name: name.into(), group, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// SHA-256 over names and values of every parameter in `group`.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for x in p.value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_scalars(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }
}

/// `rows×cols` matrix of i.i.d. normal draws.
pub fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamSlot {
    pub m: Mat,
    pub v: Mat,
    pub steps: u64,
}

/// Adam with L2 weight decay folded into the gradient. Only parameters that
/// receive a gradient in a step are touched by that step.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: HashMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, slots: HashMap::new() }
    }

    /// Applies one update. `lr` maps a parameter's group to its step size.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Mat)], lr: impl Fn(Group) -> f64) {
        let c = &self.config;
        for (id, grad) in grads {
            let param = &mut store.params[*id];
            let rate = lr(param.group);
            let slot = self.slots.entry(*id).or_insert_with(|| AdamSlot {
                m: Mat::zeros(grad.raw_dim()),
                v: Mat::zeros(grad.raw_dim()),
                steps: 0,
            });
            slot.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(slot.steps as i32);
            ndarray::Zip::from(&mut param.value)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g + c.weight_decay * *p;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= rate * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}
