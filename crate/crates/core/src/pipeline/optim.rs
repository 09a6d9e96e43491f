//! Adam with independent parameter groups and learning-rate schedules.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::numerics::{GradMap, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Learning-rate shape after linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Linear decay to `final_fraction * lr` at `total_steps`.
    Linear,
    /// `lr * sqrt(warmup / step)`.
    InverseSqrt,
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "inverse_sqrt" => Ok(Self::InverseSqrt),
            _ => Err(format!("unknown schedule {s:?}")),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::InverseSqrt => "inverse_sqrt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip for the group; 0 disables.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup: 20,
            total_steps: 100,
            schedule: Schedule::Linear,
            final_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: 5.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the update with zero-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Linear => {
                let span = self.total_steps.saturating_sub(self.warmup).max(1) as f64;
                let p = (step.saturating_sub(self.warmup) as f64 / span).min(1.0);
                1.0 - (1.0 - self.final_fraction) * p
            }
            Schedule::InverseSqrt => (self.warmup.max(1) as f64 / (step + 1).max(self.warmup.max(1)) as f64).sqrt(),
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub config: OptimConfig,
    pub params: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub name: String,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    groups: Vec<ParamGroup>,
}

impl Adam {
    /// Groups must be pairwise disjoint.
    pub fn new(store: &ParamStore, groups: Vec<(String, OptimConfig, Vec<ParamId>)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _, ids) in &groups {
            for id in ids {
                if !seen.insert(*id) {
                    return Err(Error::Config(format!(
                        "parameter {} appears in more than one group (second: {name})",
                        store.name(*id)
                    )));
                }
            }
        }
        Ok(Self {
            groups: groups
                .into_iter()
                .map(|(name, config, params)| ParamGroup {
                    m: params.iter().map(|&p| vec![0.0; store.get(p).numel()]).collect(),
                    v: params.iter().map(|&p| vec![0.0; store.get(p).numel()]).collect(),
                    name,
                    config,
                    params,
                    t: 0,
                })
                .collect(),
        })
    }

    /// Two groups covering every parameter: `decoder` where `is_decoder`
    /// holds, `encoder` otherwise.
    pub fn encoder_decoder(
        store: &ParamStore,
        is_decoder: impl Fn(&str) -> bool,
        encoder: OptimConfig,
        decoder: OptimConfig,
    ) -> Result<Self> {
        let (dec, enc): (Vec<ParamId>, Vec<ParamId>) = store.ids().partition(|&id| is_decoder(store.name(id)));
        Self::new(
            store,
            vec![("encoder".into(), encoder, enc), ("decoder".into(), decoder, dec)],
        )
    }

    /// One group over the parameters selected by `pred`.
    pub fn single(store: &ParamStore, name: &str, pred: impl Fn(&str) -> bool, config: OptimConfig) -> Result<Self> {
        let ids = store.ids().filter(|&id| pred(store.name(id))).collect();
        Self::new(store, vec![(name.into(), config, ids)])
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Applies one update per group. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Vec<GroupStats> {
        let mut stats = Vec::with_capacity(self.groups.len());
        for g in &mut self.groups {
            let norm = g
                .params
                .iter()
                .filter_map(|&p| grads.get(p))
                .flat_map(|v| v.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let c = &g.config;
            let scale = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
            let lr = c.lr_at(g.t);
            g.t += 1;
            let bc1 = 1.0 - c.beta1.powi(g.t as i32);
            let bc2 = 1.0 - c.beta2.powi(g.t as i32);
            for (k, &p) in g.params.iter().enumerate() {
                let grad = grads.get(p);
                let (m, v) = (&mut g.m[k], &mut g.v[k]);
                let w = store.get_mut(p).data_mut();
                for i in 0..w.len() {
                    let gi = grad.map_or(0.0, |gr| gr[i]) * scale;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    if lr != 0.0 {
                        w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                    }
                }
            }
            stats.push(GroupStats {
                name: g.name.clone(),
                lr,
                grad_norm: norm,
            });
        }
        stats
    }

    /// Moment estimates and counters as named tensors.
    pub fn state(&self, store: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new();
        for g in &self.groups {
            s.insert(format!("{}.t", g.name), Tensor::vector(vec![g.t as f64]));
            for (k, &p) in g.params.iter().enumerate() {
                let shape = store.get(p).shape().to_vec();
                s.insert(format!("{}.m.{}", g.name, store.name(p)), Tensor::new(shape.clone(), g.m[k].clone()).unwrap());
                s.insert(format!("{}.v.{}", g.name, store.name(p)), Tensor::new(shape, g.v[k].clone()).unwrap());
            }
        }
        s
    }

    pub fn load_state(&mut self, store: &ParamStore, state: &ParamStore) -> Result<()> {
        let get = |k: String| {
            state
                .by_name(&k)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {k}")))
        };
        for g in &mut self.groups {
            g.t = get(format!("{}.t", g.name))?.data()[0] as usize;
            for (k, &p) in g.params.iter().enumerate() {
                let m = get(format!("{}.m.{}", g.name, store.name(p)))?;
                let v = get(format!("{}.v.{}", g.name, store.name(p)))?;
                if m.numel() != g.m[k].len() || v.numel() != g.v[k].len() {
                    return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {}", store.name(p))));
                }
                g.m[k] = m.data().to_vec();
                g.v[k] = v.data().to_vec();
            }
        }
        Ok(())
    }
}
