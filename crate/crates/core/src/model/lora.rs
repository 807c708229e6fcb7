//! Low-rank adapters on frozen dense layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adapter pair for one layer; the effective weight is `W + scale * A B`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Multiplier on `A B`; `None` means `1 / rank`.
    pub scale: Option<f64>,
    /// Layer names; a trailing `*` matches by prefix.
    pub target: Vec<String>,
    /// Labeled target-domain samples available for adaptation.
    pub n_shots: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scale: None,
            target: vec![
                "distill.proj".to_string(),
                "moe.*".to_string(),
                "head.fc1".to_string(),
                "head.fc2".to_string(),
            ],
            n_shots: 256,
        }
    }
}

impl AdapterConfig {
    pub fn matches(&self, layer: &str) -> bool {
        self.target.iter().any(|t| match t.strip_suffix('*') {
            Some(prefix) => layer.starts_with(prefix),
            None => layer == t,
        })
    }

    pub fn effective_scale(&self) -> f64 {
        self.scale.unwrap_or(1.0 / self.rank as f64)
    }
}

impl Model {
    /// Freezes every existing parameter and attaches adapters to the targeted
    /// layers: `A` He-uniform, `B` zero, so the adapted model starts out
    /// computing exactly what the frozen one does.
    pub fn attach_adapters<R: Rng>(&mut self, cfg: &AdapterConfig, rng: &mut R) -> Result<Vec<String>> {
        if cfg.rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !self.adapters.is_empty() {
            return Err(Error::config("model already carries adapters"));
        }
        self.params.set_trainable_all(false);
        let targets: Vec<(String, ParamId)> = self
            .linear_layers()
            .into_iter()
            .filter(|l| cfg.matches(&l.name))
            .map(|l| (l.name.clone(), l.w))
            .collect();
        if targets.is_empty() {
            return Err(Error::Config(format!("adapter targets {:?} match no layer", cfg.target)));
        }
        let scale = cfg.effective_scale();
        for (name, w) in &targets {
            let shape = self.params.get(*w).value.shape().to_vec();
            let (inp, out) = (shape[0], shape[1]);
            let bound = libm::sqrt(6.0 / inp as f64);
            let a_data = (0..inp * cfg.rank).map(|_| rng.random_range(-bound..bound)).collect();
            let a = self.params.add(format!("lora.{name}.A"), Tensor::new(&[inp, cfg.rank], a_data)?);
            let b = self.params.add(format!("lora.{name}.B"), Tensor::zeros(&[cfg.rank, out]));
            self.adapters.insert(name.clone(), Adapter { a, b, rank: cfg.rank, scale });
        }
        Ok(targets.into_iter().map(|(n, _)| n).collect())
    }

    /// Ids of adapter parameters.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapters.values().flat_map(|a| [a.a, a.b]).collect()
    }
}

/// Recreates adapters for every `lora.<layer>.A` found in a checkpoint.
pub(crate) fn attach_from_named(model: &mut Model, named: &BTreeMap<&str, &Tensor>) -> Result<()> {
    for (name, a_t) in named {
        let Some(layer) = name.strip_prefix("lora.").and_then(|r| r.strip_suffix(".A")) else {
            continue;
        };
        if model.adapters.contains_key(layer) {
            continue;
        }
        let b_name = format!("lora.{layer}.B");
        let b_t = named
            .get(b_name.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint has {name} without {b_name}")))?;
        let w = model
            .linear_layers()
            .into_iter()
            .find(|l| l.name == layer)
            .map(|l| l.w)
            .ok_or_else(|| Error::Data(format!("adapter for unknown layer {layer}")))?;
        let rank = a_t.shape()[1];
        let out = model.params.get(w).value.shape()[1];
        if a_t.shape()[0] != model.params.get(w).value.shape()[0] || b_t.shape() != [rank, out] {
            return Err(Error::shape("adapter", a_t.shape(), b_t.shape()));
        }
        let a = model.params.add(format!("lora.{layer}.A"), (*a_t).clone());
        let b = model.params.add(b_name, (*b_t).clone());
        model.adapters.insert(
            layer.to_string(),
            Adapter {
                a,
                b,
                rank,
                scale: 1.0 / rank as f64,
            },
        );
    }
    if !model.adapters.is_empty() {
        for p in model.params.iter_mut() {
            p.trainable = p.name.starts_with("lora.");
        }
    }
    Ok(())
}
