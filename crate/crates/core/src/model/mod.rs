//! The YOTOnet network.
//!
//! `segments -> distiller -> tokens[B, T, d]`
//! - auxiliary head: mean-pooled distiller tokens -> linear -> logits
//! - gate: mean-pooled tokens -> softmax(W_g z) -> top-k mask (one decision per sample)
//! - sparse experts: token-wise FFNs, `y = sum_i m_i p_i h_i(tokens)`
//! - main head: attention pooling -> 2-layer MLP -> logits
//!
//! Every ablation variant is a flag on [`ModelConfig::ablation`].

mod distiller;
mod head;
mod lora;
mod moe;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::SignalSegment;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use lora::{Adapter, AdapterConfig};
pub use moe::GateOutput;

/// Independent switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Experts picked uniformly at random instead of by the gate.
    pub random_expert: bool,
    /// Drops the load-balance term from the objective.
    pub no_balance: bool,
    /// Averages all experts with equal weight instead of sparse routing.
    pub avg_fusion: bool,
    /// Removes the spectral branch of the distiller.
    pub no_fft: bool,
    /// Removes channel and temporal squeeze-excitation.
    pub no_dual_attn: bool,
}

/// The six named model variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    RandomExpert,
    NoBalance,
    AvgFusion,
    #[serde(rename = "NoFFT")]
    NoFft,
    NoDualAttn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::RandomExpert,
        Variant::NoBalance,
        Variant::AvgFusion,
        Variant::NoFft,
        Variant::NoDualAttn,
    ];

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Variant::Full => {}
            Variant::RandomExpert => f.random_expert = true,
            Variant::NoBalance => f.no_balance = true,
            Variant::AvgFusion => f.avg_fusion = true,
            Variant::NoFft => f.no_fft = true,
            Variant::NoDualAttn => f.no_dual_attn = true,
        }
        f
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::RandomExpert => "RandomExpert",
            Variant::NoBalance => "NoBalance",
            Variant::AvgFusion => "AvgFusion",
            Variant::NoFft => "NoFFT",
            Variant::NoDualAttn => "NoDualAttn",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of Full, RandomExpert, NoBalance, AvgFusion, NoFFT, NoDualAttn"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Segment length in samples, a power of two.
    pub in_len: usize,
    pub branch_kernels: Vec<usize>,
    pub branch_dilations: Vec<usize>,
    /// Channels per convolution branch.
    pub channels: usize,
    /// Mean-pool stride turning `in_len` samples into `in_len / pool_stride` tokens.
    pub pool_stride: usize,
    pub d_model: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub head_hidden: usize,
    pub n_classes: usize,
    pub se_reduction: usize,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_len: crate::signal::DEFAULT_WINDOW,
            branch_kernels: vec![3, 5, 7],
            branch_dilations: vec![1, 2, 4],
            channels: 16,
            pool_stride: 16,
            d_model: 64,
            n_experts: 8,
            top_k: 2,
            expert_hidden: 128,
            head_hidden: 64,
            n_classes: 2,
            se_reduction: 4,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_len < 2 || !self.in_len.is_power_of_two() {
            return bad(format!("in_len {} must be a power of two >= 2", self.in_len));
        }
        if self.branch_kernels.is_empty() || self.branch_kernels.len() != self.branch_dilations.len() {
            return bad("branch_kernels and branch_dilations must be non-empty and of equal length".to_string());
        }
        if let Some(k) = self.branch_kernels.iter().find(|k| *k % 2 == 0) {
            return bad(format!("branch kernel length {k} must be odd"));
        }
        if self.branch_dilations.contains(&0) {
            return bad("dilations must be >= 1".to_string());
        }
        if self.pool_stride == 0 || !self.in_len.is_multiple_of(self.pool_stride) {
            return bad(format!("pool_stride {} must divide in_len {}", self.pool_stride, self.in_len));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("n_experts", self.n_experts),
            ("expert_hidden", self.expert_hidden),
            ("head_hidden", self.head_hidden),
            ("se_reduction", self.se_reduction),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad(format!("top_k {} must lie in 1..={}", self.top_k, self.n_experts));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".to_string());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.in_len / self.pool_stride
    }

    pub fn trunk_channels(&self) -> usize {
        self.channels * self.branch_kernels.len()
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.ablation = v.flags();
        self
    }
}

/// A dense layer `x W + b` addressable by name for adapters and checkpoints.
#[derive(Clone, Debug)]
pub(crate) struct LinearLayer {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Evaluated outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub main_logits: Tensor,
    pub aux_logits: Tensor,
    pub gate: GateOutput,
}

/// Tape handles of one forward pass, for building losses.
#[derive(Clone, Debug)]
pub struct Forward {
    pub main_logits: Var,
    pub aux_logits: Var,
    /// Distiller tokens `[B, T, d]` feeding the gate and the experts.
    pub tokens: Var,
    /// Gate probabilities `[B, N]` on the tape.
    pub probs: Var,
    /// Routing fractions `[N]`: hard mask statistics forward, gradient of
    /// the batch-mean probabilities backward.
    pub fractions: Var,
    pub gate: GateOutput,
    /// Number of (sample, expert) evaluations performed.
    pub expert_calls: usize,
}

impl Forward {
    pub fn output(&self, tape: &Tape) -> ModelOutput {
        ModelOutput {
            main_logits: tape.value(self.main_logits).clone(),
            aux_logits: tape.value(self.aux_logits).clone(),
            gate: self.gate.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    distiller: distiller::Distiller,
    gate_w: ParamId,
    experts: Vec<moe::Expert>,
    head: head::Heads,
    adapters: BTreeMap<String, Adapter>,
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive extents")
}

pub(crate) struct Builder<'a, R> {
    pub params: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = he_uniform(self.rng, shape, fan_in);
        self.params.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    pub fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearLayer {
        let w = self.weight(&format!("{name}.w"), &[inp, out], inp);
        let b = self.zeros(&format!("{name}.b"), &[out]);
        LinearLayer {
            name: name.to_string(),
            w,
            b: Some(b),
        }
    }
}

impl Model {
    /// Fresh model with weights drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = rng::stream(seed, "init");
        let mut b = Builder {
            params: &mut params,
            rng: &mut init,
        };
        let distiller = distiller::Distiller::build(&config, &mut b);
        let gate_w = b.weight("moe.gate.w", &[config.d_model, config.n_experts], config.d_model);
        let experts = (0..config.n_experts).map(|i| moe::Expert::build(&config, i, &mut b)).collect();
        let head = head::Heads::build(&config, &mut b);
        Ok(Self {
            config,
            params,
            distiller,
            gate_w,
            experts,
            head,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Switches ablation flags without touching weights. Every variant uses
    /// the same parameter shapes, so weights transfer between variants.
    pub fn set_ablation(&mut self, flags: AblationFlags) {
        self.config.ablation = flags;
    }

    pub fn adapters(&self) -> &BTreeMap<String, Adapter> {
        &self.adapters
    }

    pub(crate) fn linear_layers(&self) -> Vec<&LinearLayer> {
        let mut v = self.distiller.linear_layers();
        for e in &self.experts {
            v.push(&e.w1);
            v.push(&e.w2);
        }
        v.extend(self.head.linear_layers());
        v
    }

    /// Names of all dense layers that adapters can target.
    pub fn linear_layer_names(&self) -> Vec<String> {
        self.linear_layers().iter().map(|l| l.name.clone()).collect()
    }

    /// `x W + b`, with `W` replaced by `W + scale * A B` when an adapter is
    /// attached to the layer.
    pub(crate) fn apply_linear(&self, tape: &mut Tape, layer: &LinearLayer, x: Var) -> Result<Var> {
        let mut w = tape.param(&self.params, layer.w);
        if let Some(ad) = self.adapters.get(&layer.name) {
            let a = tape.param(&self.params, ad.a);
            let b = tape.param(&self.params, ad.b);
            let ab = tape.linear(a, b, None)?;
            let ab = tape.scale(ab, ad.scale);
            w = tape.add(w, ab)?;
        }
        let b = layer.b.map(|id| tape.param(&self.params, id));
        tape.linear(x, w, b)
    }

    /// Stacks segments into a `[B, 1, L]` constant.
    pub fn input_tensor(&self, batch: &[&SignalSegment]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::EmptySequence("forward batch"));
        }
        let len = self.config.in_len;
        let mut data = Vec::with_capacity(batch.len() * len);
        for s in batch {
            if s.samples.len() != len {
                return Err(Error::shape("forward input", &[s.samples.len()], &[len]));
            }
            data.extend_from_slice(&s.samples);
        }
        Tensor::new(&[batch.len(), 1, len], data)
    }

    /// Distiller tokens `[B, T, d]`.
    pub fn distill(&self, tape: &mut Tape, batch: &[&SignalSegment]) -> Result<Var> {
        let x = self.input_tensor(batch)?;
        distiller::distill(self, tape, x)
    }

    /// Pooled convolution trunk `[B, C_total, T]` (before attention).
    pub fn trunk(&self, tape: &mut Tape, batch: &[&SignalSegment]) -> Result<Var> {
        let x = self.input_tensor(batch)?;
        let x = tape.constant(x);
        distiller::trunk(self, tape, x)
    }

    /// Channel and temporal squeeze-excitation on `x[B, C, T]`.
    pub fn dual_attention(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        distiller::dual_attention(self, tape, x)
    }

    /// Full forward pass. `route_rng` is only consumed by the random-expert
    /// variant.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &[&SignalSegment],
        route_rng: &mut R,
    ) -> Result<Forward> {
        self.forward_inner(tape, batch, |m, t, z| m.route(t, z, route_rng))
    }

    /// Forward pass with a fixed expert selection per sample, e.g. to probe
    /// gradients with the routing mask held constant.
    pub fn forward_with_selection(
        &self,
        tape: &mut Tape,
        batch: &[&SignalSegment],
        selected: &[Vec<usize>],
    ) -> Result<Forward> {
        self.forward_inner(tape, batch, |m, t, z| m.route_with(t, z, &mut |_| Ok(selected.to_vec())))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        batch: &[&SignalSegment],
        route: impl FnOnce(&Self, &mut Tape, Var) -> Result<(moe::GateOutput, Var, Var)>,
    ) -> Result<Forward> {
        let tokens = self.distill(tape, batch)?;
        let pooled = tape.pool_mean(tokens)?;
        let aux_logits = self.head.aux(self, tape, pooled)?;
        let (gate, probs, fractions) = route(self, tape, pooled)?;
        let (moe_out, expert_calls) = self.moe_forward(tape, tokens, &gate, probs)?;
        let main_logits = self.head.main(self, tape, moe_out)?;
        Ok(Forward {
            main_logits,
            aux_logits,
            tokens,
            probs,
            fractions,
            gate,
            expert_calls,
        })
    }

    /// Convenience: forward on a fresh tape and return the values.
    pub fn predict<R: RngCore + ?Sized>(&self, batch: &[&SignalSegment], route_rng: &mut R) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, route_rng)?;
        Ok(f.output(&tape))
    }

    /// Exports `(name, value)` pairs in parameter order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// Loads values by name. Adapter tensors (`lora.<layer>.A` / `.B`) present
    /// in `named` are attached first; every model parameter must be supplied.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        lora::attach_from_named(self, &by_name)?;
        let mut missing = Vec::new();
        for p in self.params.iter_mut() {
            match by_name.get(p.name.as_str()) {
                Some(t) if t.shape() == p.value.shape() => p.value = (*t).clone(),
                Some(t) => return Err(Error::shape("load parameter", p.value.shape(), t.shape())),
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!("checkpoint lacks parameters: {}", missing.join(", "))));
        }
        if let Some(extra) = named.iter().find(|(n, _)| self.params.find(n).is_none()) {
            return Err(Error::Data(format!("checkpoint has unknown parameter {}", extra.0)));
        }
        Ok(())
    }
}
