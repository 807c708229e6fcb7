//! Domain-conditioned sparse mixture of experts.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::{Builder, LinearLayer, Model, ModelConfig};
use crate::autodiff::{topk_indices, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `h_i(z) = W2 relu(W1 z + b1) + b2`, applied token-wise.
#[derive(Clone, Debug)]
pub(crate) struct Expert {
    pub w1: LinearLayer,
    pub w2: LinearLayer,
}

impl Expert {
    pub fn build<R: Rng>(cfg: &ModelConfig, i: usize, b: &mut Builder<'_, R>) -> Self {
        Self {
            w1: b.linear(&format!("moe.expert{i}.w1"), cfg.d_model, cfg.expert_hidden),
            w2: b.linear(&format!("moe.expert{i}.w2"), cfg.expert_hidden, cfg.d_model),
        }
    }
}

/// Per-batch routing record.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// `softmax(W_g z)`, `[B, N]`.
    pub probs: Tensor,
    /// Binary top-k mask, `[B, N]`.
    pub mask: Tensor,
    /// Selected expert indices per sample, ascending.
    pub selected: Vec<Vec<usize>>,
    /// `f_i = (1 / (B k)) sum_b m[b, i]`, `[N]`.
    pub fractions: Tensor,
}

impl GateOutput {
    /// Builds mask and fractions from a per-sample selection.
    pub fn from_selection(probs: Tensor, selected: Vec<Vec<usize>>, n: usize, k: usize) -> Self {
        let b_ = selected.len();
        let mut mask = vec![0.0; b_ * n];
        let mut counts = vec![0.0; n];
        for (b, sel) in selected.iter().enumerate() {
            for &i in sel {
                mask[b * n + i] = 1.0;
                counts[i] += 1.0;
            }
        }
        let denom = (b_ * k) as f64;
        let fractions = counts.into_iter().map(|c| c / denom).collect();
        Self {
            probs,
            mask: Tensor::new(&[b_, n], mask).expect("batch is non-empty"),
            selected,
            fractions: Tensor::from_vec(fractions),
        }
    }

    pub fn batch(&self) -> usize {
        self.selected.len()
    }
}

impl Model {
    /// Gate probabilities, top-k (or random) mask and routing fractions for
    /// `z[B, d]`. Returns the record plus the tape handles of `p` and `f`.
    pub fn route<R: RngCore + ?Sized>(
        &self,
        tape: &mut Tape,
        z: Var,
        route_rng: &mut R,
    ) -> Result<(GateOutput, Var, Var)> {
        let (n, k) = (self.config().n_experts, self.config().top_k);
        let random = self.config().ablation.random_expert;
        self.route_with(tape, z, &mut |p: &Tensor| {
            let b_ = p.shape()[0];
            if random {
                return Ok((0..b_)
                    .map(|_| {
                        let mut s = rand::seq::index::sample(route_rng, n, k).into_vec();
                        s.sort_unstable();
                        s
                    })
                    .collect());
            }
            (0..b_)
                .map(|b| {
                    let mut s = topk_indices(p.row(b), k)?;
                    s.sort_unstable();
                    Ok(s)
                })
                .collect()
        })
    }

    /// Like [`Model::route`] with the per-sample selection supplied by
    /// `select`, which sees the gate probabilities.
    pub fn route_with(
        &self,
        tape: &mut Tape,
        z: Var,
        select: &mut dyn FnMut(&Tensor) -> Result<Vec<Vec<usize>>>,
    ) -> Result<(GateOutput, Var, Var)> {
        let (n, k) = (self.config().n_experts, self.config().top_k);
        let wg = tape.param(self.params(), self.gate_w);
        let logits = tape.linear(z, wg, None)?;
        let probs = tape.softmax(logits);
        let p = tape.value(probs).clone();
        let selected = select(&p)?;
        if selected.len() != p.shape()[0] || selected.iter().any(|s| s.len() != k || s.iter().any(|&i| i >= n)) {
            return Err(Error::Contract(format!("selection must name {k} experts below {n} for every sample")));
        }
        let gate = GateOutput::from_selection(p, selected, n, k);
        // straight-through fractions: hard counts forward, d/dp of the batch-mean
        // probability backward
        let soft = tape.mean_axis(probs, 0)?;
        let fractions = tape.straight_through(gate.fractions.clone(), soft)?;
        Ok((gate, probs, fractions))
    }

    /// `h_i` on `z[..., d]`.
    pub fn expert_forward(&self, tape: &mut Tape, i: usize, z: Var) -> Result<Var> {
        let e = self
            .experts
            .get(i)
            .ok_or_else(|| Error::Config(format!("expert index {i} out of range for {} experts", self.experts.len())))?;
        let h = self.apply_linear(tape, &e.w1, z)?;
        let h = tape.relu(h);
        self.apply_linear(tape, &e.w2, h)
    }

    /// `y = sum_i m_i p_i h_i(z)` over `z[B, ...]`; only selected experts are
    /// evaluated, on the samples that selected them. The mask enters as a
    /// constant, so gradients reach the gate only through `p`.
    /// With `avg_fusion`, `y = (1/N) sum_i h_i(z)`.
    ///
    /// Returns the output and the number of (sample, expert) evaluations.
    pub fn moe_forward(&self, tape: &mut Tape, z: Var, gate: &GateOutput, probs: Var) -> Result<(Var, usize)> {
        let n = self.config().n_experts;
        let b_ = gate.batch();
        if self.config().ablation.avg_fusion {
            let mut acc: Option<Var> = None;
            for i in 0..n {
                let h = self.expert_forward(tape, i, z)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, h)?,
                    None => h,
                });
            }
            let y = tape.scale(acc.expect("n_experts >= 1"), 1.0 / n as f64);
            return Ok((y, b_ * n));
        }
        let mut acc: Option<Var> = None;
        let mut calls = 0;
        for i in 0..n {
            let rows: Vec<usize> = (0..b_).filter(|&b| gate.selected[b].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            calls += rows.len();
            let zi = tape.gather_rows(z, &rows)?;
            let h = self.expert_forward(tape, i, zi)?;
            let pairs: Vec<(usize, usize)> = rows.iter().map(|&b| (b, i)).collect();
            let w = tape.gather_entries(probs, &pairs)?;
            let hw = tape.scale_rows(h, w)?;
            let y = tape.scatter_rows(hw, &rows, b_)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok((acc.expect("every sample selects k >= 1 experts"), calls))
    }
}
