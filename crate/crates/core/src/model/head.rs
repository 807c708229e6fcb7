//! Main and auxiliary classification heads.

use alloc::vec::Vec;

use rand::Rng;

use super::{Builder, LinearLayer, Model, ModelConfig};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub(crate) struct Heads {
    pub attn: ParamId,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub aux: LinearLayer,
}

impl Heads {
    pub fn build<R: Rng>(cfg: &ModelConfig, b: &mut Builder<'_, R>) -> Self {
        Self {
            attn: b.weight("head.attn", &[cfg.d_model], cfg.d_model),
            fc1: b.linear("head.fc1", cfg.d_model, cfg.head_hidden),
            fc2: b.linear("head.fc2", cfg.head_hidden, cfg.n_classes),
            aux: b.linear("aux.fc", cfg.d_model, cfg.n_classes),
        }
    }

    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        alloc::vec![&self.fc1, &self.fc2, &self.aux]
    }

    /// Attention pooling -> fc1 -> relu -> fc2 on `tokens[B, T, d]`.
    pub fn main(&self, model: &Model, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let w = tape.param(model.params(), self.attn);
        let pooled = tape.pool_attention(tokens, w)?;
        let h = model.apply_linear(tape, &self.fc1, pooled)?;
        let h = tape.relu(h);
        model.apply_linear(tape, &self.fc2, h)
    }

    /// Single linear layer on mean-pooled distiller tokens `[B, d]`.
    pub fn aux(&self, model: &Model, tape: &mut Tape, pooled: Var) -> Result<Var> {
        model.apply_linear(tape, &self.aux, pooled)
    }
}

impl Model {
    /// `(main_logits, aux_logits)` where the main head reads `tokens` and the
    /// auxiliary head reads mean-pooled `aux_tokens`.
    pub fn classify(&self, tape: &mut Tape, tokens: Var, aux_tokens: Var) -> Result<(Var, Var)> {
        let main = self.head.main(self, tape, tokens)?;
        let pooled = tape.pool_mean(aux_tokens)?;
        let aux = self.head.aux(self, tape, pooled)?;
        Ok((main, aux))
    }
}
