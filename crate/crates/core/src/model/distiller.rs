//! Invariant feature distiller: parallel dilated convolution branches with
//! residual links, optional spectral fusion and dual squeeze-excitation.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{Builder, LinearLayer, Model, ModelConfig};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::Result;
use crate::signal;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct Branch {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

/// Bottleneck MLP producing sigmoid gates.
#[derive(Clone, Debug)]
pub(crate) struct Excitation {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Clone, Debug)]
pub(crate) struct Distiller {
    pub branches: Vec<Branch>,
    pub se_channel: Excitation,
    pub se_time: Excitation,
    pub proj: LinearLayer,
    pub fft_proj: LinearLayer,
}

impl Excitation {
    fn build<R: Rng>(name: &str, width: usize, reduction: usize, b: &mut Builder<'_, R>) -> Self {
        let hidden = (width / reduction).max(1);
        Self {
            fc1: b.linear(&format!("{name}.fc1"), width, hidden),
            fc2: b.linear(&format!("{name}.fc2"), hidden, width),
        }
    }

    /// `sigmoid(fc2(relu(fc1(squeezed))))`.
    pub fn gates(&self, model: &Model, tape: &mut Tape, squeezed: Var) -> Result<Var> {
        let h = model.apply_linear(tape, &self.fc1, squeezed)?;
        let h = tape.relu(h);
        let h = model.apply_linear(tape, &self.fc2, h)?;
        Ok(tape.sigmoid(h))
    }
}

impl Distiller {
    pub fn build<R: Rng>(cfg: &ModelConfig, b: &mut Builder<'_, R>) -> Self {
        let branches = cfg
            .branch_kernels
            .iter()
            .zip(&cfg.branch_dilations)
            .enumerate()
            .map(|(i, (&k, &dilation))| Branch {
                kernel: b.weight(&format!("distill.branch{i}.kernel"), &[cfg.channels, 1, k], k),
                bias: b.zeros(&format!("distill.branch{i}.bias"), &[cfg.channels]),
                dilation,
            })
            .collect();
        let c = cfg.trunk_channels();
        Self {
            branches,
            se_channel: Excitation::build("distill.se_channel", c, cfg.se_reduction, b),
            se_time: Excitation::build("distill.se_time", cfg.tokens(), cfg.se_reduction, b),
            proj: b.linear("distill.proj", c, cfg.d_model),
            fft_proj: b.linear("distill.fft_proj", cfg.in_len / 2, cfg.d_model),
        }
    }

    pub fn linear_layers(&self) -> Vec<&LinearLayer> {
        alloc::vec![
            &self.se_channel.fc1,
            &self.se_channel.fc2,
            &self.se_time.fc1,
            &self.se_time.fc2,
            &self.proj,
            &self.fft_proj,
        ]
    }
}

/// Pooled multi-scale trunk `[B, C_total, T]` before attention.
pub(crate) fn trunk(model: &Model, tape: &mut Tape, x: Var) -> Result<Var> {
    let d = &model.distiller;
    let cfg = model.config();
    let residual = tape.repeat_channels(x, cfg.channels)?;
    let mut outs = Vec::with_capacity(d.branches.len());
    for br in &d.branches {
        let k = tape.param(model.params(), br.kernel);
        let bias = tape.param(model.params(), br.bias);
        let c = tape.conv1d(x, k, Some(bias), br.dilation)?;
        let c = tape.relu(c);
        outs.push(tape.add(c, residual)?);
    }
    let cat = tape.concat_channels(&outs)?;
    tape.avg_pool(cat, cfg.pool_stride)
}

/// Channel gates from the time-mean, temporal gates from the channel-mean,
/// both computed from the same input: `out[b,c,t] = x[b,c,t] s_ch[b,c] s_t[b,t]`.
pub(crate) fn dual_attention(model: &Model, tape: &mut Tape, x: Var) -> Result<Var> {
    let d = &model.distiller;
    let sq_c = tape.mean_axis(x, 2)?;
    let s_ch = d.se_channel.gates(model, tape, sq_c)?;
    let sq_t = tape.mean_axis(x, 1)?;
    let s_t = d.se_time.gates(model, tape, sq_t)?;
    let y = tape.scale_channels(x, s_ch)?;
    tape.scale_time(y, s_t)
}

/// Magnitude spectra `[B, L/2]`, rescaled by `sqrt(L)/2` so a unit-variance
/// segment has bins of order one.
pub(crate) fn spectra(x: &Tensor) -> Result<Tensor> {
    let (b_, len) = (x.shape()[0], x.shape()[2]);
    let scale = libm::sqrt(len as f64) / 2.0;
    let mut data = Vec::with_capacity(b_ * len / 2);
    for row in x.data().chunks(len) {
        data.extend(signal::magnitude_spectrum(row)?.into_iter().map(|v| v * scale));
    }
    Tensor::new(&[b_, len / 2], data)
}

pub(crate) fn distill(model: &Model, tape: &mut Tape, x: Tensor) -> Result<Var> {
    let flags = model.config().ablation;
    let spec = if flags.no_fft { None } else { Some(spectra(&x)?) };
    let xv = tape.constant(x);
    let mut feats = trunk(model, tape, xv)?;
    if !flags.no_dual_attn {
        feats = dual_attention(model, tape, feats)?;
    }
    let seq = tape.transpose12(feats)?;
    let mut tokens = model.apply_linear(tape, &model.distiller.proj, seq)?;
    if let Some(spec) = spec {
        let s = tape.constant(spec);
        let f = model.apply_linear(tape, &model.distiller.fft_proj, s)?;
        tokens = tape.add_rows(tokens, f)?;
    }
    Ok(tokens)
}
