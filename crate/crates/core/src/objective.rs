//! Loss terms and their composition `L = L_main + alpha L_aux + beta L_gate`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AblationFlags, Forward};

/// Tolerance on `sum_i f_i = 1` accepted by [`load_balance_loss`].
pub const FRACTION_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the auxiliary-head cross-entropy.
    pub alpha: f64,
    /// Weight of the gate regularizer.
    pub beta: f64,
    /// Strength inside the gate regularizer itself.
    pub lambda_bal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 1.0,
            lambda_bal: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda_bal", self.lambda_bal)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub main: f64,
    pub aux: f64,
    pub gate: f64,
    pub total: f64,
}

impl LossReport {
    /// `total - (main + alpha aux + beta gate)` for the given weights.
    pub fn identity_residual(&self, w: &LossWeights, no_balance: bool) -> f64 {
        let beta = if no_balance { 0.0 } else { w.beta };
        self.total - (self.main + w.alpha * self.aux + beta * self.gate)
    }
}

/// Mean cross-entropy of `logits[B, C]` against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

fn check_fractions(f: &[f64]) -> Result<()> {
    let s: f64 = f.iter().sum();
    if (s - 1.0).abs() > FRACTION_SUM_TOL {
        return Err(Error::Contract(format!("routing fractions sum to {s}, expected 1")));
    }
    if let Some(v) = f.iter().find(|v| **v < 0.0) {
        return Err(Error::Contract(format!("negative routing fraction {v}")));
    }
    Ok(())
}

/// `lambda sum_i (f_i - 1/N)^2` evaluated directly.
pub fn load_balance_value(f: &[f64], lambda_bal: f64) -> Result<f64> {
    check_fractions(f)?;
    let inv = 1.0 / f.len() as f64;
    Ok(lambda_bal * f.iter().map(|v| (v - inv) * (v - inv)).sum::<f64>())
}

/// `lambda sum_i (f_i - 1/N)^2` on the tape.
pub fn load_balance_loss(tape: &mut Tape, f: Var, lambda_bal: f64) -> Result<Var> {
    let fv = tape.value(f);
    if fv.rank() != 1 {
        return Err(Error::shape("load_balance_loss", fv.shape(), &[fv.len()]));
    }
    check_fractions(fv.data())?;
    let n = fv.len();
    let dev = tape.add_const(f, -1.0 / n as f64);
    let sq = tape.mul(dev, dev)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, lambda_bal))
}

/// Composes the three scalar terms. With `no_balance` the gate term
/// contributes nothing regardless of `beta`; it is still reported.
pub fn total_loss(
    tape: &mut Tape,
    main: Var,
    aux: Var,
    gate: Var,
    w: &LossWeights,
    no_balance: bool,
) -> Result<(Var, LossReport)> {
    let (m, a, g) = (tape.value(main).data()[0], tape.value(aux).data()[0], tape.value(gate).data()[0]);
    if !(m.is_finite() && a.is_finite() && g.is_finite()) {
        return Err(Error::Contract(format!("non-finite loss term: main={m} aux={a} gate={g}")));
    }
    let beta = if no_balance { 0.0 } else { w.beta };
    let wa = tape.scale(aux, w.alpha);
    let t = tape.add(main, wa)?;
    let total = if beta == 0.0 {
        t
    } else {
        let wg = tape.scale(gate, beta);
        tape.add(t, wg)?
    };
    let report = LossReport {
        main: m,
        aux: a,
        gate: g,
        total: tape.value(total).data()[0],
    };
    debug_assert!(report.identity_residual(w, no_balance).abs() <= 1e-12);
    Ok((total, report))
}

/// Full training objective for one forward pass.
pub fn objective(
    tape: &mut Tape,
    fwd: &Forward,
    labels: &[usize],
    w: &LossWeights,
    flags: AblationFlags,
) -> Result<(Var, LossReport)> {
    let main = cross_entropy(tape, fwd.main_logits, labels)?;
    let aux = cross_entropy(tape, fwd.aux_logits, labels)?;
    let gate = load_balance_loss(tape, fwd.fractions, w.lambda_bal)?;
    total_loss(tape, main, aux, gate, w, flags.no_balance)
}

/// Per-term scalar values, handy for tests.
pub fn values(tape: &Tape, vars: &[Var]) -> Vec<f64> {
    vars.iter().map(|v| tape.value(*v).data()[0]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(&[1, 2], alloc::vec![0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        assert!((tape.value(ce).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
        let l = tape.constant(Tensor::new(&[1, 2], alloc::vec![1000.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        let v = tape.value(ce).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);
    }

    #[test]
    fn load_balance_cases() {
        assert_eq!(load_balance_value(&[0.25; 4], 1.0).unwrap(), 0.0);
        assert_eq!(load_balance_value(&[1.0, 0.0], 1.0).unwrap(), 0.5);
        assert!(matches!(load_balance_value(&[0.6, 0.6], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::scalar(1.0));
        let a = tape.constant(Tensor::scalar(2.0));
        let g = tape.constant(Tensor::scalar(3.0));
        let w = LossWeights {
            alpha: 0.5,
            beta: 0.1,
            lambda_bal: 0.01,
        };
        let (_, r) = total_loss(&mut tape, m, a, g, &w, false).unwrap();
        assert!((r.total - 2.3).abs() < 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda_bal: 0.0,
        };
        let (_, r) = total_loss(&mut tape, m, a, g, &zero, false).unwrap();
        assert_eq!(r.total, r.main);
        let (_, r) = total_loss(&mut tape, m, a, g, &w, true).unwrap();
        assert!((r.total - 2.0).abs() < 1e-12);
        assert_eq!(r.gate, 3.0);
    }

    #[test]
    fn weights_reject_negative() {
        let w = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
