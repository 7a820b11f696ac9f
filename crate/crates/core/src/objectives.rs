//! Sigmoid pairwise contrastive loss, multi-label BCE and their combination.

use serde::{Deserialize, Serialize};

use crate::dataset::PairMask;
use crate::error::{Error, Result};
use crate::ndmath::{log_sigmoid, ParamStore, Tape, Tensor, Var};

pub const T_LOG_KEY: &str = "contrastive.t_log";
pub const BIAS_KEY: &str = "contrastive.b";

/// Tolerance on row norms accepted by the contrastive loss.
pub const UNIT_TOL: f64 = 1e-6;

/// Learnable temperature (stored as `ln t`) and bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParams {
    pub t_log: f64,
    pub b: f64,
}

impl ContrastiveParams {
    pub fn new(t: f64, b: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) || !b.is_finite() {
            return Err(Error::domain(format!("temperature {t} must be positive, bias {b} finite")));
        }
        Ok(Self { t_log: t.ln(), b })
    }

    pub fn t(&self) -> f64 {
        self.t_log.exp()
    }

    /// Adds both scalars to `store`; a frozen bias is kept out of optimization.
    pub fn register(&self, store: &mut ParamStore, bias_trainable: bool) {
        store.insert(T_LOG_KEY, Tensor::scalar(self.t_log), true);
        store.insert(BIAS_KEY, Tensor::scalar(self.b), bias_trainable);
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            t_log: store.get(T_LOG_KEY)?.item(),
            b: store.get(BIAS_KEY)?.item(),
        })
    }
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            t_log: 10f64.ln(),
            b: -3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// One positive per row: `logit(1 / |B|)`.
    Nominal,
    /// Whole teams as positives: `logit(A / |B|)`.
    Exact,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Bias that matches the prior positive rate of a `g × a` batch.
pub fn init_bias(mode: BiasMode, g: usize, a: usize) -> Result<f64> {
    let n = g * a;
    let p = match mode {
        BiasMode::Nominal => 1.0 / n as f64,
        BiasMode::Exact => a as f64 / n as f64,
    };
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "batch shape ({g}, {a}) gives positive rate {p}; logit undefined"
        )));
    }
    Ok(logit(p))
}

fn check_unit_rows(u: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = u.dims2()?;
    for i in 0..n {
        let norm = u.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::domain(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    Ok((n, d))
}

fn check_mask(mask: &PairMask, n: usize) -> Result<()> {
    if mask.n != n {
        return Err(Error::domain(format!("mask is {0}x{0} for {n} embeddings", mask.n)));
    }
    Ok(())
}

/// `-(1/|B|) Σ_ij log σ(m_ij (t u_i·u_j − b))` on plain tensors.
pub fn cecl_loss(u: &Tensor, mask: &PairMask, params: &ContrastiveParams) -> Result<f64> {
    let (n, _) = check_unit_rows(u)?;
    check_mask(mask, n)?;
    let sim = u.matmul(&u.transpose()?)?;
    let t = params.t();
    let total: f64 = sim
        .data()
        .iter()
        .zip(&mask.m)
        .map(|(&s, &m)| log_sigmoid(m as f64 * (t * s - params.b)))
        .sum();
    Ok(-total / n as f64)
}

/// Tape version of [`cecl_loss`]; gradients reach `u`, `t_log` and `b`.
pub fn cecl_loss_tape(tape: &mut Tape, u: Var, mask: &PairMask, t_log: Var, b: Var) -> Result<Var> {
    let (n, _) = check_unit_rows(tape.value(u))?;
    check_mask(mask, n)?;
    let ut = tape.transpose(u)?;
    let sim = tape.matmul(u, ut)?;
    let t = tape.exp(t_log);
    let scaled = tape.mul_scalar(sim, t)?;
    let neg_b = tape.scale(b, -1.0);
    let logits = tape.add_scalar(scaled, neg_b)?;
    let m = tape.leaf(mask.to_tensor());
    let signed = tape.mul(logits, m)?;
    let ls = tape.log_sigmoid(signed);
    let total = tape.sum(ls);
    Ok(tape.scale(total, -1.0 / n as f64))
}

fn check_targets(logits: &Tensor, y: &Tensor) -> Result<()> {
    if logits.shape() != y.shape() {
        return Err(Error::domain(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.shape(),
            y.shape()
        )));
    }
    logits.dims2()?;
    if let Some(bad) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain(format!("target {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Binary cross entropy from logits, summed over labels and averaged over
/// rows.
pub fn bce_loss(logits: &Tensor, y: &Tensor) -> Result<f64> {
    check_targets(logits, y)?;
    let n = logits.shape()[0];
    let total: f64 = logits
        .data()
        .iter()
        .zip(y.data())
        .map(|(&x, &t)| if t == 1.0 { -log_sigmoid(x) } else { -log_sigmoid(-x) })
        .sum();
    Ok(total / n as f64)
}

pub fn bce_loss_tape(tape: &mut Tape, logits: Var, y: &Tensor) -> Result<Var> {
    check_targets(tape.value(logits), y)?;
    let n = y.shape()[0];
    let pos = tape.log_sigmoid(logits);
    let flipped = tape.scale(logits, -1.0);
    let neg = tape.log_sigmoid(flipped);
    let yv = tape.leaf(y.clone());
    let not_y = tape.leaf(Tensor::new(y.shape(), y.data().iter().map(|v| 1.0 - v).collect())?);
    let a = tape.mul(pos, yv)?;
    let b = tape.mul(neg, not_y)?;
    let both = tape.add(a, b)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// `λ · cecl + bce`. With `λ = 0` the contrastive term is not consulted, so
/// callers can skip building it.
pub fn total_loss(tape: &mut Tape, cecl: Option<Var>, bce: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::domain(format!("lambda {lambda} must be finite and >= 0")));
    }
    if lambda == 0.0 {
        return Ok(bce);
    }
    let c = cecl.ok_or_else(|| Error::domain("contrastive term missing for lambda > 0"))?;
    let weighted = tape.scale(c, lambda);
    tape.add(weighted, bce)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_is_diagonal_positive() {
        let u = Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap();
        let m = PairMask { n: 1, m: vec![1] };
        let l = cecl_loss(&u, &m, &ContrastiveParams::default()).unwrap();
        // -log σ(13) = ln(1 + e^-13)
        assert!((l - (-13f64).exp().ln_1p()).abs() < 1e-18);
        assert!((l - 2.26e-6).abs() < 1e-8);
    }

    #[test]
    fn bias_modes() {
        assert!((init_bias(BiasMode::Nominal, 32, 1).unwrap() - (1.0f64 / 31.0).ln()).abs() < 1e-15);
        assert!((init_bias(BiasMode::Exact, 6, 5).unwrap() - 0.2f64.ln()).abs() < 1e-15);
        assert_eq!(init_bias(BiasMode::Nominal, 2, 1).unwrap(), 0.0);
        assert!(init_bias(BiasMode::Exact, 1, 5).is_err());
    }

    #[test]
    fn non_unit_rows_rejected() {
        let u = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let m = PairMask { n: 1, m: vec![1] };
        assert!(cecl_loss(&u, &m, &ContrastiveParams::default()).is_err());
    }

    #[test]
    fn bce_at_zero_logits() {
        let x = Tensor::zeros(&[2, 23]);
        let mut y = Tensor::zeros(&[2, 23]);
        y.data_mut()[5] = 1.0;
        let l = bce_loss(&x, &y).unwrap();
        assert!((l - 23.0 * 2f64.ln()).abs() < 1e-12);
        y.data_mut()[0] = 0.5;
        assert!(bce_loss(&x, &y).is_err());
    }

    #[test]
    fn bce_saturated_logit() {
        let x = Tensor::new(&[1, 1], vec![50.0]).unwrap();
        let y = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let l = bce_loss(&x, &y).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
        let y0 = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        assert!((bce_loss(&x, &y0).unwrap() - 50.0).abs() < 1e-12);
    }
}
