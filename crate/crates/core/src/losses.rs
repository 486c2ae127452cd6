//! Training losses and the cyclic schedule that mixes them.
//!
//! With `ζ_i = p̂(x_i)/q(x_i)`:
//!
//! * `L1  = −mean log q(x_i)`
//! * `L2  = log σ(ζ)`
//! * `L3a = |log mean(ρ)|`, `L3b = log σ(ρ)` over `ρ_ij = ζ_i/ζ_j`, `i ≠ j`
//!
//! Moments of `ζ` are taken after subtracting `max log ζ`, which is treated
//! as a constant. Standard deviations use divisor `N`.

use serde::{Deserialize, Serialize};

use crate::diffkernel::{Mat, Tape, Var};
use crate::error::{FlozError, Result};
use crate::flow::FlowModel;

/// Floor applied to standard deviations before taking logs.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Pairwise log-ratios are clamped to `±PAIR_LOG_CLAMP` before `exp`.
pub const PAIR_LOG_CLAMP: f64 = 30.0;

/// Differentiable per-sample `log ζ` as an N×1 tape node.
#[derive(Clone, Copy, Debug)]
pub struct ZetaBatch {
    pub log_zeta: Var,
    pub len: usize,
}

/// Computes `log q(x)` for a batch and returns `(log q, log ζ)` nodes.
pub fn compute_log_zeta(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &[Var],
    x: &Mat,
    log_p_hat: &[f64],
) -> Result<(Var, ZetaBatch)> {
    if x.rows() == 0 {
        return Err(FlozError::Precondition("empty batch".into()));
    }
    if log_p_hat.len() != x.rows() {
        return Err(FlozError::Precondition(format!(
            "{} log p̂ values for {} samples",
            log_p_hat.len(),
            x.rows()
        )));
    }
    let xv = tape.leaf(x.clone());
    let log_q = model.log_density_on_tape(tape, vars, xv);
    let lp = tape.leaf(Mat::column(log_p_hat));
    let log_zeta = tape.sub(lp, log_q);
    tape.check_finite()?;
    Ok((
        log_q,
        ZetaBatch {
            log_zeta,
            len: x.rows(),
        },
    ))
}

/// `−mean log q`.
pub fn loss_l1(tape: &mut Tape, log_q: Var) -> Var {
    let m = tape.mean(log_q);
    tape.scale(m, -1.0)
}

fn require_pairs(z: &ZetaBatch) -> Result<()> {
    if z.len < 2 {
        return Err(FlozError::Precondition(format!(
            "spread losses need at least 2 samples, got {}",
            z.len
        )));
    }
    Ok(())
}

/// `log max(σ, SIGMA_FLOOR)` from a variance node, with the variance kept
/// strictly positive so the log stays finite.
/// `offset` is added before the floor, for variances of shifted values.
fn log_sigma(tape: &mut Tape, var: Var, offset: f64) -> Var {
    let var = tape.clamp(var, f64::MIN_POSITIVE, f64::INFINITY);
    let l = tape.log(var);
    let l = tape.scale(l, 0.5);
    let l = tape.add_scalar(l, offset);
    tape.clamp(l, SIGMA_FLOOR.ln(), f64::INFINITY)
}

/// `log σ_h` of `ζ`.
pub fn loss_l2(tape: &mut Tape, z: ZetaBatch) -> Result<Var> {
    require_pairs(&z)?;
    let shift = tape
        .value(z.log_zeta)
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(z.log_zeta, -shift);
    let zeta = tape.exp(shifted);
    let mean = tape.mean(zeta);
    let centered = tape.sub(zeta, mean);
    let sq = tape.mul(centered, centered);
    let var = tape.mean(sq);
    Ok(log_sigma(tape, var, shift))
}

/// Shared pair statistics: `(mean ρ, var ρ)` over ordered pairs `i ≠ j`.
fn pair_moments(tape: &mut Tape, z: ZetaBatch) -> (Var, Var) {
    let n = z.len as f64;
    let n_pairs = n * (n - 1.0);
    let diff = tape.pair_diff(z.log_zeta);
    let diff = tape.clamp(diff, -PAIR_LOG_CLAMP, PAIR_LOG_CLAMP);
    let rho = tape.exp(diff);
    // summing ρ − 1 keeps the mean exactly 1 for constant log ζ; the
    // diagonal contributes zeros
    let excess = tape.add_scalar(rho, -1.0);
    let excess = tape.sum(excess);
    let excess = tape.scale(excess, 1.0 / n_pairs);
    let mean = tape.add_scalar(excess, 1.0);

    let centered = tape.sub(rho, mean);
    let sq = tape.mul(centered, centered);
    let sq_total = tape.sum(sq);
    let one_minus = tape.scale(mean, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let diag = tape.mul(one_minus, one_minus);
    let diag = tape.scale(diag, n);
    let off_sq = tape.sub(sq_total, diag);
    let var = tape.scale(off_sq, 1.0 / n_pairs);
    (mean, var)
}

/// `|log μ_g|`.
pub fn loss_l3a(tape: &mut Tape, z: ZetaBatch) -> Result<Var> {
    require_pairs(&z)?;
    let (mean, _) = pair_moments(tape, z);
    let l = tape.log(mean);
    Ok(tape.abs(l))
}

/// `log σ_g`.
pub fn loss_l3b(tape: &mut Tape, z: ZetaBatch) -> Result<Var> {
    require_pairs(&z)?;
    let (_, var) = pair_moments(tape, z);
    Ok(log_sigma(tape, var, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSchedule {
    /// Epochs per cycle, `N_e`.
    pub cycle_period: usize,
    /// Transition width as a fraction of a cycle, `t_e ∈ (0, 0.25)`.
    pub transition: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        LossSchedule {
            cycle_period: 100,
            transition: 0.05,
        }
    }
}

impl LossSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_period == 0 {
            return Err(FlozError::Configuration("cycle_period must be at least 1".into()));
        }
        if !(self.transition > 0.0 && self.transition < 0.25) {
            return Err(FlozError::Configuration(format!(
                "transition must lie in (0, 0.25), got {}",
                self.transition
            )));
        }
        Ok(())
    }

    pub fn weights(&self, epoch: usize) -> Weights {
        let e = (epoch % self.cycle_period) as f64 / self.cycle_period as f64;
        self.weights_at(e)
    }

    /// Weights at cycle position `e`; only the fractional part matters.
    pub fn weights_at(&self, e: f64) -> Weights {
        let e = e.rem_euclid(1.0);
        let t = self.transition;
        let alpha = ((0.25 - e % 0.25) / t).clamp(0.0, 1.0);
        let beta = 1.0 - alpha;
        let quarter = ((e / 0.25).floor() as usize).min(3);
        let in_transition = e - 0.25 * quarter as f64 >= 0.25 - t;
        let mut w = [0.0; 4];
        if in_transition {
            w[quarter] = alpha;
            w[(quarter + 1) % 4] = beta;
        } else {
            w[quarter] = 1.0;
        }
        Weights(w)
    }
}

pub fn schedule_weights(epoch: usize, sched: &LossSchedule) -> Weights {
    sched.weights(epoch)
}

/// `(w1, w2, w3a, w3b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights(pub [f64; 4]);

impl Weights {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of the segment in cycle order: sole weight on term `k` gives
    /// `2k`, a transition from `k` to `k+1` gives `2k + 1`.
    pub fn segment(&self) -> usize {
        let nz: Vec<usize> = (0..4).filter(|&k| self.0[k] > 0.0).collect();
        match nz.as_slice() {
            [k] => 2 * k,
            [0, 3] => 7,
            [a, _] => 2 * a + 1,
            _ => unreachable!("schedule weights always have one or two active terms"),
        }
    }
}

/// Scalar values of the four terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3a: f64,
    pub l3b: f64,
}

impl LossTerms {
    pub fn mix(&self, w: &Weights) -> f64 {
        let [a, b, c, d] = w.0;
        a * self.l1 + b * self.l2 + c * self.l3a + d * self.l3b
    }
}

/// Builds the scheduled mixed loss on `tape`. Terms with zero weight are
/// evaluated only when `all_terms` is set.
pub fn mixed_loss(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &[Var],
    x: &Mat,
    log_p_hat: &[f64],
    weights: &Weights,
    all_terms: bool,
) -> Result<(Var, LossTerms)> {
    let (log_q, z) = compute_log_zeta(tape, model, vars, x, log_p_hat)?;
    let mut terms = LossTerms::default();
    let mut parts: Vec<Var> = Vec::with_capacity(4);
    let [w1, w2, w3a, w3b] = weights.0;

    let l1 = loss_l1(tape, log_q);
    terms.l1 = tape.scalar(l1);
    if w1 > 0.0 {
        parts.push(tape.scale(l1, w1));
    }
    if w2 > 0.0 || all_terms {
        let l2 = loss_l2(tape, z)?;
        terms.l2 = tape.scalar(l2);
        if w2 > 0.0 {
            parts.push(tape.scale(l2, w2));
        }
    }
    if w3a > 0.0 || w3b > 0.0 || all_terms {
        let (mean, var) = pair_moments(tape, z);
        let lm = tape.log(mean);
        let l3a = tape.abs(lm);
        let l3b = log_sigma(tape, var, 0.0);
        terms.l3a = tape.scalar(l3a);
        terms.l3b = tape.scalar(l3b);
        if w3a > 0.0 {
            parts.push(tape.scale(l3a, w3a));
        }
        if w3b > 0.0 {
            parts.push(tape.scale(l3b, w3b));
        }
    }
    tape.check_finite()?;
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p);
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeta(tape: &mut Tape, values: &[f64]) -> ZetaBatch {
        ZetaBatch {
            log_zeta: tape.leaf(Mat::column(values)),
            len: values.len(),
        }
    }

    #[test]
    fn two_point_pair_losses() {
        let mut t = Tape::new();
        let z = zeta(&mut t, &[0.0, 2f64.ln()]);
        let a = loss_l3a(&mut t, z).unwrap();
        let b = loss_l3b(&mut t, z).unwrap();
        assert!((t.scalar(a) - 1.25f64.ln()).abs() < 1e-14);
        assert!((t.scalar(b) - 0.75f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_point_l2_population_std() {
        let mut t = Tape::new();
        let z = zeta(&mut t, &[0.0, 3f64.ln()]);
        let l = loss_l2(&mut t, z).unwrap();
        assert!(t.scalar(l).abs() < 1e-14);
    }

    #[test]
    fn constant_zeta_hits_floor() {
        let mut t = Tape::new();
        let z = zeta(&mut t, &[0.0; 5]);
        let l2 = loss_l2(&mut t, z).unwrap();
        let l3a = loss_l3a(&mut t, z).unwrap();
        let l3b = loss_l3b(&mut t, z).unwrap();
        assert_eq!(t.scalar(l2), SIGMA_FLOOR.ln());
        assert_eq!(t.scalar(l3a), 0.0);
        assert_eq!(t.scalar(l3b), SIGMA_FLOOR.ln());
    }

    #[test]
    fn single_sample_is_rejected() {
        let mut t = Tape::new();
        let z = zeta(&mut t, &[1.0]);
        assert!(loss_l2(&mut t, z).is_err());
        assert!(loss_l3a(&mut t, z).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = LossSchedule::default();
        assert_eq!(s.weights(0).0, [1.0, 0.0, 0.0, 0.0]);
        let w = s.weights(22).0;
        assert!((w[0] - 0.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert_eq!(s.weights(100), s.weights(0));
        // wrap-around transition from L3b back to L1
        let w = s.weights(97).0;
        assert!((w[3] - 0.6).abs() < 1e-12 && (w[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn eight_segments_per_cycle() {
        let s = LossSchedule::default();
        let mut seen = Vec::new();
        for epoch in 0..100 {
            let seg = s.weights(epoch).segment();
            if seen.last() != Some(&seg) {
                seen.push(seg);
            }
        }
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }
}
