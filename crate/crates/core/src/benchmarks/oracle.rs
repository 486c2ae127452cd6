use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{BenchmarkSpec, GroundTruth, TruthMethod};
use crate::error::{FlozError, Result};

const CHUNK: usize = 1 << 16;

/// Running sums of `exp(l − shift)` and its square.
#[derive(Clone, Copy)]
struct Acc {
    shift: f64,
    s1: f64,
    s2: f64,
}

impl Acc {
    const EMPTY: Acc = Acc {
        shift: f64::NEG_INFINITY,
        s1: 0.0,
        s2: 0.0,
    };

    fn push(&mut self, l: f64) {
        if l == f64::NEG_INFINITY {
            return;
        }
        if l > self.shift {
            let r = (self.shift - l).exp();
            self.s1 *= r;
            self.s2 *= r * r;
            self.shift = l;
        }
        let e = (l - self.shift).exp();
        self.s1 += e;
        self.s2 += e * e;
    }

    fn merge(self, o: Acc) -> Acc {
        if self.shift == f64::NEG_INFINITY {
            return o;
        }
        if o.shift == f64::NEG_INFINITY {
            return self;
        }
        let shift = self.shift.max(o.shift);
        let (ra, rb) = ((self.shift - shift).exp(), (o.shift - shift).exp());
        Acc {
            shift,
            s1: self.s1 * ra + o.s1 * rb,
            s2: self.s2 * ra * ra + o.s2 * rb * rb,
        }
    }
}

/// `log ∫ exp(log_p)` over a box by uniform sampling, with the standard
/// error of the log. Chunks draw from independent streams, so the result
/// does not depend on the thread count.
pub fn mc_log_evidence(
    log_p: impl Fn(&[f64]) -> f64 + Sync,
    lower: &[f64],
    upper: &[f64],
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(FlozError::Precondition("Monte Carlo oracle needs at least 2 draws".into()));
    }
    let d = lower.len();
    let log_volume: f64 = lower.iter().zip(upper).map(|(l, u)| (u - l).ln()).sum();
    let n_chunks = n.div_ceil(CHUNK);
    let acc = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(n - c * CHUNK);
            let mut x = vec![0.0; d];
            let mut acc = Acc::EMPTY;
            for _ in 0..count {
                for j in 0..d {
                    let u: f64 = rng.random();
                    x[j] = lower[j] + u * (upper[j] - lower[j]);
                }
                acc.push(log_p(&x));
            }
            acc
        })
        .reduce(|| Acc::EMPTY, Acc::merge);
    if acc.shift == f64::NEG_INFINITY || acc.s1 == 0.0 {
        return Err(FlozError::Geometry(
            "Monte Carlo oracle found no probability mass in the box".into(),
        ));
    }
    let nf = n as f64;
    let mean = acc.s1 / nf;
    let var = (acc.s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    let rel_se = (var / nf).sqrt() / mean;
    Ok((acc.shift + mean.ln() + log_volume, rel_se))
}

pub fn mc_oracle_log_evidence(spec: &BenchmarkSpec, n: usize, seed: u64) -> Result<GroundTruth> {
    let dens = spec.density()?;
    let (log_z, err) = mc_log_evidence(
        |x| dens.log_p_hat(x),
        &spec.prior.lower,
        &spec.prior.upper,
        n,
        seed,
    )?;
    Ok(GroundTruth {
        log_z: Some(log_z),
        method: TruthMethod::MonteCarloOracle,
        oracle_error: Some(err),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_density_on_unit_box() {
        let (lz, se) = mc_log_evidence(|_| 0.0, &[0.0, 0.0], &[1.0, 1.0], 1000, 1).unwrap();
        assert_eq!(lz, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn empty_mass_is_flagged() {
        let r = mc_log_evidence(|_| f64::NEG_INFINITY, &[0.0], &[1.0], 100, 1);
        assert!(matches!(r, Err(FlozError::Geometry(_))));
    }

    #[test]
    fn accumulator_merge_matches_sequential() {
        let vals = [-3.0, 1.5, -0.2, 4.0, -10.0];
        let mut all = Acc::EMPTY;
        vals.iter().for_each(|v| all.push(*v));
        let mut a = Acc::EMPTY;
        let mut b = Acc::EMPTY;
        vals[..2].iter().for_each(|v| a.push(*v));
        vals[2..].iter().for_each(|v| b.push(*v));
        let m = a.merge(b);
        assert_eq!(m.shift, all.shift);
        assert!((m.s1 - all.s1).abs() < 1e-12 && (m.s2 - all.s2).abs() < 1e-12);
    }
}
