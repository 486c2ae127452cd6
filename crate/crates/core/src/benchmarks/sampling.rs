use nalgebra::{Cholesky, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{cov_matrix, BenchmarkSpec, Family};
use crate::diffkernel::Mat;
use crate::error::{FlozError, Result};
use crate::sampleio::{default_names, SampleSet};

const MIN_SAMPLES: usize = 100;
const MIN_ACCEPTANCE: f64 = 1e-4;
/// Attempts before the rejection rate is judged.
const ACCEPTANCE_PROBE: usize = 100_000;

const BURN_IN: usize = 10_000;
const TARGET_ACCEPTANCE: f64 = 0.25;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    /// Accepted fraction of box-rejection draws, or the post-burn-in
    /// Metropolis acceptance rate.
    pub acceptance: f64,
    pub thinning: usize,
}

pub fn draw_samples(spec: &BenchmarkSpec) -> Result<SampleSet> {
    draw_samples_with_report(spec).map(|(s, _)| s)
}

pub fn draw_samples_with_report(spec: &BenchmarkSpec) -> Result<(SampleSet, SamplerReport)> {
    if spec.n_samples < MIN_SAMPLES {
        return Err(FlozError::Schema(format!(
            "n_samples: need at least {MIN_SAMPLES}, got {}",
            spec.n_samples
        )));
    }
    let dens = spec.density()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (x, report) = match &spec.family {
        Family::Gaussian { mean, cov } => {
            gaussian_rejection(spec, &[mean.clone()], &[cov.clone()], &mut rng)?
        }
        Family::GaussianMixture5 { means, covs } => gaussian_rejection(spec, means, covs, &mut rng)?,
        Family::Exponential { rates } => (exponential(spec, rates, &mut rng), SamplerReport {
            acceptance: 1.0,
            thinning: 1,
        }),
        Family::Rosenbrock { .. } => rosenbrock_metropolis(spec, &dens, &mut rng)?,
    };
    let lp: Vec<f64> = (0..x.rows()).map(|r| dens.log_p_hat(x.row_slice(r))).collect();
    let set = SampleSet::new(x, lp, default_names(spec.d))?;
    Ok((set, report))
}

/// Exact draws from the untruncated mixture, kept when inside the box.
/// Components are chosen with weight `√|σ_j|`, the mass of each unnormalized
/// kernel.
fn gaussian_rejection(
    spec: &BenchmarkSpec,
    means: &[Vec<f64>],
    covs: &[Vec<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, SamplerReport)> {
    let d = spec.d;
    let factors: Vec<_> = covs
        .iter()
        .map(|c| Cholesky::new(cov_matrix(c)).expect("validated covariance").l())
        .collect();
    let weights: Vec<f64> = factors
        .iter()
        .map(|l| l.diagonal().iter().product::<f64>())
        .collect();
    let pick = WeightedIndex::new(&weights)
        .map_err(|e| FlozError::Schema(format!("mixture weights: {e}")))?;
    let (lo, hi) = (&spec.prior.lower, &spec.prior.upper);

    let mut out = Mat::zeros(spec.n_samples, d);
    let mut attempts = 0usize;
    let mut accepted = 0usize;
    let mut z = DVector::zeros(d);
    while accepted < spec.n_samples {
        attempts += 1;
        let k = pick.sample(rng);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let x = &factors[k] * &z;
        let row: Vec<f64> = (0..d).map(|i| means[k][i] + x[i]).collect();
        if row.iter().zip(lo.iter().zip(hi)).all(|(v, (l, u))| v >= l && v <= u) {
            out.row_slice_mut(accepted).copy_from_slice(&row);
            accepted += 1;
        } else if attempts >= ACCEPTANCE_PROBE && (accepted as f64) < MIN_ACCEPTANCE * attempts as f64 {
            return Err(FlozError::Geometry(format!(
                "box rejection accepted {accepted} of {attempts} draws; widen the prior box to overlap the bulk of the distribution"
            )));
        }
    }
    Ok((
        out,
        SamplerReport {
            acceptance: accepted as f64 / attempts as f64,
            thinning: 1,
        },
    ))
}

/// Inverse-CDF draws of the truncated exponential on each `[l, u]`.
fn exponential(spec: &BenchmarkSpec, rates: &[f64], rng: &mut ChaCha8Rng) -> Mat {
    let (lo, hi) = (&spec.prior.lower, &spec.prior.upper);
    let mut out = Mat::zeros(spec.n_samples, spec.d);
    for r in 0..spec.n_samples {
        for j in 0..spec.d {
            let u: f64 = rng.random();
            let span = (-rates[j] * (hi[j] - lo[j])).exp_m1();
            let v = lo[j] - (u * span).ln_1p() / rates[j];
            out.set(r, j, v.clamp(lo[j], hi[j]));
        }
    }
    out
}

/// `u_0 = x_0`, `u_j = x_j − x_{j−1}²`. Unit Jacobian, so a symmetric walk
/// in `u` is a symmetric proposal in `x`.
fn to_banana(x: &[f64], u: &mut [f64]) {
    u[0] = x[0];
    for j in 1..x.len() {
        u[j] = x[j] - x[j - 1] * x[j - 1];
    }
}

fn from_banana(u: &[f64], x: &mut [f64]) {
    x[0] = u[0];
    for j in 1..u.len() {
        x[j] = u[j] + x[j - 1] * x[j - 1];
    }
}

/// Random-walk Metropolis in the banana coordinates above. The step scales
/// adapt during burn-in toward 25% acceptance and are then frozen.
fn rosenbrock_metropolis(
    spec: &BenchmarkSpec,
    dens: &super::Density,
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, SamplerReport)> {
    let d = spec.d;
    let thin = (10 * d).max(50);
    let (lo, hi) = (&spec.prior.lower, &spec.prior.upper);

    let mut x: Vec<f64> = vec![1.0; d];
    if !dens.in_box(&x) {
        x = lo.iter().zip(hi).map(|(l, u)| 0.5 * (l + u)).collect();
    }
    let mut lp = dens.log_p_hat(&x);
    if lp == f64::NEG_INFINITY {
        return Err(FlozError::Geometry("no starting point with positive density".into()));
    }
    let mut u = vec![0.0; d];
    to_banana(&x, &mut u);

    let mut log_scale = (2.38 / (d as f64).sqrt()).ln();
    let mut step = vec![1.0; d];
    let mut mean = u.clone();
    let mut m2 = vec![0.0; d];
    let mut cand_u = vec![0.0; d];
    let mut cand_x = vec![0.0; d];

    let mut step_chain = |u: &mut Vec<f64>, x: &mut Vec<f64>, lp: &mut f64, scale: f64, step: &[f64], rng: &mut ChaCha8Rng| {
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            cand_u[j] = u[j] + scale * step[j] * e;
        }
        from_banana(&cand_u, &mut cand_x);
        let cand_lp = dens.log_p_hat(&cand_x);
        let accept = cand_lp > f64::NEG_INFINITY && {
            let r: f64 = rng.random();
            r.ln() < cand_lp - *lp
        };
        if accept {
            u.copy_from_slice(&cand_u);
            x.copy_from_slice(&cand_x);
            *lp = cand_lp;
        }
        accept
    };

    for t in 1..=BURN_IN {
        let acc = step_chain(&mut u, &mut x, &mut lp, log_scale.exp(), &step, rng);
        log_scale += (f64::from(u8::from(acc)) - TARGET_ACCEPTANCE) / (t as f64).powf(0.6);
        for j in 0..d {
            let delta = u[j] - mean[j];
            mean[j] += delta / (t + 1) as f64;
            m2[j] += delta * (u[j] - mean[j]);
        }
        if t >= 1000 && t % 100 == 0 {
            for j in 0..d {
                step[j] = (m2[j] / t as f64).sqrt().max(1e-8);
            }
        }
    }

    let scale = log_scale.exp();
    let mut out = Mat::zeros(spec.n_samples, d);
    let mut accepted = 0usize;
    for r in 0..spec.n_samples {
        for _ in 0..thin {
            accepted += usize::from(step_chain(&mut u, &mut x, &mut lp, scale, &step, rng));
        }
        out.row_slice_mut(r).copy_from_slice(&x);
    }
    Ok((
        out,
        SamplerReport {
            acceptance: accepted as f64 / (spec.n_samples * thin) as f64,
            thinning: thin,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banana_map_round_trips() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let mut u = [0.0; 4];
        let mut back = [0.0; 4];
        to_banana(&x, &mut u);
        from_banana(&u, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let s = BenchmarkSpec::paper_mixture_2d(500, 11);
        assert_eq!(draw_samples(&s).unwrap(), draw_samples(&s).unwrap());
    }

    #[test]
    fn too_few_samples_rejected() {
        let s = BenchmarkSpec::paper_gaussian_2d(10, 0);
        assert!(draw_samples(&s).is_err());
    }

    #[test]
    fn far_box_is_geometry_error() {
        let mut s = BenchmarkSpec::paper_gaussian_2d(200, 0);
        s.prior.lower = vec![200.0, 200.0];
        s.prior.upper = vec![210.0, 210.0];
        let err = draw_samples(&s).unwrap_err();
        assert!(matches!(err, FlozError::Geometry(_)));
    }

    #[test]
    fn exponential_stays_in_box() {
        let s = BenchmarkSpec::paper_exponential_2d(1000, 2, true);
        let set = draw_samples(&s).unwrap();
        assert!(set.params().as_slice().iter().all(|v| (0.0..=3000.0).contains(v)));
    }
}
