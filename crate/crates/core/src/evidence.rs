//! Evidence from a trained flow: average `log ζ` over samples whose latent
//! image lies in the ball `‖y‖ < δ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkernel::Mat;
use crate::error::{FlozError, Result};
use crate::flow::{latent_log_density, FlowModel};
use crate::sampleio::SampleSet;

/// Minimum number of samples inside the ball.
pub const MIN_BALL_MEMBERS: usize = 10;

const CHUNK_ROWS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub log_z: f64,
    pub uncertainty: f64,
    pub n_in_ball: usize,
    /// Set when the two estimates differ by more than twice the training
    /// uncertainty.
    pub overfit_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub log_zeta_min: f64,
    pub log_zeta_median: f64,
    pub log_zeta_max: f64,
    /// `log mean ζ` over the ball.
    pub log_mean_exp: f64,
    pub validation: Option<ValidationCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceEstimate {
    pub log_z: f64,
    /// Population standard deviation of `log ζ` in the ball.
    pub uncertainty: f64,
    pub n_in_ball: usize,
    pub n_total: usize,
    pub delta: f64,
    pub diagnostics: Diagnostics,
}

/// Latent radius² and `log ζ` per sample.
pub fn latent_radius_and_log_zeta(model: &FlowModel, set: &SampleSet) -> Result<Vec<(f64, f64)>> {
    if set.dim() != model.dim() {
        return Err(FlozError::Precondition(format!(
            "flow dimension {} does not match sample dimension {}",
            model.dim(),
            set.dim()
        )));
    }
    let n = set.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let chunks: Vec<Vec<(f64, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK_ROWS).min(n);
            let idx: Vec<usize> = (s..e).collect();
            let x: Mat = set.params().select_rows(&idx);
            let (y, log_det) = model.inverse_map(&x)?;
            let log_q = latent_log_density(&y, &log_det);
            Ok((0..y.rows())
                .map(|r| {
                    let r2 = y.row_slice(r).iter().map(|v| v * v).sum::<f64>();
                    (r2, set.log_p_hat()[s + r] - log_q[r])
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn ball_values(model: &FlowModel, set: &SampleSet, delta: f64) -> Result<Vec<f64>> {
    let d2 = delta * delta;
    Ok(latent_radius_and_log_zeta(model, set)?
        .into_iter()
        .filter(|(r2, _)| *r2 < d2)
        .map(|(_, lz)| lz)
        .collect())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// `delta` defaults to `√d`.
pub fn estimate_evidence(
    model: &FlowModel,
    set: &SampleSet,
    delta: Option<f64>,
) -> Result<EvidenceEstimate> {
    let delta = delta.unwrap_or((model.dim() as f64).sqrt());
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(FlozError::Configuration(format!(
            "ball radius must be positive, got {delta}"
        )));
    }
    let mut inside = ball_values(model, set, delta)?;
    let n_total = set.len();
    if inside.len() < MIN_BALL_MEMBERS {
        return Err(FlozError::InsufficientCoverage {
            n_in_ball: inside.len(),
            n_total,
            fraction: inside.len() as f64 / n_total as f64,
            required: MIN_BALL_MEMBERS,
        });
    }
    let (log_z, uncertainty) = mean_std(&inside);
    let lme = log_mean_exp(&inside);
    inside.sort_by(f64::total_cmp);
    Ok(EvidenceEstimate {
        log_z,
        uncertainty,
        n_in_ball: inside.len(),
        n_total,
        delta,
        diagnostics: Diagnostics {
            log_zeta_min: inside[0],
            log_zeta_median: median(&inside),
            log_zeta_max: inside[inside.len() - 1],
            log_mean_exp: lme,
            validation: None,
        },
    })
}

/// Repeats the estimate on held-out samples and records it in the
/// diagnostics. Too few held-out ball members leave the diagnostic empty.
pub fn attach_validation_check(
    estimate: &mut EvidenceEstimate,
    model: &FlowModel,
    val_set: &SampleSet,
) -> Result<()> {
    let inside = ball_values(model, val_set, estimate.delta)?;
    if inside.len() < MIN_BALL_MEMBERS {
        estimate.diagnostics.validation = None;
        return Ok(());
    }
    let (log_z, uncertainty) = mean_std(&inside);
    estimate.diagnostics.validation = Some(ValidationCheck {
        log_z,
        uncertainty,
        n_in_ball: inside.len(),
        overfit_flag: (log_z - estimate.log_z).abs() > 2.0 * estimate.uncertainty,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn gaussian_set(n: usize, log_c: f64) -> SampleSet {
        // deterministic quasi-grid points around the origin
        let mut x = Mat::zeros(n, 2);
        for r in 0..n {
            let t = r as f64 / n as f64;
            x.set(r, 0, (t * 17.0).sin() * 1.5);
            x.set(r, 1, (t * 29.0).cos() * 1.5);
        }
        let lp = (0..n)
            .map(|r| {
                log_c - 0.5 * x.row_slice(r).iter().map(|v| v * v).sum::<f64>()
                    - (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        SampleSet::unnamed(x, lp).unwrap()
    }

    #[test]
    fn exact_flow_recovers_normalization() {
        let m = FlowModel::new(2, FlowConfig::default_for(2)).unwrap();
        let est = estimate_evidence(&m, &gaussian_set(200, 1.7), None).unwrap();
        assert!((est.log_z - 1.7).abs() < 1e-12);
        assert!(est.uncertainty < 1e-12);
        assert!((est.diagnostics.log_mean_exp - 1.7).abs() < 1e-12);
        assert_eq!(est.delta, 2f64.sqrt());
    }

    #[test]
    fn too_few_ball_members_is_coverage_error() {
        let m = FlowModel::new(2, FlowConfig::default_for(2)).unwrap();
        let err = estimate_evidence(&m, &gaussian_set(200, 0.0), Some(1e-3)).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&[1.0, 2.0, 4.0, 8.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 4.0]), 2.0);
    }
}
