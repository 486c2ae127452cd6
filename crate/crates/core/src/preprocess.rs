//! Evidence-preserving preprocessing.
//!
//! Every transform rewrites the per-sample `log_p_hat` so that the integral of
//! the transformed unnormalized density equals the original evidence. The
//! constants applied are kept in a [`TransformLedger`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::Mat;
use crate::error::{FlozError, Result};
use crate::sampleio::{PriorMetadata, SampleSet, Side};

/// Smallest admissible ratio between the extreme covariance eigenvalues.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformLedger {
    /// Applied transforms in order, e.g. `["reflect", "wrap", "whiten"]`.
    pub steps: Vec<String>,
    pub mean: Vec<f64>,
    /// Column `k` is the eigenvector belonging to `eigvals[k]`.
    pub eigvecs: Mat,
    pub eigvals: Vec<f64>,
    pub n_reflected_edges: usize,
    /// Total shift added to every `log_p_hat`, in nats.
    pub log_jacobian_total: f64,
}

impl TransformLedger {
    pub fn identity(d: usize) -> Self {
        let mut eigvecs = Mat::zeros(d, d);
        for k in 0..d {
            eigvecs.set(k, k, 1.0);
        }
        TransformLedger {
            steps: Vec::new(),
            mean: vec![0.0; d],
            eigvecs,
            eigvals: vec![1.0; d],
            n_reflected_edges: 0,
            log_jacobian_total: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Shift contributed by whitening: `½ Σ log λ`.
    pub fn whitening_log_jacobian(&self) -> f64 {
        0.5 * self.eigvals.iter().map(|l| l.ln()).sum::<f64>()
    }

    /// Shift contributed by sharp-edge reflection: `−n log 2`.
    pub fn reflection_log_jacobian(&self) -> f64 {
        -(self.n_reflected_edges as f64) * std::f64::consts::LN_2 + 0.0
    }

    pub fn whiten_point(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|k| {
                let proj: f64 = (0..d).map(|j| (x[j] - self.mean[j]) * self.eigvecs.get(j, k)).sum();
                proj / self.eigvals[k].sqrt()
            })
            .collect()
    }

    /// Inverse of [`TransformLedger::whiten_point`].
    pub fn unwhiten_point(&self, w: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                self.mean[j]
                    + (0..d)
                        .map(|k| self.eigvecs.get(j, k) * self.eigvals[k].sqrt() * w[k])
                        .sum::<f64>()
            })
            .collect()
    }
}

fn column_means(x: &Mat) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row_slice(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Unbiased sample covariance (divisor `N − 1`).
pub fn sample_covariance(x: &Mat) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let mean = column_means(x);
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_slice_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centered.transpose_matmul(&centered);
    let denom = (n - 1) as f64;
    let cov = DMatrix::from_row_slice(d, d, cov.as_slice()).map(|v| v / denom);
    (mean, cov)
}

/// Centers and whitens using the sample covariance of every sample in `set`.
/// Each `log_p_hat` is shifted by `½ Σ log λ` so the evidence is unchanged.
pub fn center_and_whiten(set: &SampleSet) -> Result<(SampleSet, TransformLedger)> {
    let (n, d) = set.params().shape();
    let (mean, cov) = sample_covariance(set.params());
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigvals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let max = eigvals[0];
    let min = eigvals[d - 1];
    if !(max > 0.0) || !(min / max >= RANK_TOLERANCE) {
        return Err(FlozError::DegenerateGeometry {
            ratio: if max > 0.0 { min / max } else { 0.0 },
            threshold: RANK_TOLERANCE,
        });
    }
    let mut eigvecs = Mat::zeros(d, d);
    for (col, &k) in order.iter().enumerate() {
        // fix the sign so the largest component of each eigenvector is positive
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            eigvecs.set(j, col, sign * v[j]);
        }
    }

    let mut centered = set.params().clone();
    for i in 0..n {
        for (v, m) in centered.row_slice_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut white = centered.matmul(&eigvecs);
    let inv_sqrt: Vec<f64> = eigvals.iter().map(|l| 1.0 / l.sqrt()).collect();
    for i in 0..n {
        for (v, s) in white.row_slice_mut(i).iter_mut().zip(&inv_sqrt) {
            *v *= s;
        }
    }

    let mut ledger = TransformLedger::identity(d);
    ledger.mean = mean;
    ledger.eigvecs = eigvecs;
    ledger.eigvals = eigvals;
    ledger.steps.push("whiten".into());
    let shift = ledger.whitening_log_jacobian();
    ledger.log_jacobian_total = shift;

    let log_p: Vec<f64> = set.log_p_hat().iter().map(|l| l + shift).collect();
    Ok((set.with_values(white, log_p)?, ledger))
}

/// Mirrors a seeded random half of the samples across every declared sharp
/// edge, extends the prior box across that edge and subtracts `log 2` per
/// edge from every `log_p_hat`.
pub fn reflect_sharp_edges(
    set: &SampleSet,
    meta: &PriorMetadata,
    seed: u64,
) -> Result<(SampleSet, PriorMetadata)> {
    for e in &meta.sharp_edges {
        if meta.periodic.iter().any(|p| p.dim == e.dim) {
            return Err(FlozError::Configuration(format!(
                "sharp edge declared on periodic dimension {}",
                e.dim
            )));
        }
        if e.dim >= set.dim() {
            return Err(FlozError::Configuration(format!(
                "sharp edge dimension {} out of range",
                e.dim
            )));
        }
    }
    if meta.sharp_edges.is_empty() {
        return Ok((set.clone(), meta.clone()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = set.params().clone();
    let mut out_meta = meta.clone();
    for e in &meta.sharp_edges {
        let j = e.dim;
        let lo = out_meta.prior.lower[j];
        let hi = out_meta.prior.upper[j];
        let bound = match e.side {
            Side::Lower => lo,
            Side::Upper => hi,
        };
        for i in 0..params.rows() {
            if rng.random_bool(0.5) {
                let x = params.get(i, j);
                params.set(i, j, 2.0 * bound - x);
            }
        }
        match e.side {
            Side::Lower => out_meta.prior.lower[j] = 2.0 * lo - hi,
            Side::Upper => out_meta.prior.upper[j] = 2.0 * hi - lo,
        }
    }
    out_meta.sharp_edges.clear();

    let shift = meta.sharp_edges.len() as f64 * std::f64::consts::LN_2;
    let log_p = set.log_p_hat().iter().map(|l| l - shift).collect();
    Ok((set.with_values(params, log_p)?, out_meta))
}

/// Branch start for one periodic coordinate: the values are mapped into
/// `[cut − period, cut)`, where `cut` is the midpoint of the widest empty
/// arc of the samples on the circle.
fn branch_cut(values: &[f64], period: f64) -> f64 {
    let mut phases: Vec<f64> = values.iter().map(|v| v.rem_euclid(period)).collect();
    phases.sort_by(f64::total_cmp);
    let n = phases.len();
    // wrap-around gap first so ties keep the identity branch
    let mut best_gap = phases[0] + period - phases[n - 1];
    let mut cut = (phases[n - 1] + best_gap / 2.0).rem_euclid(period);
    for w in phases.windows(2) {
        let gap = w[1] - w[0];
        if gap > best_gap {
            best_gap = gap;
            cut = w[0] + gap / 2.0;
        }
    }
    if cut == 0.0 {
        period
    } else {
        cut
    }
}

/// Shifts every periodic coordinate by whole periods so its marginal is a
/// single arc; `log_p_hat` is unchanged (unit Jacobian).
pub fn wrap_periodic(set: &SampleSet, meta: &PriorMetadata) -> Result<SampleSet> {
    if meta.periodic.is_empty() {
        return Ok(set.clone());
    }
    let mut params = set.params().clone();
    for p in &meta.periodic {
        if !(p.period > 0.0) {
            return Err(FlozError::Precondition(format!(
                "period of dimension {} must be positive",
                p.dim
            )));
        }
        let j = p.dim;
        let column: Vec<f64> = (0..params.rows()).map(|i| params.get(i, j)).collect();
        let cut = branch_cut(&column, p.period);
        let start = cut - p.period;
        for (i, &x) in column.iter().enumerate() {
            let k = ((x - start) / p.period).floor();
            let mut y = x - k * p.period;
            // guard rounding at the branch ends
            if y >= cut {
                y -= p.period;
            } else if y < start {
                y += p.period;
            }
            params.set(i, j, y);
        }
    }
    set.with_values(params, set.log_p_hat().to_vec())
}

/// Seeded shuffle split into sizes `⌊fraction·N⌋` and the remainder.
pub fn split_train_validation(set: &SampleSet, fraction: f64, seed: u64) -> Result<(SampleSet, SampleSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(FlozError::Precondition(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = set.len();
    let n_train = (fraction * n as f64 + 1e-9).floor() as usize;
    let n_val = n - n_train;
    if n_train < 2 || n_val < 2 {
        return Err(FlozError::Precondition(format!(
            "split of {n} samples at fraction {fraction} leaves {n_train}/{n_val}; both parts need at least 2"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let train = set.subset(&idx[..n_train])?;
    let val = set.subset(&idx[n_train..])?;
    Ok((train, val))
}

/// Which preprocessing steps to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub reflect_sharp_edges: bool,
    pub wrap_periodic: bool,
    pub whiten: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            reflect_sharp_edges: true,
            wrap_periodic: true,
            whiten: true,
        }
    }
}

/// Runs reflect → wrap → center/whiten and returns the combined ledger.
pub fn preprocess(
    set: &SampleSet,
    meta: &PriorMetadata,
    opts: PreprocessOptions,
    seed: u64,
) -> Result<(SampleSet, TransformLedger)> {
    let d = set.dim();
    let mut steps = Vec::new();
    let mut current = set.clone();
    let mut meta = meta.clone();
    let mut n_edges = 0;
    if opts.reflect_sharp_edges && !meta.sharp_edges.is_empty() {
        n_edges = meta.sharp_edges.len();
        let (s, m) = reflect_sharp_edges(&current, &meta, seed)?;
        current = s;
        meta = m;
        steps.push("reflect".to_string());
    }
    if opts.wrap_periodic && !meta.periodic.is_empty() {
        current = wrap_periodic(&current, &meta)?;
        steps.push("wrap".to_string());
    }
    let mut ledger = if opts.whiten {
        let (s, l) = center_and_whiten(&current)?;
        current = s;
        l
    } else {
        TransformLedger::identity(d)
    };
    steps.extend(ledger.steps.drain(..));
    ledger.steps = steps;
    ledger.n_reflected_edges = n_edges;
    ledger.log_jacobian_total = ledger.whitening_log_jacobian() + ledger.reflection_log_jacobian();
    Ok((current, ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampleio::{default_names, PeriodicDim, SharpEdge};

    fn set_from(rows: &[Vec<f64>]) -> SampleSet {
        let n = rows.len();
        SampleSet::unnamed(Mat::from_rows(rows), vec![-1.0; n]).unwrap()
    }

    #[test]
    fn duplicated_column_is_degenerate() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| {
            let x = (i as f64 * 0.37).sin();
            vec![x, x]
        }).collect();
        let err = center_and_whiten(&set_from(&rows)).unwrap_err();
        assert!(matches!(err, FlozError::DegenerateGeometry { .. }));
    }

    #[test]
    fn zero_edges_is_identity() {
        let set = set_from(&[vec![0.1], vec![0.2], vec![0.3]]);
        let meta = PriorMetadata::new(default_names(1), vec![0.0], vec![1.0]).unwrap();
        let (out, m) = reflect_sharp_edges(&set, &meta, 7).unwrap();
        assert_eq!(out, set);
        assert_eq!(m, meta);
    }

    #[test]
    fn two_edges_shift_by_two_log_two() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![0.01 * i as f64, 0.005 * i as f64]).collect();
        let set = set_from(&rows);
        let mut meta = PriorMetadata::new(default_names(2), vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        meta.sharp_edges = vec![
            SharpEdge { dim: 0, side: Side::Lower },
            SharpEdge { dim: 1, side: Side::Lower },
        ];
        let (out, m) = reflect_sharp_edges(&set, &meta, 3).unwrap();
        for (a, b) in out.log_p_hat().iter().zip(set.log_p_hat()) {
            assert!((a - b + 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((a_volume(&m) - 4.0 * a_volume(&meta)).abs() < 1e-12);
        // roughly half reflected in each dimension
        let neg0 = (0..100).filter(|&i| out.row(i)[0] < 0.0).count();
        assert!(neg0 > 25 && neg0 < 75, "{neg0}");
    }

    fn a_volume(m: &PriorMetadata) -> f64 {
        m.volume()
    }

    #[test]
    fn edge_on_periodic_dim_is_configuration_error() {
        let set = set_from(&[vec![0.1], vec![0.2]]);
        let mut meta = PriorMetadata::new(default_names(1), vec![0.0], vec![1.0]).unwrap();
        meta.periodic = vec![PeriodicDim { dim: 0, period: 1.0 }];
        meta.sharp_edges = vec![SharpEdge { dim: 0, side: Side::Lower }];
        assert!(matches!(
            reflect_sharp_edges(&set, &meta, 0),
            Err(FlozError::Configuration(_))
        ));
    }

    #[test]
    fn wrap_merges_cluster_across_zero() {
        let two_pi = std::f64::consts::TAU;
        let set = set_from(&[vec![0.05], vec![two_pi - 0.05]]);
        let mut meta = PriorMetadata::new(default_names(1), vec![0.0], vec![two_pi]).unwrap();
        meta.periodic = vec![PeriodicDim { dim: 0, period: two_pi }];
        let out = wrap_periodic(&set, &meta).unwrap();
        assert!((out.row(0)[0] - 0.05).abs() < 1e-12);
        assert!((out.row(1)[0] + 0.05).abs() < 1e-12);
        assert_eq!(out.log_p_hat(), set.log_p_hat());
    }

    #[test]
    fn wrap_keeps_central_cluster() {
        let two_pi = std::f64::consts::TAU;
        let set = set_from(&[vec![2.0], vec![3.0], vec![4.0]]);
        let mut meta = PriorMetadata::new(default_names(1), vec![0.0], vec![two_pi]).unwrap();
        meta.periodic = vec![PeriodicDim { dim: 0, period: two_pi }];
        let out = wrap_periodic(&set, &meta).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let set = set_from(&rows);
        let (a, b) = split_train_validation(&set, 0.8, 11).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let (a2, b2) = split_train_validation(&set, 0.8, 11).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn split_too_small_is_rejected() {
        let set = set_from(&[vec![0.0], vec![1.0], vec![2.0]]);
        assert!(matches!(
            split_train_validation(&set, 0.8, 0),
            Err(FlozError::Precondition(_))
        ));
    }
}
