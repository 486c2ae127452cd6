use floz_core::benchmarks::{
    closed_form_log_evidence, draw_samples, draw_samples_with_report, mc_oracle_log_evidence,
    quadrature_log_evidence, BenchmarkSpec, Family,
};
use floz_core::sampleio::{PriorBox, SharpEdge, Side};

const MC_DRAWS: usize = 4_000_000;
/// Rounding allowance for two deterministic oracles whose error estimates
/// can underflow to zero.
const NUMERIC_FLOOR: f64 = 1e-10;

fn one_d(family: Family, lower: f64, upper: f64) -> BenchmarkSpec {
    BenchmarkSpec {
        family,
        d: 1,
        prior: PriorBox {
            lower: vec![lower],
            upper: vec![upper],
        },
        n_samples: 2000,
        seed: 4,
        sharp_edges: Vec::new(),
    }
}

fn all_low_dim_specs() -> Vec<(&'static str, BenchmarkSpec)> {
    let mut corner = BenchmarkSpec::paper_gaussian_2d(2000, 3);
    corner.family = Family::Gaussian {
        mean: vec![2.0, 1.0],
        cov: vec![vec![4.0, 0.0], vec![0.0, 9.0]],
    };
    corner.prior = PriorBox {
        lower: vec![0.0, 0.0],
        upper: vec![10.0, 20.0],
    };
    vec![
        ("gaussian 2d", BenchmarkSpec::paper_gaussian_2d(2000, 1)),
        ("mixture 2d", BenchmarkSpec::paper_mixture_2d(2000, 1)),
        ("exponential 2d", BenchmarkSpec::paper_exponential_2d(2000, 1, true)),
        ("rosenbrock 2d", BenchmarkSpec::paper_rosenbrock(2, 2000, 1)),
        ("truncated diagonal gaussian 2d", corner),
        (
            "gaussian 1d",
            one_d(
                Family::Gaussian {
                    mean: vec![1.0],
                    cov: vec![vec![4.0]],
                },
                0.0,
                5.0,
            ),
        ),
        (
            "mixture 1d",
            one_d(
                Family::GaussianMixture5 {
                    means: vec![vec![-4.0], vec![-1.0], vec![0.5], vec![3.0], vec![6.0]],
                    covs: vec![vec![vec![1.0]], vec![vec![0.3]], vec![vec![2.0]], vec![vec![0.5]], vec![vec![4.0]]],
                },
                -8.0,
                9.0,
            ),
        ),
        (
            "exponential 1d",
            one_d(Family::Exponential { rates: vec![0.7] }, 0.0, 4.0),
        ),
    ]
}

#[test]
fn closed_form_quadrature_and_monte_carlo_agree() {
    for (name, spec) in all_low_dim_specs() {
        let q = quadrature_log_evidence(&spec).unwrap();
        let (q_lz, q_err) = (q.log_z.unwrap(), q.oracle_error.unwrap());
        let mc = mc_oracle_log_evidence(&spec, MC_DRAWS, 99).unwrap();
        let (mc_lz, mc_err) = (mc.log_z.unwrap(), mc.oracle_error.unwrap());
        assert!(mc_err > 0.0 && mc_err < 0.05, "{name}: MC relative error {mc_err}");

        let se = (q_err * q_err + mc_err * mc_err).sqrt();
        assert!(
            (q_lz - mc_lz).abs() <= 3.0 * se,
            "{name}: quadrature {q_lz} vs Monte Carlo {mc_lz} ± {mc_err}"
        );
        if let Some(cf) = closed_form_log_evidence(&spec).unwrap() {
            assert!(
                (cf - q_lz).abs() <= 3.0 * q_err + NUMERIC_FLOOR,
                "{name}: closed form {cf} vs quadrature {q_lz} ± {q_err}"
            );
            assert!(
                (cf - mc_lz).abs() <= 3.0 * mc_err,
                "{name}: closed form {cf} vs Monte Carlo {mc_lz} ± {mc_err}"
            );
        }
    }
}

#[test]
fn closed_forms_exist_for_separable_specs() {
    let specs = all_low_dim_specs();
    let has: Vec<bool> = specs
        .iter()
        .map(|(_, s)| closed_form_log_evidence(s).unwrap().is_some())
        .collect();
    // correlated gaussian/mixture and rosenbrock need quadrature
    assert_eq!(has, [false, false, true, false, true, true, true, true]);
}

/// Independent evaluation of each family's kernel from its definition.
fn reference_log_p(spec: &BenchmarkSpec, x: &[f64]) -> f64 {
    let quad = |m: &[f64], c: &[Vec<f64>]| -> f64 {
        match m.len() {
            1 => -0.5 * (x[0] - m[0]).powi(2) / c[0][0],
            2 => {
                let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
                let det = a * d - b * b;
                let (u, v) = (x[0] - m[0], x[1] - m[1]);
                -0.5 * (d * u * u - 2.0 * b * u * v + a * v * v) / det
            }
            _ => unreachable!(),
        }
    };
    match &spec.family {
        Family::Gaussian { mean, cov } => quad(mean, cov),
        Family::GaussianMixture5 { means, covs } => {
            let s: f64 = means.iter().zip(covs).map(|(m, c)| quad(m, c).exp()).sum();
            (s / 5.0).ln()
        }
        Family::Exponential { rates } => -rates.iter().zip(x).map(|(l, v)| l * v).sum::<f64>(),
        Family::Rosenbrock { a, b } => {
            -(a * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)) / b
        }
    }
}

#[test]
fn stored_log_p_matches_recomputation() {
    for (name, spec) in all_low_dim_specs() {
        let set = draw_samples(&spec).unwrap();
        assert_eq!(set.len(), spec.n_samples);
        for i in 0..set.len() {
            let x = set.row(i);
            for j in 0..spec.d {
                assert!(x[j] >= spec.prior.lower[j] && x[j] <= spec.prior.upper[j], "{name}: {x:?}");
            }
            let want = reference_log_p(&spec, x);
            let got = set.log_p_hat()[i];
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "{name}: stored {got} vs {want} at {x:?}"
            );
        }
    }
}

#[test]
fn exponential_marginals_pass_ks() {
    let spec = BenchmarkSpec::paper_exponential_2d(5000, 17, false);
    let set = draw_samples(&spec).unwrap();
    let Family::Exponential { rates } = &spec.family else { unreachable!() };
    let n = set.len() as f64;
    for (j, &rate) in rates.iter().enumerate() {
        let mut xs: Vec<f64> = (0..set.len()).map(|i| set.row(i)[j]).collect();
        xs.sort_by(f64::total_cmp);
        let top = 1.0 - (-rate * spec.prior.upper[j]).exp();
        let d_stat = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cdf = (1.0 - (-rate * x).exp()) / top;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value
        assert!(d_stat < 1.63 / n.sqrt(), "dim {j}: KS statistic {d_stat}");
    }
}

#[test]
fn wide_box_gaussian_has_the_right_mean() {
    let spec = BenchmarkSpec::diagonal_gaussian(3, 20_000, 5);
    let set = draw_samples(&spec).unwrap();
    let Family::Gaussian { mean, cov } = &spec.family else { unreachable!() };
    let n = set.len() as f64;
    for j in 0..3 {
        let m = (0..set.len()).map(|i| set.row(i)[j]).sum::<f64>() / n;
        let se = (cov[j][j] / n).sqrt();
        assert!((m - mean[j]).abs() < 4.0 * se, "dim {j}: mean {m} vs {}", mean[j]);
    }
}

fn column_mean_and_se(set: &floz_core::sampleio::SampleSet, j: usize) -> (f64, f64) {
    let n = set.len() as f64;
    let xs: Vec<f64> = (0..set.len()).map(|i| set.row(i)[j]).collect();
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn rosenbrock_chains_adapt_and_agree_across_seeds() {
    for d in [2, 5] {
        let a = draw_samples_with_report(&BenchmarkSpec::paper_rosenbrock(d, 4000, 1)).unwrap();
        let b = draw_samples_with_report(&BenchmarkSpec::paper_rosenbrock(d, 4000, 2)).unwrap();
        for (_, rep) in [&a, &b] {
            assert!(
                (0.15..=0.40).contains(&rep.acceptance),
                "d = {d}: acceptance {}",
                rep.acceptance
            );
            assert!(rep.thinning >= 50);
        }
        let (ma, sa) = column_mean_and_se(&a.0, 0);
        let (mb, sb) = column_mean_and_se(&b.0, 0);
        let combined = (sa * sa + sb * sb).sqrt();
        assert!(
            (ma - mb).abs() < 3.0 * combined,
            "d = {d}: x0 means {ma} and {mb}, combined se {combined}"
        );
    }
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let spec = BenchmarkSpec::paper_mixture_2d(500, 8);
    let a = draw_samples(&spec).unwrap();
    let b = draw_samples(&spec).unwrap();
    assert_eq!(a.params().as_slice(), b.params().as_slice());
    let mut other = spec.clone();
    other.seed = 9;
    assert_ne!(draw_samples(&other).unwrap().params().as_slice(), a.params().as_slice());
}

#[test]
fn sharp_edges_do_not_change_the_truth() {
    let mut a = BenchmarkSpec::paper_exponential_2d(500, 1, true);
    let b = BenchmarkSpec::paper_exponential_2d(500, 1, false);
    assert_eq!(
        closed_form_log_evidence(&a).unwrap(),
        closed_form_log_evidence(&b).unwrap()
    );
    a.sharp_edges.push(SharpEdge { dim: 0, side: Side::Upper });
    assert_eq!(a.metadata().unwrap().sharp_edges.len(), 3);
}
