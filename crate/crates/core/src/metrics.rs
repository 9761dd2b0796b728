//! Speed-up ratios, the final-gradient-norm metric R1 and its upper bound.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothness constant `S = (3/2 + lambda) d^2` of the MSE loss.
pub fn smoothness(d: usize, lambda: f64) -> f64 {
    (1.5 + lambda) * (d * d) as f64
}

/// Lipschitz constant `G = d (1 + 3 pi lambda)`.
pub fn lipschitz(d: usize, lambda: f64) -> f64 {
    d as f64 * (1.0 + 3.0 * PI * lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub d: usize,
    pub lambda: f64,
    /// Measurement shots per expectation.
    pub shots: u64,
    /// Training-set size.
    pub n_data: usize,
    pub iterations: u64,
    /// Largest merged depolarizing probability over the nodes.
    pub p_max: f64,
}

impl TheoryParams {
    pub fn smoothness(&self) -> f64 {
        smoothness(self.d, self.lambda)
    }

    pub fn lipschitz(&self) -> f64 {
        lipschitz(self.d, self.lambda)
    }
}

/// The three additive terms of the R1 upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub optimization: f64,
    pub noise: f64,
    pub sampling: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.optimization + self.noise + self.sampling
    }
}

pub fn r1_bound_terms(p: &TheoryParams) -> Result<BoundTerms> {
    if !(0.0..1.0).contains(&p.p_max) || p.iterations < 1 || p.shots < 1 || p.n_data < 1 {
        return Err(Error::BoundUndefined);
    }
    let d = p.d as f64;
    let lam = p.lambda;
    let q = p.p_max;
    let k = p.shots as f64;
    let damp = (1.0 - q).powi(2);
    Ok(BoundTerms {
        optimization: (1.0 + 9.0 * PI * PI * lam * d) / (2.0 * p.iterations as f64 * damp),
        noise: (2.0 * p.lipschitz() + d) * (2.0 - q) * q * (1.0 + 10.0 * lam).powi(2) / damp,
        sampling: (2.0 * d * k + d) / (2.0 * p.n_data as f64 * k * k * damp),
    })
}

pub fn r1_upper_bound(p: &TheoryParams) -> Result<f64> {
    Ok(r1_bound_terms(p)?.total())
}

/// Mean squared norm of the final gradient over runs.
pub fn r1_metric(final_gradients: &[Vec<f64>]) -> Result<f64> {
    if final_gradients.is_empty() {
        return Err(Error::Metric("R1 needs at least one run".into()));
    }
    let total: f64 = final_gradients
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    Ok(total / final_gradients.len() as f64)
}

pub fn ideal_speedup(d: usize, m: usize) -> f64 {
    let d = d as f64;
    (1.0 + 2.0 * d) / (1.0 + 2.0 * d / m as f64)
}

/// Summary of one run as far as the speed-up and R1 are concerned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iterations: u64,
    pub converged: bool,
    /// Gradient-estimation circuits executed.
    pub circuits: u64,
    /// Squared norm of the aggregated gradient per iteration.
    pub grad_norm_sqr: Vec<f64>,
}

impl ConvergenceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.grad_norm_sqr.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Metric("gradient history has invalid entries".into()));
        }
        Ok(())
    }
}

/// `(1+2d) N_1 / ((1+2d/M) N_M)`.
pub fn measured_speedup(single: &ConvergenceRecord, multi: &ConvergenceRecord, d: usize, m: usize) -> Result<f64> {
    if !single.converged || !multi.converged {
        return Err(Error::SpeedupUndefined("both runs must converge".into()));
    }
    speedup_from_iterations(single.iterations as f64, multi.iterations as f64, d, m)
}

/// Speed-up from (mean) iteration counts.
pub fn speedup_from_iterations(n_single: f64, n_multi: f64, d: usize, m: usize) -> Result<f64> {
    if !(n_single > 0.0 && n_multi > 0.0) {
        return Err(Error::SpeedupUndefined(format!("iteration counts {n_single} and {n_multi}")));
    }
    Ok(ideal_speedup(d, m) * n_single / n_multi)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    match mean(xs) {
        Some(mu) if xs.len() > 1 => xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64,
        _ => 0.0,
    }
}

/// Kendall's tau-b between two equally long samples.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Metric("kendall tau needs two equal samples of size >= 2".into()));
    }
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + ties_x) as f64;
    let n1 = (concordant + discordant + ties_y) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Metric("kendall tau undefined for constant input".into()));
    }
    Ok((concordant - discordant) as f64 / (n0 * n1).sqrt())
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T], header: &[&str]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.serialize(row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn constants() {
        assert_eq!(smoothness(8, 0.0), 96.0);
        assert_eq!(smoothness(8, 0.5), 128.0);
        assert_eq!(lipschitz(8, 0.0), 8.0);
        assert_abs_diff_eq!(lipschitz(8, 0.1), 8.0 * (1.0 + 0.3 * PI), epsilon = 1e-14);
    }

    #[test]
    fn ideal_values() {
        assert_eq!(ideal_speedup(8, 1), 1.0);
        assert_eq!(ideal_speedup(8, 2), 17.0 / 9.0);
        assert_eq!(ideal_speedup(8, 4), 3.4);
        assert_eq!(ideal_speedup(8, 8), 17.0 / 3.0);
        for m in 1..64 {
            assert!(ideal_speedup(8, m + 1) > ideal_speedup(8, m));
            assert!(ideal_speedup(8, m) < 17.0);
        }
    }

    fn record(iterations: u64, converged: bool) -> ConvergenceRecord {
        ConvergenceRecord {
            iterations,
            converged,
            circuits: 0,
            grad_norm_sqr: vec![],
        }
    }

    #[test]
    fn measured_values() {
        let a = record(100, true);
        assert_eq!(measured_speedup(&a, &a, 8, 4).unwrap(), ideal_speedup(8, 4));
        assert_abs_diff_eq!(measured_speedup(&a, &record(200, true), 8, 4).unwrap(), 1.7, epsilon = 1e-15);
        assert!(matches!(
            measured_speedup(&a, &record(200, false), 8, 4),
            Err(Error::SpeedupUndefined(_))
        ));
    }

    #[test]
    fn r1_values() {
        assert_eq!(r1_metric(&[vec![0.0; 8]]).unwrap(), 0.0);
        assert_eq!(r1_metric(&[vec![3.0, 4.0, 0.0]]).unwrap(), 25.0);
        assert!(matches!(r1_metric(&[]), Err(Error::Metric(_))));
    }

    fn params(p_max: f64, iterations: u64, shots: u64) -> TheoryParams {
        TheoryParams {
            d: 8,
            lambda: 0.0,
            shots,
            n_data: 75,
            iterations,
            p_max,
        }
    }

    #[test]
    fn bound_terms() {
        let t = r1_bound_terms(&params(0.0, 100, 8192)).unwrap();
        assert_eq!(t.optimization, 0.005);
        assert_eq!(t.noise, 0.0);
        assert_abs_diff_eq!(t.sampling, 131_080.0 / (150.0 * 8192.0 * 8192.0), epsilon = 1e-18);
        assert!(r1_upper_bound(&params(0.0, u64::MAX, u64::MAX / 4)).unwrap() < 1e-15);
        assert!(matches!(r1_upper_bound(&params(1.0, 100, 8192)), Err(Error::BoundUndefined)));
        assert!(matches!(r1_upper_bound(&params(0.1, 0, 8192)), Err(Error::BoundUndefined)));
    }

    #[test]
    fn bound_monotone_in_noise() {
        for t in [10, 100, 1000] {
            for k in [256, 8192] {
                let mut last = 0.0;
                for i in 0..99 {
                    let b = r1_upper_bound(&params(i as f64 / 100.0, t, k)).unwrap();
                    assert!(b > last);
                    last = b;
                }
            }
        }
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_abs_diff_eq!(kendall_tau(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 4.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn csv_writes_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &[(1, 2.5)], &["a", "b"]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2.5\n");
    }

    proptest! {
        #[test]
        fn r1_nonnegative(gs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 8), 1..10)) {
            prop_assert!(r1_metric(&gs).unwrap() >= 0.0);
        }
    }
}
