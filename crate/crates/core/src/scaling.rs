//! Computational-cost scaling of the robust update on the hanging chain.
//!
//! For every chain size the nominal SQP and the zoRO-SQP are solved from
//! the same initial guess. Per-iteration times are averaged over the SQP
//! iterations of a run, and each quantity keeps its minimum over repeats.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::Mat;
use crate::model::ChainParams;
use crate::ocp::{build_chain_ocp, ChainOcpOptions};
use crate::sqp::{sqp_solve, SolveReport, SolveStatus, SqpSettings};
use crate::zoro::{zoro_sqp, ZoroConfig, ZoroStatus};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSettings {
    pub n_masses: Vec<usize>,
    pub chain: ChainOcpOptions,
    pub params: ChainParams,
    /// Standard deviation of the additive noise on every state.
    pub noise_std: f64,
    pub gamma: f64,
    pub repeats: usize,
}

impl Default for ScalingSettings {
    fn default() -> Self {
        Self {
            n_masses: vec![3, 4, 5, 6],
            chain: ChainOcpOptions::default(),
            params: ChainParams::default(),
            noise_std: 1e-3,
            gamma: 1.0,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_mass: usize,
    pub nx: usize,
    pub nominal_iterations: usize,
    pub zoro_iterations: usize,
    /// Mean per-iteration time of the nominal SQP.
    pub nominal_iter_ns: f64,
    /// Mean per-iteration time of the zoRO-SQP, propagation included.
    pub zoro_iter_ns: f64,
    /// Mean per-iteration propagation and backoff time.
    pub propagation_iter_ns: f64,
    /// `zoro_iter_ns - propagation_iter_ns`.
    pub remainder_iter_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFailure {
    pub n_mass: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `log(propagation_iter_ns)` against `log(nx)`;
    /// `None` with fewer than two distinct sizes.
    pub propagation_slope: Option<f64>,
    pub note: Option<String>,
    pub failures: Vec<ScalingFailure>,
    /// Set when any size failed to solve.
    pub partial: bool,
}

impl ScalingReport {
    /// Largest `zoro_iter_ns / nominal_iter_ns` over all sizes.
    pub fn max_overhead_ratio(&self) -> Option<f64> {
        self.points.iter().map(|p| p.zoro_iter_ns / p.nominal_iter_ns).reduce(f64::max)
    }
}

/// Robust setting for the chain: `W = noise_std^2 I`, `P0_bar = 0`, `G = I`,
/// no feedback.
pub fn chain_zoro_config(spec: &crate::ocp::OcpSpec, noise_std: f64, gamma: f64) -> ZoroConfig {
    let nx = spec.nx();
    ZoroConfig {
        w: Mat::identity(nx, nx) * noise_std * noise_std,
        gamma,
        ..ZoroConfig::zero(spec)
    }
}

fn per_iteration(report: &SolveReport) -> (f64, f64) {
    let n = report.logs.len().max(1) as f64;
    let solver: u64 = report.logs.iter().map(|l| l.timings.prepare_ns + l.timings.feedback_ns).sum();
    let hook: u64 = report.logs.iter().map(|l| l.hook_ns).sum();
    (solver as f64 / n, hook as f64 / n)
}

fn measure(n_mass: usize, settings: &ScalingSettings) -> Result<ScalingPoint> {
    let spec = build_chain_ocp(n_mass, settings.params, &settings.chain)?;
    let cfg = chain_zoro_config(&spec, settings.noise_std, settings.gamma);
    let sqp = SqpSettings::default();
    let runs = (0..settings.repeats.max(1))
        .into_par_iter()
        .map(|_| -> Result<ScalingPoint> {
            let (_, nominal) = sqp_solve(&spec, None, &sqp, None)?;
            if nominal.status != SolveStatus::Converged {
                return Err(Error::Solver(format!("nominal SQP: {:?}", nominal.status)));
            }
            let robust = zoro_sqp(&spec, &cfg, None, &sqp)?;
            if robust.status != ZoroStatus::Converged {
                return Err(Error::Solver(format!("zoRO-SQP: {:?}", robust.status)));
            }
            let (nominal_iter_ns, _) = per_iteration(&nominal);
            let rep = SolveReport {
                status: SolveStatus::Converged,
                iterations: robust.iterations,
                logs: robust.logs,
                history: vec![],
            };
            let (solver_ns, propagation_iter_ns) = per_iteration(&rep);
            Ok(ScalingPoint {
                n_mass,
                nx: spec.nx(),
                nominal_iterations: nominal.iterations,
                zoro_iterations: robust.iterations,
                nominal_iter_ns,
                zoro_iter_ns: solver_ns + propagation_iter_ns,
                propagation_iter_ns,
                remainder_iter_ns: solver_ns,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = runs[0].clone();
    for r in &runs[1..] {
        best.nominal_iter_ns = best.nominal_iter_ns.min(r.nominal_iter_ns);
        best.propagation_iter_ns = best.propagation_iter_ns.min(r.propagation_iter_ns);
        best.remainder_iter_ns = best.remainder_iter_ns.min(r.remainder_iter_ns);
        best.zoro_iter_ns = best.zoro_iter_ns.min(r.zoro_iter_ns);
    }
    Ok(best)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if pts.len() < 2 || sxx <= 0.0 || !pts.iter().all(|p| p.0.is_finite() && p.1.is_finite()) {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

pub fn run_scaling(settings: &ScalingSettings) -> Result<ScalingReport> {
    if settings.n_masses.is_empty() {
        return Err(Error::Config("scaling.n_masses must not be empty".into()));
    }
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &n_mass in &settings.n_masses {
        match measure(n_mass, settings) {
            Ok(p) => points.push(p),
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => failures.push(ScalingFailure {
                n_mass,
                reason: e.to_string(),
            }),
        }
    }
    let nx: Vec<f64> = points.iter().map(|p| p.nx as f64).collect();
    let prop: Vec<f64> = points.iter().map(|p| p.propagation_iter_ns).collect();
    let propagation_slope = log_log_slope(&nx, &prop);
    let note = propagation_slope
        .is_none()
        .then(|| format!("slope undefined: {} usable size(s), at least 2 needed", points.len()));
    Ok(ScalingReport {
        points,
        propagation_slope,
        note,
        partial: !failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [3.0, 5.0, 9.0, 17.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 2.5 * v.powi(3)).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&x[..1], &y[..1]), None);
        assert_eq!(log_log_slope(&[2.0, 2.0], &[1.0, 3.0]), None);
    }

    #[test]
    fn single_size_reports_missing_slope() {
        let settings = ScalingSettings {
            n_masses: vec![3],
            repeats: 1,
            ..Default::default()
        };
        let rep = run_scaling(&settings).unwrap();
        assert_eq!(rep.points.len(), 1, "{:?}", rep.failures);
        assert!(rep.propagation_slope.is_none());
        assert!(rep.note.unwrap().contains("at least 2"));
    }
}
