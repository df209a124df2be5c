//! Post-processing of traces: error ratios, orbit distances and regime fits.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{l2_inner, phase_rotate, ComplexField};
use crate::precond::FactorizedMetric;
use crate::riemann::IterTrace;

/// Minimum number of unmasked `Q_E` points.
pub const MIN_RATIO_POINTS: usize = 10;
/// Minimum number of gap points for a regime fit.
pub const LOJA_MIN_POINTS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("only {usable} usable ratio points (need {required})")]
    TooFewPoints { usable: usize, required: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("trace is empty")]
    EmptyTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QPoint {
    pub n: usize,
    pub value: f64,
}

/// Which part of the ratio sequence enters the tail averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailWindow {
    /// Number of points averaged.
    pub window: usize,
    /// Iterations kept clear before the final iterate. `None` picks the
    /// smallest guard `g` with `ρ̂^g ≤ bias`, where `ρ̂` is the median ratio:
    /// close to the final iterate the reference error is no longer
    /// negligible and the ratios are biased low.
    pub guard: Option<usize>,
    pub bias: f64,
}

impl Default for TailWindow {
    fn default() -> Self {
        Self { window: 100, guard: None, bias: 1e-3 }
    }
}

impl TailWindow {
    fn resolve_guard(&self, points: &[QPoint]) -> usize {
        if let Some(g) = self.guard {
            return g;
        }
        let mut sorted: Vec<f64> = points.iter().map(|p| p.value).filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return 0;
        }
        sorted.sort_by(f64::total_cmp);
        let rho = sorted[sorted.len() / 2];
        if !(rho > 0.0 && rho < 1.0) {
            return 0;
        }
        (self.bias.ln() / rho.ln()).ceil().max(0.0) as usize
    }

    /// Averages the last `window` points with `n ≤ final_n - guard`. When
    /// too few points qualify the guard shrinks, keeping at least
    /// `window.min(len)` points.
    pub fn average(&self, points: &[QPoint], final_n: usize) -> Option<TailStat> {
        if points.is_empty() {
            return None;
        }
        let len = points.len();
        let window = self.window.clamp(1, len);
        let cutoff = final_n.saturating_sub(self.resolve_guard(points));
        let end = points.partition_point(|p| p.n <= cutoff).max(window);
        let start = end - window;
        let mean = points[start..end].iter().map(|p| p.value).sum::<f64>() / window as f64;
        Some(TailStat { mean, first_n: points[start].n, last_n: points[end - 1].n, guard: final_n.saturating_sub(points[end - 1].n) })
    }

    /// Gaps clear of the guard, keeping at least the first half and enough
    /// points for [`loja_fit`].
    pub fn fit_gaps(&self, gaps: &[(usize, f64)], ratios: &[QPoint], final_n: usize) -> Vec<(usize, f64)> {
        let cutoff = final_n.saturating_sub(self.resolve_guard(ratios));
        let floor = gaps.len().div_ceil(2).max(LOJA_MIN_POINTS + 1).min(gaps.len());
        let end = gaps.partition_point(|g| g.0 <= cutoff).max(floor);
        gaps[..end].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailStat {
    pub mean: f64,
    pub first_n: usize,
    pub last_n: usize,
    pub guard: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Linear,
    Sublinear,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LojaFit {
    pub regime: Regime,
    /// Exponent from the power-law slope `s` of the energy gap,
    /// `ν = (1 + 1/s) / 2`; `None` unless `s < -1`.
    pub nu: Option<f64>,
    pub power_slope: f64,
    /// Per-iteration gap ratio `exp(b)` of the linear model.
    pub linear_ratio: f64,
    pub residual_linear: f64,
    pub residual_power: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub q_e: Vec<QPoint>,
    pub q_phi: Vec<QPoint>,
    pub q_e_tail: TailStat,
    pub q_phi_tail: Option<TailStat>,
    pub rho_tau: Option<f64>,
    pub delta_e: Option<f64>,
    pub delta_phi: Option<f64>,
    pub fit: LojaFit,
    pub regime: Regime,
}

impl RateReport {
    /// Records the theoretical rate and the tail deviations from it.
    pub fn with_theory(mut self, rho_tau: f64) -> Self {
        self.rho_tau = Some(rho_tau);
        self.delta_e = Some((self.q_e_tail.mean - rho_tau).abs());
        self.delta_phi = self.q_phi_tail.map(|t| (t.mean - rho_tau).abs());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }

    /// `n,q_e,q_phi`, with `NaN` where a sequence has no value.
    pub fn write_q_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut rows: std::collections::BTreeMap<usize, (f64, f64)> = std::collections::BTreeMap::new();
        for p in &self.q_e {
            rows.entry(p.n).or_insert((f64::NAN, f64::NAN)).0 = p.value;
        }
        for p in &self.q_phi {
            rows.entry(p.n).or_insert((f64::NAN, f64::NAN)).1 = p.value;
        }
        writeln!(out, "n,q_e,q_phi")?;
        for (n, (e, f)) in rows {
            writeln!(out, "{n},{e:.17e},{f:.17e}")?;
        }
        Ok(())
    }
}

/// Gaps `E(φⁿ) - E_final` that stay above `10 ε |E_final|`.
pub fn energy_gaps(energies: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let Some(&(_, e_final)) = energies.last() else { return Vec::new() };
    let floor = 10.0 * f64::EPSILON * e_final.abs();
    energies.iter().map(|&(n, e)| (n, e - e_final)).filter(|&(_, g)| g > floor).collect()
}

/// `Q_E(n) = sqrt(gap(n+1) / gap(n))` over consecutive unmasked gaps.
pub fn energy_ratios(energies: &[(usize, f64)]) -> Vec<QPoint> {
    let gaps = energy_gaps(energies);
    gaps.windows(2)
        .filter(|w| w[1].0 == w[0].0 + 1)
        .map(|w| QPoint { n: w[0].0, value: (w[1].1 / w[0].1).sqrt() })
        .collect()
}

/// `‖φⁿ - φ_g‖_P` for every stored snapshot, `P` the assembled metric.
pub fn phi_errors(trace: &IterTrace, phi_g: &ComplexField, metric: &FactorizedMetric) -> Vec<(usize, f64)> {
    trace
        .snapshots
        .iter()
        .map(|s| {
            let d: Vec<f64> = s.values.iter().zip(phi_g.values()).map(|(a, b)| a - b).collect();
            (s.n, metric.metric_inner(&d, &d).max(0.0).sqrt())
        })
        .collect()
}

/// Per-iteration `Q_φ` from errors at possibly strided `n`:
/// `(err(n') / err(n))^{1/(n'-n)}`. Errors below `floor` are masked.
pub fn error_ratios(errors: &[(usize, f64)], floor: f64) -> Vec<QPoint> {
    errors
        .windows(2)
        .filter(|w| w[0].1 > floor && w[1].1 > floor && w[1].0 > w[0].0)
        .map(|w| {
            let steps = (w[1].0 - w[0].0) as f64;
            QPoint { n: w[0].0, value: (w[1].1 / w[0].1).powf(1.0 / steps) }
        })
        .collect()
}

/// Builds the report from energies and (optionally) snapshot errors.
/// `err_floor` masks `Q_φ` once the errors reach rounding level.
pub fn q_ratios_from(
    energies: &[(usize, f64)],
    errors: &[(usize, f64)],
    err_floor: f64,
    tail: &TailWindow,
) -> Result<RateReport, DiagnosticsError> {
    if energies.is_empty() {
        return Err(DiagnosticsError::EmptyTrace);
    }
    let q_e = energy_ratios(energies);
    if q_e.len() < MIN_RATIO_POINTS {
        return Err(DiagnosticsError::TooFewPoints { usable: q_e.len(), required: MIN_RATIO_POINTS });
    }
    let q_phi = error_ratios(errors, err_floor);
    let final_n = energies[energies.len() - 1].0;
    let q_e_tail = tail.average(&q_e, final_n).expect("nonempty");
    let q_phi_tail = tail.average(&q_phi, final_n);
    let fit = loja_fit(&tail.fit_gaps(&energy_gaps(energies), &q_e, final_n));
    Ok(RateReport {
        q_e,
        q_phi,
        q_e_tail,
        q_phi_tail,
        rho_tau: None,
        delta_e: None,
        delta_phi: None,
        regime: fit.regime,
        fit,
    })
}

/// `Q_E` from the trace energies and `Q_φ` from its snapshots, with
/// `E(φ_g)` the final energy and `φ_g` the final iterate.
pub fn q_ratios(trace: &IterTrace, phi_g: &ComplexField, metric: &FactorizedMetric, tail: &TailWindow) -> Result<RateReport, DiagnosticsError> {
    let energies: Vec<(usize, f64)> = trace.entries.iter().map(|e| (e.n, e.energy)).collect();
    let errors = phi_errors(trace, phi_g, metric);
    let scale = metric.metric_inner(phi_g.values(), phi_g.values()).max(0.0).sqrt();
    q_ratios_from(&energies, &errors, 1e3 * f64::EPSILON * scale, tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrbitDistance {
    pub distance: f64,
    pub alpha: f64,
    pub shift: usize,
}

/// `min ‖φ - e^{iα} φ_g(θ - k h_θ)‖_{L²}` over `α` and grid shifts `k`.
pub fn orbit_distance(phi: &ComplexField, phi_g: &ComplexField) -> Result<OrbitDistance, DiagnosticsError> {
    let grid = phi.grid();
    if **grid != **phi_g.grid() {
        return Err(DiagnosticsError::GridMismatch);
    }
    let n = grid.n_nodes();
    let w = grid.weights();
    let (x, _) = phi.values().split_at(n);
    let y = &phi.values()[n..];
    let mut best = (f64::NEG_INFINITY, 0.0, 0);
    for k in 0..grid.ntheta() {
        let psi = grid.rotate_realified(phi_g.values(), k as isize);
        let (a, b) = psi.split_at(n);
        // Complex pairing Σ w φ conj(ψ).
        let (mut re, mut im) = (0.0, 0.0);
        for p in 0..n {
            re += w[p] * (x[p] * a[p] + y[p] * b[p]);
            im += w[p] * (y[p] * a[p] - x[p] * b[p]);
        }
        let m = re.hypot(im);
        if m > best.0 {
            best = (m, im.atan2(re), k);
        }
    }
    let (_, alpha, shift) = best;
    let psi = phase_rotate(&grid.rotate_realified(phi_g.values(), shift as isize), alpha);
    let d: Vec<f64> = phi.values().iter().zip(&psi).map(|(u, v)| u - v).collect();
    let distance = l2_inner(grid, &d, &d).max(0.0).sqrt();
    let alpha = alpha.rem_euclid(std::f64::consts::TAU);
    Ok(OrbitDistance { distance, alpha, shift })
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icept = my - slope * mx;
    let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - icept - slope * x).powi(2)).sum();
    (slope, icept, (rss / n).sqrt())
}

/// Fits `log gap` against `n` (linear regime) and against `log n`
/// (sublinear regime) and keeps the model with the smaller RMS residual.
/// Residuals within 10% of each other leave the regime undetermined.
pub fn loja_fit(gaps: &[(usize, f64)]) -> LojaFit {
    let pts: Vec<(f64, f64)> = gaps.iter().filter(|&&(n, g)| n >= 1 && g > 0.0).map(|&(n, g)| (n as f64, g.ln())).collect();
    if pts.len() < LOJA_MIN_POINTS {
        return LojaFit {
            regime: Regime::Undetermined,
            nu: None,
            power_slope: f64::NAN,
            linear_ratio: f64::NAN,
            residual_linear: f64::NAN,
            residual_power: f64::NAN,
            points: pts.len(),
        };
    }
    let ns: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let logn: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (b, _, res_lin) = least_squares(&ns, &ys);
    let (s, _, res_pow) = least_squares(&logn, &ys);
    let regime = if (res_lin - res_pow).abs() <= 0.1 * res_lin.max(res_pow) {
        Regime::Undetermined
    } else if res_lin < res_pow {
        Regime::Linear
    } else {
        Regime::Sublinear
    };
    let nu = (regime == Regime::Sublinear && s < -1.0).then(|| 0.5 * (1.0 + 1.0 / s));
    LojaFit {
        regime,
        nu,
        power_slope: s,
        linear_ratio: b.exp(),
        residual_linear: res_lin,
        residual_power: res_pow,
        points: pts.len(),
    }
}
