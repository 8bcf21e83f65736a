//! Checks of quadratic-exponential semimartingale structure on discrete decompositions.

use serde::{Deserialize, Serialize};

use crate::bsdej::{BsdejSolution, Decomposition, PathEnsemble};
use crate::driver::StructureParams;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{expm1_minus_x, j_sum};
use crate::regression::Fit;
use crate::stats;

/// Scaling of the jump term in the corridor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JForm {
    /// `(1/delta) j(delta u)`, the form the driver structure bounds use.
    #[default]
    DeltaScaled,
    /// `j(delta u)`.
    Unscaled,
}

#[derive(Debug, Clone)]
pub struct QStructureReport {
    /// `dV - lower corridor`, `k * N + p`.
    pub lower_slack: Vec<f64>,
    /// `upper corridor - dV`, `k * N + p`.
    pub upper_slack: Vec<f64>,
    pub violation_fraction: f64,
    pub tol: f64,
}

/// Interval-wise test of `lower <= dV <= upper` with absolute tolerance `tol`.
pub fn check_q_structure(
    dec: &Decomposition,
    sol: &BsdejSolution,
    ens: &PathEnsemble,
    params: &StructureParams,
    form: JForm,
    tol: f64,
) -> Result<QStructureReport> {
    sol.check_ensemble(ens)?;
    if dec.ensemble_id() != ens.id() {
        return Err(Error::MismatchedEnsemble);
    }
    let n = ens.n_paths();
    let steps = ens.steps();
    let (d, q) = sol.dims();
    let delta = params.delta;
    let scale = match form {
        JForm::DeltaScaled => 1.0 / delta,
        JForm::Unscaled => 1.0,
    };
    let mut lower_slack = vec![0.0; steps * n];
    let mut upper_slack = vec![0.0; steps * n];
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; q];
    let mut neg = vec![0.0; q];
    let mut violations = 0usize;
    for k in 0..steps {
        let t = ens.grid().t(k);
        let dt = ens.grid().dt(k);
        let omega = ens.omega(k);
        let x = ens.state(k);
        let y = sol.y(k);
        let dv = dec.at(&dec.v, k + 1).iter().zip(dec.at(&dec.v, k)).map(|(a, b)| a - b);
        for (p, dv) in dv.enumerate() {
            sol.z_into(k, x[p], &mut z);
            sol.u_into(k, x[p], &mut u);
            for (nv, uv) in neg.iter_mut().zip(&u) {
                *nv = -uv;
            }
            let z2: f64 = z.iter().map(|v| v * v).sum();
            let base = (0.5 * delta * z2 + params.l.at(t) + params.c.at(t) * y[p].abs()) * dt;
            // an overflowing jump term leaves that side of the corridor open
            let up = base + scale * j_or_inf(&u, delta, omega)? * dt;
            let down = -base - scale * j_or_inf(&neg, delta, omega)? * dt;
            let i = k * n + p;
            lower_slack[i] = dv - down;
            upper_slack[i] = up - dv;
            if lower_slack[i] < -tol || upper_slack[i] < -tol {
                violations += 1;
            }
        }
    }
    Ok(QStructureReport {
        lower_slack,
        upper_slack,
        violation_fraction: violations as f64 / (steps * n).max(1) as f64,
        tol,
    })
}

fn j_or_inf(u: &[f64], delta: f64, omega: &[f64]) -> Result<f64> {
    match j_sum(u, delta, omega) {
        Err(Error::JOverflow { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// `e^{C_t}|Y_t| + int_0^t e^{C_s} dLambda_s` on the grid, `k * N + p`.
#[derive(Debug, Clone)]
pub struct ExponentialTransformPath {
    pub n: usize,
    pub steps: usize,
    pub x_bar: Vec<f64>,
}

impl ExponentialTransformPath {
    pub fn at(&self, k: usize) -> &[f64] {
        &self.x_bar[k * self.n..(k + 1) * self.n]
    }
}

/// `y` is time-major with `grid.steps() + 1` rows of `n` paths.
pub fn exponential_transform(y: &[f64], n: usize, params: &StructureParams, grid: &TimeGrid) -> Result<ExponentialTransformPath> {
    let rows = grid.steps() + 1;
    if y.len() != rows * n {
        return Err(Error::MisalignedField {
            expected: rows * n,
            got: y.len(),
        });
    }
    let (g, d) = params.discrete_gronwall(grid)?;
    let mut x_bar = vec![0.0; rows * n];
    for k in 0..rows {
        for p in 0..n {
            x_bar[k * n + p] = g[k] * y[k * n + p].abs() + d[k];
        }
    }
    Ok(ExponentialTransformPath { n, steps: grid.steps(), x_bar })
}

/// Time-major `Y` of a solution, ready for [`exponential_transform`].
pub fn solution_paths(sol: &BsdejSolution) -> Vec<f64> {
    (0..=sol.steps()).flat_map(|k| sol.y(k).iter().copied()).collect()
}

#[derive(Debug, Clone)]
pub struct SubmartingaleReport {
    /// Paths where the regressed `E[exp(X_tau) - exp(X_sigma) | F_sigma]` is below `-3 s.e.`.
    pub failing_fraction: f64,
    pub pass: bool,
    /// Top 0.1% of paths carry more than half of the `exp(X_tau)` sample mean.
    pub heavy_tail: bool,
}

/// Regresses `exp(X_tau) - exp(X_sigma)` on the forward state at `sigma`.
pub fn submartingale_test(
    xb: &ExponentialTransformPath,
    ens: &PathEnsemble,
    sigma: usize,
    tau: usize,
    degree: usize,
) -> Result<SubmartingaleReport> {
    if sigma >= tau || tau > xb.steps {
        return Err(Error::InvalidParameter(format!("need sigma < tau <= K, got {sigma}, {tau}")));
    }
    if xb.n != ens.n_paths() || xb.steps != ens.steps() {
        return Err(Error::MismatchedEnsemble);
    }
    let n = xb.n;
    let xs = xb.at(sigma);
    let xt = xb.at(tau);
    // common shift keeps the exponentials finite; the sign test is scale free
    let shift = xs.iter().chain(xt).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let diff: Vec<f64> = xs.iter().zip(xt).map(|(s, t)| (t - shift).exp() - (s - shift).exp()).collect();
    let heavy_tail = stats::top_share_log(xt, 0.001) > 0.5;
    let state = ens.state(sigma);
    let fit = Fit::new(state, degree, 1e10, false, sigma)?;
    let coef = fit.project(state, &diff);
    let resid: Vec<f64> = (0..n).map(|p| diff[p] - fit.predict(&coef, state[p])).collect();
    let cov = fit.hc0_cov(state, &resid);
    let floor = 1e-12 * xs.iter().map(|s| (s - shift).exp()).fold(0.0, f64::max);
    let failing = (0..n)
        .filter(|&p| fit.predict(&coef, state[p]) + 3.0 * fit.prediction_se(&cov, state[p]) < -floor)
        .count();
    let failing_fraction = failing as f64 / n as f64;
    Ok(SubmartingaleReport {
        failing_fraction,
        pass: failing_fraction < 0.01,
        heavy_tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upper,
    Lower,
}

/// Discrete canonical semimartingale paths, `k * N + p`.
#[derive(Debug, Clone)]
pub struct RPaths {
    pub n: usize,
    pub steps: usize,
    pub direction: Direction,
    pub r: Vec<f64>,
}

impl RPaths {
    pub fn terminal_increment(&self) -> Vec<f64> {
        let t = self.steps * self.n;
        (0..self.n).map(|p| self.r[t + p] - self.r[p]).collect()
    }
}

/// Upper: `r = M - <M^c>/2 - (e^U - U - 1).nu` with `M = Z.W + U * (mu - nu)`.
/// Lower: `r = M + <M^c>/2 + (e^{-U} + U - 1).nu`.
///
/// `z(k, p, out)` and `u(k, p, out)` fill the integrands on interval `k`.
pub fn canonical_paths<FZ, FU>(ens: &PathEnsemble, z: FZ, u: FU, direction: Direction, r0: f64) -> RPaths
where
    FZ: Fn(usize, usize, &mut [f64]),
    FU: Fn(usize, usize, &mut [f64]),
{
    let n = ens.n_paths();
    let steps = ens.steps();
    let d = ens.dim();
    let q = ens.quad().len();
    let mut r = vec![r0; (steps + 1) * n];
    let mut zb = vec![0.0; d];
    let mut ub = vec![0.0; q];
    let sign = match direction {
        Direction::Upper => 1.0,
        Direction::Lower => -1.0,
    };
    let mut jump_sum = vec![0.0; n];
    for k in 0..steps {
        let dt = ens.grid().dt(k);
        let omega = ens.omega(k);
        jump_sum.iter_mut().for_each(|v| *v = 0.0);
        for &(p, mark) in ens.jumps().interval_jumps(k) {
            u(k, p as usize, &mut ub);
            jump_sum[p as usize] += ub[mark as usize];
        }
        for p in 0..n {
            z(k, p, &mut zb);
            u(k, p, &mut ub);
            let mc: f64 = zb.iter().zip(ens.dw(k, p)).map(|(a, b)| a * b).sum();
            let qv: f64 = zb.iter().map(|v| v * v).sum::<f64>() * dt;
            let comp: f64 = ub.iter().zip(omega).map(|(v, w)| v * w).sum::<f64>() * dt;
            let convex: f64 = ub.iter().zip(omega).map(|(v, w)| w * expm1_minus_x(sign * v)).sum::<f64>() * dt;
            let dm = mc + jump_sum[p] - comp;
            r[(k + 1) * n + p] = r[k * n + p] + dm - sign * (0.5 * qv + convex);
        }
    }
    RPaths { n, steps, direction, r }
}

#[derive(Debug, Clone)]
pub struct DoleansReport {
    pub mean: f64,
    pub se: f64,
    pub ok: bool,
    pub positive: bool,
}

/// Mean of `exp(r_T - r_0)` (upper) or `exp(-(r_T - r_0))` (lower), which are Doléans exponentials.
pub fn doleans_check(paths: &RPaths) -> DoleansReport {
    let sign = match paths.direction {
        Direction::Upper => 1.0,
        Direction::Lower => -1.0,
    };
    let e: Vec<f64> = paths.terminal_increment().iter().map(|v| (sign * v).exp()).collect();
    let (mean, se) = stats::mean_se(&e);
    DoleansReport {
        mean,
        se,
        ok: (mean - 1.0).abs() <= 3.0 * se + 1e-12,
        positive: e.iter().all(|v| *v > 0.0),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRecord {
    /// `E int |dV|`.
    pub total_variation: f64,
    /// `E sup |M|`.
    pub m_star: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub records: Vec<StabilityRecord>,
    /// `E sqrt([M_i - M_j]_T)`, row-major.
    pub h1: Vec<f64>,
    /// `E sup |V_i - V_j|`, row-major.
    pub v_star: Vec<f64>,
    pub size: usize,
    /// Adjacent gaps strictly decrease along the sequence.
    pub h1_decreasing: bool,
    pub v_star_decreasing: bool,
}

impl StabilityReport {
    pub fn h1_gap(&self, i: usize, j: usize) -> f64 {
        self.h1[i * self.size + j]
    }

    pub fn v_star_gap(&self, i: usize, j: usize) -> f64 {
        self.v_star[i * self.size + j]
    }
}

pub fn stability_diagnostics(decs: &[&Decomposition]) -> Result<StabilityReport> {
    let size = decs.len();
    if size == 0 {
        return Err(Error::InvalidParameter("no decompositions".into()));
    }
    let id = decs[0].ensemble_id();
    if decs.iter().any(|d| d.ensemble_id() != id) {
        return Err(Error::MismatchedEnsemble);
    }
    let n = decs[0].n_paths();
    let steps = decs[0].steps();
    let records = decs
        .iter()
        .map(|d| {
            let m_star: Vec<f64> = (0..n)
                .map(|p| (0..=steps).map(|k| d.m(k, p).abs()).fold(0.0, f64::max))
                .collect();
            StabilityRecord {
                total_variation: stats::mean(&d.total_variation),
                m_star: stats::mean(&m_star),
            }
        })
        .collect();
    let mut h1 = vec![0.0; size * size];
    let mut v_star = vec![0.0; size * size];
    for i in 0..size {
        for j in i + 1..size {
            let (a, b) = (decs[i], decs[j]);
            let mut hs = 0.0;
            let mut vs = 0.0;
            for p in 0..n {
                let mut qv = 0.0;
                let mut vmax: f64 = 0.0;
                for k in 0..steps {
                    let da = a.m(k + 1, p) - a.m(k, p);
                    let db = b.m(k + 1, p) - b.m(k, p);
                    qv += (da - db).powi(2);
                    vmax = vmax.max((a.v[(k + 1) * n + p] - b.v[(k + 1) * n + p]).abs());
                }
                hs += qv.sqrt();
                vs += vmax;
            }
            h1[i * size + j] = hs / n as f64;
            h1[j * size + i] = hs / n as f64;
            v_star[i * size + j] = vs / n as f64;
            v_star[j * size + i] = vs / n as f64;
        }
    }
    let decreasing = |m: &[f64]| (0..size.saturating_sub(2)).all(|i| m[i * size + i + 1] > m[(i + 1) * size + i + 2]);
    Ok(StabilityReport {
        records,
        h1_decreasing: decreasing(&h1),
        v_star_decreasing: decreasing(&v_star),
        h1,
        v_star,
        size,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GarsiaNeveuReport {
    pub p: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub ok: bool,
}

/// `E[A_T^p] <= p^p E[U^p]` with a three standard error allowance.
pub fn garsia_neveu_probe(a_terminal: &[f64], u_dom: &[f64], p: f64) -> Result<GarsiaNeveuReport> {
    if p < 1.0 {
        return Err(Error::InvalidParameter(format!("p must be at least 1, got {p}")));
    }
    let a: Vec<f64> = a_terminal.iter().map(|v| v.max(0.0).powf(p)).collect();
    let u: Vec<f64> = u_dom.iter().map(|v| p.powf(p) * v.max(0.0).powf(p)).collect();
    let (lhs, lhs_se) = stats::mean_se(&a);
    let (rhs, rhs_se) = stats::mean_se(&u);
    Ok(GarsiaNeveuReport {
        p,
        lhs,
        lhs_se,
        rhs,
        rhs_se,
        ok: lhs <= rhs + 3.0 * (lhs_se * lhs_se + rhs_se * rhs_se).sqrt(),
    })
}
