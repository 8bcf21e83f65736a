//! Entropic risk measures and the a-priori bound of the quadratic-exponential class.

use serde::Serialize;

use crate::bsdej::{BsdejSolution, PathEnsemble};
use crate::driver::StructureParams;
use crate::error::{Error, Result};
use crate::integrate::{integrate, Tolerance};
use crate::regression::Fit;
use crate::semimartingale::Direction;
use crate::stats;

#[derive(Debug, Clone, Serialize)]
pub struct RiskEstimate {
    /// Value at `t = 0`, or the path average of the conditional values.
    pub value: f64,
    pub stderr: f64,
    pub direction: Direction,
    /// Conditional values per path when `t > 0`.
    pub per_path: Option<Vec<f64>>,
    pub per_path_se: Option<Vec<f64>>,
    pub heavy_tail: bool,
}

/// `ln E[exp(psi) | F_t]` (upper) or `-ln E[exp(-psi) | F_t]` (lower) at grid index `k`.
pub fn entropic(ens: &PathEnsemble, payoff: &[f64], k: usize, direction: Direction, degree: usize) -> Result<RiskEstimate> {
    if payoff.len() != ens.n_paths() {
        return Err(Error::MisalignedField {
            expected: ens.n_paths(),
            got: payoff.len(),
        });
    }
    if k > ens.steps() {
        return Err(Error::InvalidParameter(format!("time index {k} beyond the grid")));
    }
    let sign = match direction {
        Direction::Upper => 1.0,
        Direction::Lower => -1.0,
    };
    let logs: Vec<f64> = payoff.iter().map(|v| sign * v).collect();
    let heavy_tail = stats::top_share_log(&logs, 0.001) > 0.5;
    if heavy_tail {
        log::warn!("entropic estimate dominated by the top 0.1% of paths");
    }
    if k == 0 {
        let (v, se) = stats::log_mean_exp(&logs);
        return Ok(RiskEstimate {
            value: sign * v,
            stderr: se,
            direction,
            per_path: None,
            per_path_se: None,
            heavy_tail,
        });
    }
    let (values, rel) = conditional_log_mean_exp(ens.state(k), &logs, degree, k)?;
    let values: Vec<f64> = values.iter().map(|v| sign * v).collect();
    let ses = rel;
    Ok(RiskEstimate {
        value: stats::mean(&values),
        stderr: stats::mean(&ses),
        direction,
        per_path: Some(values),
        per_path_se: Some(ses),
        heavy_tail,
    })
}

/// `ln E[exp(l) | x]` per sample with its delta-method standard error.
///
/// `exp(b x)` is factored out before regressing, `b` being the least-squares
/// slope of `l` on `x`; this is exact because `x` is known at the conditioning
/// time, and it leaves a much flatter function for the polynomial basis.
pub fn conditional_log_mean_exp(x: &[f64], logs: &[f64], degree: usize, step: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let ml = logs.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxl: f64 = x.iter().zip(logs).map(|(v, l)| (v - mx) * (l - ml)).sum();
    let b = if sxx > 0.0 { sxl / sxx } else { 0.0 };
    let tilted: Vec<f64> = x.iter().zip(logs).map(|(v, l)| l - b * v).collect();
    let shift = tilted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = tilted.iter().map(|v| (v - shift).exp()).collect();
    let fit = Fit::new(x, degree, 1e10, false, step)?;
    let coef = fit.project(x, &e);
    let resid: Vec<f64> = e.iter().zip(x).map(|(v, xv)| v - fit.predict(&coef, *xv)).collect();
    let cov = fit.hc0_cov(x, &resid);
    let mut values = Vec::with_capacity(x.len());
    let mut ses = Vec::with_capacity(x.len());
    for &xv in x {
        let m = fit.predict(&coef, xv).max(f64::MIN_POSITIVE);
        values.push(b * xv + shift + m.ln());
        ses.push(fit.prediction_se(&cov, xv) / m);
    }
    Ok((values, ses))
}

/// `(G_K |xi| + D_K - D_k) / G_k` per path, with `G`, `D` the discrete Gronwall factors;
/// the grid version of `e^{C_{t,T}} |xi| + int_t^T e^{C_{t,s}} dLambda_s`.
pub fn bound_target(xi: &[f64], params: &StructureParams, ens: &PathEnsemble, k: usize) -> Result<Vec<f64>> {
    let (g, d) = params.discrete_gronwall(ens.grid())?;
    let last = g.len() - 1;
    let (scale, drift) = (g[last] / g[k], (d[last] - d[k]) / g[k]);
    Ok(xi.iter().map(|v| scale * v.abs() + drift).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct AprioriReport {
    /// Mean of `|Y_t|`.
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: RiskEstimate,
    /// Fraction of paths where the bound holds with the allowance.
    pub holding_fraction: f64,
    /// `rhs - lhs` at `t = 0`.
    pub gap: f64,
    pub gap_se: f64,
    pub ok: bool,
}

/// Allowance for the fixed-point stopping error, which accumulates over the backward steps and
/// dominates when the sample has no Monte Carlo noise.
fn picard_floor(scale: f64) -> f64 {
    1e-8 * (1.0 + scale.abs())
}

/// `|Y_t| <= rho_t[e^{C_{t,T}}|xi| + int_t^T e^{C_{t,s}} dLambda_s]` with 3 s.e. slack.
pub fn apriori_bound_check(
    sol: &BsdejSolution,
    params: &StructureParams,
    ens: &PathEnsemble,
    k: usize,
    degree: usize,
) -> Result<AprioriReport> {
    sol.check_ensemble(ens)?;
    let target = bound_target(sol.terminal(), params, ens, k)?;
    let rhs = entropic(ens, &target, k, Direction::Upper, degree)?;
    let y = sol.y(k);
    let abs: Vec<f64> = y.iter().map(|v| v.abs()).collect();
    if k == 0 {
        let (y0, y0_se) = sol.y0();
        let gap = rhs.value - y0.abs();
        let gap_se = (rhs.stderr.powi(2) + y0_se.powi(2)).sqrt();
        let ok = gap >= -3.0 * gap_se - picard_floor(rhs.value);
        return Ok(AprioriReport {
            lhs: y0.abs(),
            lhs_se: y0_se,
            rhs,
            holding_fraction: if ok { 1.0 } else { 0.0 },
            gap,
            gap_se,
            ok,
        });
    }
    let state = ens.state(k);
    let values = rhs.per_path.as_ref().expect("conditional estimate");
    let ses = rhs.per_path_se.as_ref().expect("conditional estimate");
    let holding = (0..abs.len())
        .filter(|&p| {
            let slack = 3.0 * (ses[p].powi(2) + sol.se_y(k, state[p]).powi(2)).sqrt() + picard_floor(values[p]);
            abs[p] <= values[p] + slack
        })
        .count();
    let holding_fraction = holding as f64 / abs.len() as f64;
    let (lhs, lhs_se) = stats::mean_se(&abs);
    Ok(AprioriReport {
        lhs,
        lhs_se,
        gap: rhs.value - lhs,
        gap_se: (rhs.stderr.powi(2) + lhs_se.powi(2)).sqrt(),
        rhs,
        holding_fraction,
        ok: holding_fraction >= 0.99,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub gamma: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Mean over the first half of the sample.
    pub half_mean: f64,
    /// Relative change below 10% and no top-0.1% domination.
    pub stable: bool,
}

/// `E[exp(gamma (e^{C_{0,T}}|xi| + int_0^T e^{C_{0,s}} dLambda_s))]` for each `gamma`.
pub fn exponential_moment_check(xi: &[f64], params: &StructureParams, horizon: f64, gammas: &[f64]) -> Result<Vec<MomentRow>> {
    if xi.len() < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    if gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidParameter("gamma must be positive".into()));
    }
    let ec = params.c_between(0.0, horizon).exp();
    let drift = if params.l.is_zero() {
        0.0
    } else {
        integrate(|s| params.c_between(0.0, s).exp() * params.l.at(s), 0.0, horizon, Tolerance::default())?.value
    };
    let half = xi.len() / 2;
    Ok(gammas
        .iter()
        .map(|&g| {
            let logs: Vec<f64> = xi.iter().map(|v| g * (ec * v.abs() + drift)).collect();
            let e: Vec<f64> = logs.iter().map(|v| v.exp()).collect();
            let (mean, stderr) = stats::mean_se(&e);
            let half_mean = stats::mean(&e[..half]);
            let change = ((mean - half_mean) / mean).abs();
            let stable = change.is_finite() && change < 0.1 && stats::top_share_log(&logs, 0.001) <= 0.5;
            MomentRow {
                gamma: g,
                mean,
                stderr,
                half_mean,
                stable,
            }
        })
        .collect())
}
