//! Forward path ensembles, the backward regression scheme for Lipschitz BSDEs
//! with finitely many jump marks, and the decomposition `Y = Y_0 - V + M^c + M^d`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::Generator;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{sample_jump_paths, JumpTable, LevyModel, MarkQuadrature};
use crate::regression::{chunked_reduce, Fit};
use crate::stats;

const BROWNIAN_SALT: u64 = 0x7769_656e_6572_0002;

/// Dynamics of the scalar forward state `X` used as regression feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    /// `X = W^1`.
    Brownian,
    /// `X = W^1 + compensated jump sums with unit mark impact`.
    #[default]
    JumpDiffusion,
    /// Compensated jump sums only.
    PureJump,
    /// `dX = dt`.
    Drift,
}

/// Brownian increments, jump table and forward state on a time grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    d: usize,
    n_paths: usize,
    seed: u64,
    dynamics: Dynamics,
    quad: MarkQuadrature,
    /// `(k * N + p) * d + j`.
    dw: Vec<f64>,
    jumps: JumpTable,
    /// `k * N + p`.
    state: Vec<f64>,
    /// Node masses at the left end of every interval.
    omega: Vec<Vec<f64>>,
    id: u64,
}

pub fn simulate_forward(
    model: &LevyModel,
    quad: &MarkQuadrature,
    dynamics: Dynamics,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_forward_dim(model, quad, dynamics, grid, n_paths, seed, 1)
}

pub fn simulate_forward_dim(
    model: &LevyModel,
    quad: &MarkQuadrature,
    dynamics: Dynamics,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    d: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be positive".into()));
    }
    if d == 0 {
        return Err(Error::InvalidParameter("Brownian dimension must be positive".into()));
    }
    let k_steps = grid.steps();
    let jumps = sample_jump_paths(model, quad, grid, n_paths, seed)?;

    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BROWNIAN_SALT);
            rng.set_stream(p as u64);
            (0..k_steps)
                .flat_map(|k| {
                    let sd = grid.dt(k).sqrt();
                    (0..d).map(move |_| sd)
                })
                .map(|sd| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    sd * g
                })
                .collect()
        })
        .collect();
    let mut dw = vec![0.0; k_steps * n_paths * d];
    for (p, incs) in per_path.into_iter().enumerate() {
        for k in 0..k_steps {
            let dst = (k * n_paths + p) * d;
            dw[dst..dst + d].copy_from_slice(&incs[k * d..(k + 1) * d]);
        }
    }

    let omega: Vec<Vec<f64>> = (0..k_steps).map(|k| quad.omega(grid.t(k))).collect();
    let mut state = vec![0.0; (k_steps + 1) * n_paths];
    for k in 0..k_steps {
        let dt = grid.dt(k);
        let compensator: f64 = omega[k].iter().zip(quad.nodes()).map(|(w, e)| w * e).sum::<f64>() * dt;
        let (head, tail) = state.split_at_mut((k + 1) * n_paths);
        let prev = &head[k * n_paths..];
        let next = &mut tail[..n_paths];
        for p in 0..n_paths {
            next[p] = prev[p]
                + match dynamics {
                    Dynamics::Brownian | Dynamics::JumpDiffusion => dw[(k * n_paths + p) * d],
                    Dynamics::Drift => dt,
                    Dynamics::PureJump => 0.0,
                };
            if matches!(dynamics, Dynamics::JumpDiffusion | Dynamics::PureJump) {
                next[p] -= compensator;
            }
        }
        if matches!(dynamics, Dynamics::JumpDiffusion | Dynamics::PureJump) {
            for &(p, mark) in jumps.interval_jumps(k) {
                next[p as usize] += quad.nodes()[mark as usize];
            }
        }
    }

    let mut h = DefaultHasher::new();
    seed.hash(&mut h);
    n_paths.hash(&mut h);
    d.hash(&mut h);
    (dynamics as u8).hash(&mut h);
    for t in grid.times() {
        t.to_bits().hash(&mut h);
    }
    for (e, w) in quad.nodes().iter().zip(quad.weights()) {
        e.to_bits().hash(&mut h);
        w.to_bits().hash(&mut h);
    }
    Ok(PathEnsemble {
        grid: grid.clone(),
        d,
        n_paths,
        seed,
        dynamics,
        quad: quad.clone(),
        dw,
        jumps,
        state,
        omega,
        id: h.finish(),
    })
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn quad(&self) -> &MarkQuadrature {
        &self.quad
    }

    pub fn jumps(&self) -> &JumpTable {
        &self.jumps
    }

    /// Fingerprint shared by ensembles built from identical inputs.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Forward state at `t_k` for every path.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.state[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.state(self.steps())
    }

    /// `Delta W` on `(t_k, t_{k+1}]` for path `p`.
    pub fn dw(&self, k: usize, p: usize) -> &[f64] {
        let i = (k * self.n_paths + p) * self.d;
        &self.dw[i..i + self.d]
    }

    /// Node masses at `t_k`.
    pub fn omega(&self, k: usize) -> &[f64] {
        &self.omega[k]
    }

    /// Displacement of the state caused by a jump at each node.
    pub fn mark_impact(&self) -> Vec<f64> {
        match self.dynamics {
            Dynamics::JumpDiffusion | Dynamics::PureJump => self.quad.nodes().to_vec(),
            Dynamics::Brownian | Dynamics::Drift => vec![0.0; self.quad.len()],
        }
    }

    /// First Brownian component at `t_k` for every path.
    pub fn brownian(&self, k: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.n_paths];
        for j in 0..k {
            for (p, wp) in w.iter_mut().enumerate() {
                *wp += self.dw(j, p)[0];
            }
        }
        w
    }

    /// `Phi(X_T)` per path.
    pub fn terminal_values<F: Fn(f64) -> f64>(&self, phi: F) -> Vec<f64> {
        self.terminal_state().iter().map(|&x| phi(x)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub degree: usize,
    pub picard_iters: usize,
    pub picard_tol: f64,
    pub max_condition: f64,
    /// Fail on ill-conditioned designs instead of lowering the degree.
    pub strict_rank: bool,
    pub u_estimator: UEstimator,
}

/// How the jump integrand `U` is estimated at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UEstimator {
    /// `E[g(X_{k+1} + e_i) - g(X_{k+1}) | X_k]` with `g` the fitted `Y_{k+1}`;
    /// uses that a mark `e_i` moves the state by a known amount.
    #[default]
    Shift,
    /// `E[r dN_i | X_k] / (omega_i dt)` with `r` the regression residual.
    /// Unbiased but its variance grows like `1 / (N omega_i dt)`.
    Covariation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            picard_iters: 50,
            picard_tol: 1e-10,
            max_condition: 1e10,
            strict_rank: false,
            u_estimator: UEstimator::Shift,
        }
    }
}

/// Regression output of one backward step.
#[derive(Debug, Clone)]
pub struct StepFit {
    pub fit: Fit,
    /// `E[Y_{k+1} | X_k]`.
    pub coef_y: Vec<f64>,
    /// HC0 covariance of `coef_y`.
    pub cov_y: Vec<f64>,
    pub coef_z: Vec<Vec<f64>>,
    pub coef_u: Vec<Vec<f64>>,
    pub picard_iters: usize,
    pub residual_rms: f64,
}

/// `(Y, Z, U)` on an ensemble; `Z` and `U` are kept as per-step regression coefficients.
#[derive(Debug, Clone)]
pub struct BsdejSolution {
    n: usize,
    steps: usize,
    d: usize,
    q: usize,
    /// `k * N + p`.
    y: Vec<f64>,
    /// Driver value on `[t_k, t_{k+1})`, `k * N + p`.
    f: Vec<f64>,
    fits: Vec<StepFit>,
    ensemble_id: u64,
    dt: Vec<f64>,
    pub label: String,
}

impl BsdejSolution {
    pub fn n_paths(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ensemble_id(&self) -> u64 {
        self.ensemble_id
    }

    pub fn y(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.y(self.steps)
    }

    pub fn f(&self, k: usize) -> &[f64] {
        &self.f[k * self.n..(k + 1) * self.n]
    }

    pub fn step(&self, k: usize) -> &StepFit {
        &self.fits[k]
    }

    /// `Y_0` averaged over paths with a Monte Carlo standard error.
    ///
    /// `Y_0 = xi + V_T - M_T` pathwise, so the spread of `xi + V_T` measures the
    /// sampling error; the first-step regression error is used when larger.
    pub fn y0(&self) -> (f64, f64) {
        let m = stats::mean(self.y(0));
        let total: Vec<f64> = (0..self.n)
            .map(|p| self.terminal()[p] + (0..self.steps).map(|k| self.f[k * self.n + p] * self.dt[k]).sum::<f64>())
            .collect();
        let (_, se) = stats::mean_se(&total);
        (m, se.max(self.se_y(0, 0.0)))
    }

    /// Standard error of the conditional-expectation part of `Y_k` at state `x`.
    pub fn se_y(&self, k: usize, x: f64) -> f64 {
        if k >= self.steps {
            return 0.0;
        }
        let s = &self.fits[k];
        s.fit.prediction_se(&s.cov_y, x)
    }

    pub fn z_into(&self, k: usize, x: f64, out: &mut [f64]) {
        let s = &self.fits[k];
        for (j, o) in out.iter_mut().enumerate().take(self.d) {
            *o = s.fit.predict(&s.coef_z[j], x);
        }
    }

    pub fn u_into(&self, k: usize, x: f64, out: &mut [f64]) {
        let s = &self.fits[k];
        for (i, o) in out.iter_mut().enumerate().take(self.q) {
            *o = s.fit.predict(&s.coef_u[i], x);
        }
    }

    pub fn z_at(&self, k: usize, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.z_into(k, x, &mut out);
        out
    }

    pub fn u_at(&self, k: usize, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.q];
        self.u_into(k, x, &mut out);
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.q)
    }

    pub fn check_ensemble(&self, ens: &PathEnsemble) -> Result<()> {
        if self.ensemble_id != ens.id() || self.n != ens.n_paths() || self.steps != ens.steps() {
            return Err(Error::MismatchedEnsemble);
        }
        Ok(())
    }

    /// Writes `path_id,t_k,Y,Z_1..Z_d,U_1..U_Q` for the given paths.
    pub fn write_csv<W: Write>(&self, ens: &PathEnsemble, mut out: W, paths: &[usize]) -> Result<()> {
        self.check_ensemble(ens)?;
        let mut header = vec!["path_id".to_string(), "t_k".into(), "Y".into()];
        header.extend((1..=self.d).map(|j| format!("Z_{j}")));
        header.extend((1..=self.q).map(|i| format!("U_node_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for &p in paths {
            for k in 0..=self.steps {
                let mut row = vec![p.to_string(), format!("{:.16e}", ens.grid().t(k)), format!("{:.16e}", self.y(k)[p])];
                if k < self.steps {
                    let x = ens.state(k)[p];
                    row.extend(self.z_at(k, x).iter().map(|v| format!("{v:.16e}")));
                    row.extend(self.u_at(k, x).iter().map(|v| format!("{v:.16e}")));
                } else {
                    row.extend((0..self.d + self.q).map(|_| String::new()));
                }
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Backward regression scheme with Picard iteration in `y`.
///
/// At each step `Y_k = E[Y_{k+1}|X_k] + f(t_k, Y_k, Z_k, U_k) dt` where
/// `Z_k = E[r dW | X_k]/dt` and `U_k(e_i) = E[r dN_i | X_k] / (omega_i dt)`
/// with `r` the regression residual of `Y_{k+1}`.
pub fn solve_lipschitz(
    driver: &dyn Generator,
    terminal: &[f64],
    ens: &PathEnsemble,
    cfg: &SolverConfig,
) -> Result<BsdejSolution> {
    let n = ens.n_paths();
    let steps = ens.steps();
    let d = ens.dim();
    let q = ens.quad().len();
    if terminal.len() != n {
        return Err(Error::MisalignedField {
            expected: n,
            got: terminal.len(),
        });
    }
    let lip = driver.y_lipschitz();
    let depends_on_y = driver.depends_on_y();
    if depends_on_y {
        if let Some(l) = lip {
            let worst = (0..steps).map(|k| ens.grid().dt(k)).fold(0.0, f64::max) * l;
            if worst >= 1.0 {
                return Err(Error::NonContraction { product: worst });
            }
        }
    }

    let mut y = vec![0.0; (steps + 1) * n];
    let mut f = vec![0.0; steps * n];
    y[steps * n..].copy_from_slice(terminal);
    let mut fits: Vec<Option<StepFit>> = vec![None; steps];

    let mut next_fit: Option<Fit> = None;
    for k in (0..steps).rev() {
        let t = ens.grid().t(k);
        let dt = ens.grid().dt(k);
        let x = ens.state(k);
        let omega = ens.omega(k);
        let fit = Fit::new(x, cfg.degree, cfg.max_condition, cfg.strict_rank, k)?;
        let dim = fit.dim();
        let (y_head, y_tail) = y.split_at_mut((k + 1) * n);
        let y_next = &y_tail[..n];
        let y_k = &mut y_head[k * n..];

        let coef_y = fit.project(x, y_next);
        let resid: Vec<f64> = (0..n).map(|p| y_next[p] - fit.predict(&coef_y, x[p])).collect();
        let cov_y = fit.hc0_cov(x, &resid);
        let residual_rms = (resid.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();

        let coef_z: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let target: Vec<f64> = (0..n).map(|p| resid[p] * ens.dw(k, p)[j] / dt).collect();
                fit.project(x, &target)
            })
            .collect();
        let mut coef_u = vec![vec![0.0; dim]; q];
        match cfg.u_estimator {
            UEstimator::Covariation => {
                // the residual is orthogonal to the basis, so centring dN_i by its
                // compensator only removes the (numerically zero) projection of r
                let coef_r = fit.project(x, &resid);
                for (i, cu) in coef_u.iter_mut().enumerate() {
                    if omega[i] <= 0.0 {
                        continue;
                    }
                    let entries = ens
                        .jumps()
                        .interval_jumps(k)
                        .iter()
                        .filter(|(_, m)| *m as usize == i)
                        .map(|&(p, _)| (p as usize, resid[p as usize]));
                    let raw = fit.project_sparse(x, entries);
                    for a in 0..dim {
                        cu[a] = raw[a] / (omega[i] * dt) - coef_r[a];
                    }
                }
            }
            UEstimator::Shift => {
                let impact = ens.mark_impact();
                if impact.iter().any(|e| *e != 0.0) {
                    let x_next = ens.state(k + 1);
                    let fit_next = match next_fit.take() {
                        Some(f) => f,
                        None => Fit::new(x_next, cfg.degree, cfg.max_condition, cfg.strict_rank, k + 1)?,
                    };
                    let g = fit_next.project(x_next, y_next);
                    let base: Vec<f64> = x_next.iter().map(|&v| fit_next.predict(&g, v)).collect();
                    for (i, cu) in coef_u.iter_mut().enumerate() {
                        if impact[i] == 0.0 {
                            continue;
                        }
                        let target: Vec<f64> = x_next
                            .iter()
                            .zip(&base)
                            .map(|(&v, b)| fit_next.predict(&g, v + impact[i]) - b)
                            .collect();
                        *cu = fit.project(x, &target);
                    }
                }
            }
        }

        let iters = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<Result<(f64, f64)>> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0.0; d], vec![0.0; q]),
                |(zb, ub), p| {
                    let xp = x[p];
                    for j in 0..d {
                        zb[j] = fit.predict(&coef_z[j], xp);
                    }
                    for i in 0..q {
                        ub[i] = fit.predict(&coef_u[i], xp);
                    }
                    let yhat = fit.predict(&coef_y, xp);
                    if !depends_on_y {
                        let fv = driver.eval(t, yhat, zb, ub, omega)?;
                        return Ok((yhat + fv * dt, fv));
                    }
                    let separable = driver.y_part(t, 0.0).map(|h0| (h0, driver.eval(t, 0.0, zb, ub, omega)));
                    let eval_at = |yv: f64| -> Result<f64> {
                        match &separable {
                            Some((h0, rest)) => {
                                let rest = rest.as_ref().map_err(clone_err)?;
                                Ok(driver.y_part(t, yv).unwrap() - h0 + rest)
                            }
                            None => driver.eval(t, yv, zb, ub, omega),
                        }
                    };
                    let mut yv = yhat;
                    let mut it = 0;
                    let mut converged = false;
                    while it < cfg.picard_iters {
                        it += 1;
                        let next = yhat + eval_at(yv)? * dt;
                        let change = (next - yv).abs();
                        yv = next;
                        if change <= cfg.picard_tol * (1.0 + yv.abs()) {
                            converged = true;
                            break;
                        }
                    }
                    if !converged {
                        return Err(Error::NonContraction {
                            product: lip.map(|l| l * dt).unwrap_or(f64::NAN),
                        });
                    }
                    // driver value at the returned Y keeps the decomposition exact
                    let fv = eval_at(yv)?;
                    iters.fetch_max(it, std::sync::atomic::Ordering::Relaxed);
                    Ok((yhat + fv * dt, fv))
                },
            )
            .collect();
        for (p, r) in results.into_iter().enumerate() {
            let (yv, fv) = r?;
            y_k[p] = yv;
            f[k * n + p] = fv;
        }
        next_fit = Some(fit.clone());
        fits[k] = Some(StepFit {
            fit,
            coef_y,
            cov_y,
            coef_z,
            coef_u,
            picard_iters: iters.into_inner(),
            residual_rms,
        });
    }

    Ok(BsdejSolution {
        n,
        steps,
        d,
        q,
        y,
        f,
        fits: fits.into_iter().map(|s| s.expect("every step fitted")).collect(),
        ensemble_id: ens.id(),
        dt: (0..steps).map(|k| ens.grid().dt(k)).collect(),
        label: driver.label(),
    })
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::JOverflow { exponent, cap } => Error::JOverflow {
            exponent: *exponent,
            cap: *cap,
        },
        other => Error::Unsupported(other.to_string()),
    }
}

/// Cumulative processes of `Y = Y_0 - V + M^c + M^d` on the grid, `k * N + p`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    n: usize,
    steps: usize,
    pub v: Vec<f64>,
    pub m_c: Vec<f64>,
    pub m_d: Vec<f64>,
    /// `sum U(e) over jumps - int U d nu dt`, the part of `M^d` explained by `U`.
    pub jump_part: Vec<f64>,
    /// `|V_{k+1} - V_k|` summed along each path.
    pub total_variation: Vec<f64>,
    ensemble_id: u64,
    y0: Vec<f64>,
}

pub fn decompose(sol: &BsdejSolution, ens: &PathEnsemble) -> Result<Decomposition> {
    sol.check_ensemble(ens)?;
    let n = sol.n_paths();
    let steps = sol.steps();
    let (d, q) = sol.dims();
    let mut v = vec![0.0; (steps + 1) * n];
    let mut m_c = vec![0.0; (steps + 1) * n];
    let mut m_d = vec![0.0; (steps + 1) * n];
    let mut jump_part = vec![0.0; (steps + 1) * n];
    let mut total_variation = vec![0.0; n];
    let mut zb = vec![0.0; d];
    let mut ub = vec![0.0; q];
    for k in 0..steps {
        let dt = ens.grid().dt(k);
        let x = ens.state(k);
        let omega = ens.omega(k);
        let y_k = sol.y(k);
        let y_n = sol.y(k + 1);
        let fk = sol.f(k);
        let mut jump_inc = vec![0.0; n];
        for &(p, mark) in ens.jumps().interval_jumps(k) {
            let p = p as usize;
            ub.iter_mut().for_each(|u| *u = 0.0);
            jump_inc[p] += sol.step(k).fit.predict(&sol.step(k).coef_u[mark as usize], x[p]);
        }
        for p in 0..n {
            sol.z_into(k, x[p], &mut zb);
            sol.u_into(k, x[p], &mut ub);
            let dv = fk[p] * dt;
            let dm = y_n[p] - y_k[p] + dv;
            let dmc: f64 = zb.iter().zip(ens.dw(k, p)).map(|(z, w)| z * w).sum();
            let comp: f64 = ub.iter().zip(omega).map(|(u, w)| u * w).sum::<f64>() * dt;
            let i0 = k * n + p;
            let i1 = (k + 1) * n + p;
            v[i1] = v[i0] + dv;
            m_c[i1] = m_c[i0] + dmc;
            m_d[i1] = m_d[i0] + (dm - dmc);
            jump_part[i1] = jump_part[i0] + jump_inc[p] - comp;
            total_variation[p] += dv.abs();
        }
    }
    Ok(Decomposition {
        n,
        steps,
        v,
        m_c,
        m_d,
        jump_part,
        total_variation,
        ensemble_id: sol.ensemble_id(),
        y0: sol.y(0).to_vec(),
    })
}

impl Decomposition {
    pub fn n_paths(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ensemble_id(&self) -> u64 {
        self.ensemble_id
    }

    pub fn at<'a>(&self, field: &'a [f64], k: usize) -> &'a [f64] {
        &field[k * self.n..(k + 1) * self.n]
    }

    /// `M = M^c + M^d` at `(k, p)`.
    pub fn m(&self, k: usize, p: usize) -> f64 {
        self.m_c[k * self.n + p] + self.m_d[k * self.n + p]
    }

    /// `max |Y_k - (Y_0 - V_k + M^c_k + M^d_k)|`.
    pub fn reconstruction_error(&self, sol: &BsdejSolution) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..=self.steps {
            let yk = sol.y(k);
            for p in 0..self.n {
                let i = k * self.n + p;
                let rebuilt = self.y0[p] - self.v[i] + self.m_c[i] + self.m_d[i];
                worst = worst.max((yk[p] - rebuilt).abs());
            }
        }
        worst
    }

    /// Root mean square of `M^d - jump_part` at the horizon.
    pub fn jump_residual_rms(&self) -> f64 {
        let k = self.steps;
        let s: f64 = (0..self.n)
            .map(|p| (self.m_d[k * self.n + p] - self.jump_part[k * self.n + p]).powi(2))
            .sum();
        (s / self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub max_abs_t: f64,
    /// Fraction of (step, coefficient) pairs with `|t| > 4`.
    pub rejected_fraction: f64,
}

/// Regresses the increments of `M` on time-`t_k` features and reports t-statistics.
pub fn martingale_test(dec: &Decomposition, ens: &PathEnsemble, degree: usize) -> Result<MartingaleReport> {
    if dec.ensemble_id() != ens.id() {
        return Err(Error::MismatchedEnsemble);
    }
    let n = dec.n_paths();
    let mut max_abs_t: f64 = 0.0;
    let mut rejected = 0usize;
    let mut total = 0usize;
    for k in 0..dec.steps() {
        let x = ens.state(k);
        let fit = Fit::new(x, degree, 1e10, false, k)?;
        let dm: Vec<f64> = (0..n).map(|p| dec.m(k + 1, p) - dec.m(k, p)).collect();
        let coef = fit.project(x, &dm);
        let resid: Vec<f64> = (0..n).map(|p| dm[p] - fit.predict(&coef, x[p])).collect();
        let cov = fit.hc0_cov(x, &resid);
        let dim = fit.dim();
        for a in 0..dim {
            let se = cov[a * dim + a].max(0.0).sqrt();
            let t = if se > 0.0 {
                coef[a] / se
            } else if coef[a].abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            max_abs_t = max_abs_t.max(t.abs());
            if t.abs() > 4.0 {
                rejected += 1;
            }
            total += 1;
        }
    }
    Ok(MartingaleReport {
        max_abs_t,
        rejected_fraction: rejected as f64 / total.max(1) as f64,
    })
}

/// Deterministic sum over paths of a per-path quantity.
pub fn path_sum<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    chunked_reduce(n, 1, |range, acc| {
        for p in range {
            acc[0] += f(p);
        }
    })[0]
}
