//! The `(n, m, kappa)` approximation ladder on common random numbers.
//!
//! All triples of a schedule share one ensemble simulated with the finest
//! truncation; coarser truncations only mask the driver's jump terms, so every
//! comparison between triples is pathwise.

use serde::{Deserialize, Serialize};

use crate::bsdej::{decompose, simulate_forward, solve_lipschitz, BsdejSolution, Decomposition, Dynamics, PathEnsemble, SolverConfig};
use crate::driver::{regularize_truncated, Driver, Generator, StructureParams};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::levy::{build_quadrature_banded, weighted_norm, LevyModel};
use crate::risk::{apriori_bound_check, bound_target, conditional_log_mean_exp};
use crate::semimartingale::{
    check_q_structure, exponential_transform, solution_paths, stability_diagnostics, submartingale_test, JForm, StabilityReport,
};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub n: f64,
    pub m: f64,
    pub kappa: f64,
}

impl Triple {
    pub fn new(n: f64, m: f64, kappa: f64) -> Self {
        Self { n, m, kappa }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// `Y_from <= Y_to`.
    Increase,
    /// `Y_from >= Y_to`.
    Decrease,
    /// No ordering follows from the comparison theorem.
    Unlinked,
}

#[derive(Debug, Clone, Serialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub n_changed: bool,
    pub m_changed: bool,
    pub kappa_changed: bool,
    pub ordering: Ordering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub triples: Vec<Triple>,
    pub shared_seed: u64,
}

impl Schedule {
    pub fn new(triples: Vec<Triple>, shared_seed: u64) -> Result<Self> {
        let s = Self { triples, shared_seed };
        s.validate()?;
        Ok(s)
    }

    /// `(2,2,2), (4,4,4), (8,8,8)`.
    pub fn canonical(shared_seed: u64) -> Self {
        Self {
            triples: vec![Triple::new(2.0, 2.0, 2.0), Triple::new(4.0, 4.0, 4.0), Triple::new(8.0, 8.0, 8.0)],
            shared_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.triples.is_empty() {
            return Err(Error::InvalidParameter("empty schedule".into()));
        }
        for t in &self.triples {
            if !(t.n >= 1.0 && t.m >= 1.0 && t.kappa >= 1.0) {
                return Err(Error::InvalidParameter(format!("indices must be at least 1: {t:?}")));
            }
        }
        for w in self.triples.windows(2) {
            if w[1].n < w[0].n || w[1].m < w[0].m || w[1].kappa < w[0].kappa {
                return Err(Error::InvalidParameter(format!("schedule must be nondecreasing: {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn max_kappa(&self) -> f64 {
        self.triples.iter().map(|t| t.kappa).fold(1.0, f64::max)
    }

    /// Adjacent links with the ordering the comparison theorem gives for `base`.
    pub fn links(&self, base: &Driver) -> Vec<Link> {
        let (neg_null, neg_mark_null) = base.negative_nullity().unwrap_or((false, false));
        self.triples
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (a, b) = (w[0], w[1]);
                let n_changed = b.n > a.n;
                let m_changed = b.m > a.m;
                let kappa_changed = b.kappa > a.kappa;
                // n and (for a null negative jump part) kappa raise the driver; m
                // and kappa on a negative jump part lower it
                let up = n_changed || (kappa_changed && neg_mark_null);
                let down = (m_changed && !neg_null) || (kappa_changed && !neg_mark_null);
                let ordering = match (up, down) {
                    (true, true) => Ordering::Unlinked,
                    (false, true) => Ordering::Decrease,
                    _ => Ordering::Increase,
                };
                Link {
                    from: i,
                    to: i + 1,
                    n_changed,
                    m_changed,
                    kappa_changed,
                    ordering,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkViolation {
    pub link: Link,
    /// Fraction of `(path, time)` cells breaking the ordering by more than 3 s.e.
    pub violation_fraction: f64,
    /// `max_k mean_p |Y_to - Y_from|`.
    pub sup_gap: f64,
}

/// Pathwise check of each link's ordering on a shared ensemble.
pub fn monotonicity_check(sols: &[&BsdejSolution], ens: &PathEnsemble, links: &[Link]) -> Result<Vec<LinkViolation>> {
    for s in sols {
        if s.check_ensemble(ens).is_err() {
            return Err(Error::UnlinkedComparison("solutions do not share one ensemble".into()));
        }
    }
    let n = ens.n_paths();
    let steps = ens.steps();
    links
        .iter()
        .map(|link| {
            if link.ordering == Ordering::Unlinked {
                return Err(Error::UnlinkedComparison(format!("no ordering between triples {} and {}", link.from, link.to)));
            }
            let (a, b) = (sols[link.from], sols[link.to]);
            let mut bad = 0usize;
            let mut sup_gap: f64 = 0.0;
            for k in 0..=steps {
                let x = ens.state(k);
                let (ya, yb) = (a.y(k), b.y(k));
                let mut gap_sum = 0.0;
                for p in 0..n {
                    let diff = yb[p] - ya[p];
                    gap_sum += diff.abs();
                    let se = (a.se_y(k, x[p]).powi(2) + b.se_y(k, x[p]).powi(2)).sqrt();
                    let signed = match link.ordering {
                        Ordering::Increase => diff,
                        _ => -diff,
                    };
                    if signed < -3.0 * se - 1e-12 * (1.0 + ya[p].abs()) {
                        bad += 1;
                    }
                }
                sup_gap = sup_gap.max(gap_sum / n as f64);
            }
            Ok(LinkViolation {
                link: link.clone(),
                violation_fraction: bad as f64 / ((steps + 1) * n) as f64,
                sup_gap,
            })
        })
        .collect()
}

/// First grid index where `E[exp(e^{C_T}|xi| + int_0^T e^{C_s} dLambda_s) | F_t]` exceeds `l`, else `K`.
pub fn tau_l_localization(ens: &PathEnsemble, params: &StructureParams, xi: &[f64], l: f64, degree: usize) -> Result<Vec<usize>> {
    let est = localization_estimates(ens, params, xi, degree)?;
    Ok(stopping_indices(&est, ens.n_paths(), ens.steps(), l))
}

/// Conditional means used by [`tau_l_localization`], `k * N + p`.
pub fn localization_estimates(ens: &PathEnsemble, params: &StructureParams, xi: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = ens.n_paths();
    if xi.len() != n {
        return Err(Error::MisalignedField { expected: n, got: xi.len() });
    }
    let steps = ens.steps();
    let target = bound_target(xi, params, ens, 0)?;
    let mut est = vec![0.0; (steps + 1) * n];
    for k in 0..=steps {
        let row = &mut est[k * n..(k + 1) * n];
        if k == steps {
            for (r, t) in row.iter_mut().zip(&target) {
                *r = t.exp();
            }
            continue;
        }
        let (logs, _) = conditional_log_mean_exp(ens.state(k), &target, degree, k)?;
        for (r, v) in row.iter_mut().zip(logs) {
            *r = v.exp();
        }
    }
    Ok(est)
}

pub fn stopping_indices(est: &[f64], n: usize, steps: usize, l: f64) -> Vec<usize> {
    (0..n)
        .map(|p| (0..=steps).find(|&k| est[k * n + p] > l).unwrap_or(steps))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct L1Gap {
    /// `E sum_{k < tau} |f_a - f_b| 1{|Z| + |U| <= C} dt`.
    pub a1: f64,
    pub a2: f64,
    pub a1_se: f64,
    pub a2_se: f64,
    /// Time-weighted mass of the region `|Z| + |U|_nu > C`.
    pub region_mass: f64,
    pub region_mass_se: f64,
    /// `(2 / C^2) E[|Z|^2 + |U|_nu^2]`.
    pub chebyshev_bound: f64,
    pub chebyshev_ok: bool,
    pub c_split: f64,
}

/// `|Z| + |U|_nu` on every `(k, p)` cell, `k * N + p`.
pub fn integrand_sizes(sol: &BsdejSolution, ens: &PathEnsemble) -> Result<Vec<f64>> {
    sol.check_ensemble(ens)?;
    let n = ens.n_paths();
    let (d, q) = sol.dims();
    let mut out = vec![0.0; ens.steps() * n];
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; q];
    for k in 0..ens.steps() {
        let x = ens.state(k);
        for p in 0..n {
            sol.z_into(k, x[p], &mut z);
            sol.u_into(k, x[p], &mut u);
            out[k * n + p] = z.iter().map(|v| v * v).sum::<f64>().sqrt() + weighted_norm(&u, ens.omega(k));
        }
    }
    Ok(out)
}

/// Five times the 90th percentile of `|Z| + |U|_nu`.
pub fn default_c_split(sol: &BsdejSolution, ens: &PathEnsemble) -> Result<f64> {
    Ok(5.0 * stats::quantile(&integrand_sizes(sol, ens)?, 0.9).max(1e-12))
}

/// Driver gap split over the bounded region and its complement, evaluated at `sol`.
pub fn driver_l1_gap(
    sol: &BsdejSolution,
    ens: &PathEnsemble,
    f_a: &dyn Generator,
    f_b: &dyn Generator,
    c_split: f64,
    stop: Option<&[usize]>,
) -> Result<L1Gap> {
    if !(c_split > 0.0) {
        return Err(Error::InvalidParameter("C_split must be positive".into()));
    }
    sol.check_ensemble(ens)?;
    let n = ens.n_paths();
    let steps = ens.steps();
    let horizon = ens.grid().horizon();
    let (d, q) = sol.dims();
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; q];
    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    let mut mass = vec![0.0; n];
    let mut second = vec![0.0; n];
    for k in 0..steps {
        let t = ens.grid().t(k);
        let dt = ens.grid().dt(k);
        let x = ens.state(k);
        let omega = ens.omega(k);
        let y = sol.y(k);
        for p in 0..n {
            if let Some(s) = stop {
                if k >= s[p] {
                    continue;
                }
            }
            sol.z_into(k, x[p], &mut z);
            sol.u_into(k, x[p], &mut u);
            let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let un = weighted_norm(&u, omega);
            let gap = (f_a.eval(t, y[p], &z, &u, omega)? - f_b.eval(t, y[p], &z, &u, omega)?).abs() * dt;
            if zn + un <= c_split {
                a1[p] += gap;
            } else {
                a2[p] += gap;
                mass[p] += dt / horizon;
            }
            second[p] += (zn * zn + un * un) * dt / horizon;
        }
    }
    let (a1m, a1_se) = stats::mean_se(&a1);
    let (a2m, a2_se) = stats::mean_se(&a2);
    let (mass_m, mass_se) = stats::mean_se(&mass);
    let chebyshev_bound = 2.0 / (c_split * c_split) * stats::mean(&second);
    Ok(L1Gap {
        a1: a1m,
        a2: a2m,
        a1_se,
        a2_se,
        region_mass: mass_m,
        region_mass_se: mass_se,
        chebyshev_bound,
        chebyshev_ok: mass_m <= chebyshev_bound + 3.0 * mass_se,
        c_split,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub dynamics: Dynamics,
    pub cells_per_band: usize,
    pub solver: SolverConfig,
    pub j_form: JForm,
    /// Region threshold for the gap split; defaults to 5x the 90th percentile
    /// of `|Z| + |U|_nu` on the finest triple.
    pub c_split: Option<f64>,
    /// Localization level; `None` uses the full horizon.
    pub tau_level: Option<f64>,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 50,
            n_paths: 100_000,
            dynamics: Dynamics::JumpDiffusion,
            cells_per_band: 2,
            solver: SolverConfig::default(),
            j_form: JForm::DeltaScaled,
            c_split: None,
            tau_level: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TripleRecord {
    pub triple: Triple,
    pub y0: f64,
    pub y0_se: f64,
    pub structure_violation: f64,
    pub apriori_ok: bool,
    pub apriori_gap: f64,
    pub apriori_gap_se: f64,
    pub submartingale_pass: bool,
    pub a1: f64,
    pub a2: f64,
    pub chebyshev_ok: bool,
    /// Stability norms against the previous accepted triple.
    pub h1_to_prev: Option<f64>,
    pub v_star_to_prev: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub records: Vec<TripleRecord>,
    pub links: Vec<LinkViolation>,
    pub stability: Option<StabilityReport>,
    pub c_split: f64,
    /// Every link has violation fraction below 1%.
    pub monotone: bool,
    /// `A1 + A2` strictly decreases along the schedule.
    pub gap_decreasing: bool,
    /// `max_k mean |Y - Y_next|` decreases along the links.
    pub dini_decreasing: bool,
}

impl ConvergenceReport {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "n,m,kappa,y0,y0_se,structure_violation,apriori_ok,apriori_gap,submartingale_pass,a1,a2,chebyshev_ok,h1_to_prev,v_star_to_prev,error"
        )?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{:.16e},{},{:.16e},{},{:.16e},{:.16e},{},{},{},{}",
                r.triple.n,
                r.triple.m,
                r.triple.kappa,
                r.y0,
                r.y0_se,
                r.structure_violation,
                r.apriori_ok,
                r.apriori_gap,
                r.submartingale_pass,
                r.a1,
                r.a2,
                r.chebyshev_ok,
                opt(r.h1_to_prev),
                opt(r.v_star_to_prev),
                r.error.clone().unwrap_or_default().replace(',', ";")
            )?;
        }
        Ok(())
    }
}

pub struct SchemeOutput {
    pub ensemble: PathEnsemble,
    pub solutions: Vec<Option<BsdejSolution>>,
    pub decompositions: Vec<Option<Decomposition>>,
    pub report: ConvergenceReport,
}

/// Regularize, solve, decompose and audit every triple on one shared ensemble.
pub fn run_triple_scheme(
    base: &Driver,
    terminal: &dyn Fn(f64) -> f64,
    model: &LevyModel,
    schedule: &Schedule,
    cfg: &SchemeConfig,
) -> Result<SchemeOutput> {
    schedule.validate()?;
    let params = base.params.clone();
    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
    let quad = build_quadrature_banded(model, schedule.max_kappa(), cfg.cells_per_band)?;
    let ens = simulate_forward(model, &quad, cfg.dynamics, &grid, cfg.n_paths, schedule.shared_seed)?;
    let xi = ens.terminal_values(terminal);
    let stop = match cfg.tau_level {
        Some(l) => Some(tau_l_localization(&ens, &params, &xi, l, cfg.solver.degree)?),
        None => None,
    };

    let mut solutions = Vec::new();
    let mut drivers = Vec::new();
    for t in &schedule.triples {
        let outcome = regularize_truncated(base, t.n, t.m, &quad, t.kappa)
            .and_then(|r| solve_lipschitz(&r, &xi, &ens, &cfg.solver).map(|s| (r, s)));
        match outcome {
            Ok((r, s)) => {
                log::info!("triple ({}, {}, {}): Y0 = {:.6}", t.n, t.m, t.kappa, s.y0().0);
                drivers.push(Some(r));
                solutions.push(Ok(s));
            }
            Err(e) => {
                log::warn!("triple ({}, {}, {}) failed: {e}", t.n, t.m, t.kappa);
                drivers.push(None);
                solutions.push(Err(e));
            }
        }
    }
    let decompositions: Vec<Option<Decomposition>> = solutions
        .iter()
        .map(|s| s.as_ref().ok().and_then(|s| decompose(s, &ens).ok()))
        .collect();

    let c_split = match cfg.c_split {
        Some(c) => c,
        None => match solutions.iter().rev().find_map(|s| s.as_ref().ok()) {
            Some(s) => default_c_split(s, &ens)?,
            None => 1.0,
        },
    };

    let k_mid = (cfg.steps / 2).max(1);
    let mut records = Vec::new();
    let mut prev: Option<usize> = None;
    let accepted: Vec<&Decomposition> = decompositions.iter().flatten().collect();
    let stability = if accepted.is_empty() { None } else { Some(stability_diagnostics(&accepted)?) };
    let mut accepted_idx = 0usize;
    for (i, t) in schedule.triples.iter().enumerate() {
        let (sol, dec, drv) = match (&solutions[i], &decompositions[i], &drivers[i]) {
            (Ok(s), Some(d), Some(r)) => (s, d, r),
            (res, _, _) => {
                records.push(TripleRecord {
                    triple: *t,
                    y0: f64::NAN,
                    y0_se: f64::NAN,
                    structure_violation: f64::NAN,
                    apriori_ok: false,
                    apriori_gap: f64::NAN,
                    apriori_gap_se: f64::NAN,
                    submartingale_pass: false,
                    a1: f64::NAN,
                    a2: f64::NAN,
                    chebyshev_ok: false,
                    h1_to_prev: None,
                    v_star_to_prev: None,
                    error: Some(match res {
                        Err(e) => e.to_string(),
                        Ok(_) => "decomposition failed".into(),
                    }),
                });
                continue;
            }
        };
        let (y0, y0_se) = sol.y0();
        let q = check_q_structure(dec, sol, &ens, &params, cfg.j_form, 3.0 * y0_se)?;
        let apriori = apriori_bound_check(sol, &params, &ens, 0, cfg.solver.degree)?;
        let xb = exponential_transform(&solution_paths(sol), ens.n_paths(), &params, &grid)?;
        let sub_a = submartingale_test(&xb, &ens, 0, k_mid, cfg.solver.degree)?;
        let sub_b = submartingale_test(&xb, &ens, k_mid, cfg.steps, cfg.solver.degree)?;
        let gap = driver_l1_gap(sol, &ens, drv, base, c_split, stop.as_deref())?;
        let (h1_to_prev, v_star_to_prev) = match (prev, &stability) {
            (Some(j), Some(st)) => (Some(st.h1_gap(j, accepted_idx)), Some(st.v_star_gap(j, accepted_idx))),
            _ => (None, None),
        };
        prev = Some(accepted_idx);
        accepted_idx += 1;
        records.push(TripleRecord {
            triple: *t,
            y0,
            y0_se,
            structure_violation: q.violation_fraction,
            apriori_ok: apriori.ok,
            apriori_gap: apriori.gap,
            apriori_gap_se: apriori.gap_se,
            submartingale_pass: sub_a.pass && sub_b.pass,
            a1: gap.a1,
            a2: gap.a2,
            chebyshev_ok: gap.chebyshev_ok,
            h1_to_prev,
            v_star_to_prev,
            error: None,
        });
    }

    let ok_solutions: Vec<&BsdejSolution> = solutions.iter().filter_map(|s| s.as_ref().ok()).collect();
    let links = if ok_solutions.len() == solutions.len() {
        let all_links: Vec<Link> = schedule.links(base).into_iter().filter(|l| l.ordering != Ordering::Unlinked).collect();
        monotonicity_check(&ok_solutions, &ens, &all_links)?
    } else {
        Vec::new()
    };
    let monotone = links.iter().all(|l| l.violation_fraction < 0.01);
    let gaps: Vec<f64> = records.iter().map(|r| r.a1 + r.a2).collect();
    let gap_decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let dini_decreasing = links.windows(2).all(|w| w[1].sup_gap < w[0].sup_gap);
    let solutions = solutions.into_iter().map(|s| s.ok()).collect();
    Ok(SchemeOutput {
        ensemble: ens,
        solutions,
        decompositions,
        report: ConvergenceReport {
            records,
            links,
            stability,
            c_split,
            monotone,
            gap_decreasing,
            dini_decreasing,
        },
    })
}
