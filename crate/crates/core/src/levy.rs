//! Jump measures `nu(dt, de) = zeta(t, e) lambda(de) dt`, their truncation to
//! `|e| >= 1/kappa`, quadrature on the truncated mark space, the exponential
//! functional `j`, and compound-Poisson simulation of the truncated measure.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate, integrate_to_infinity, Tolerance};

/// Exponent cap for `e^{delta u}` inside `j`.
pub const J_EXPONENT_CAP: f64 = 700.0;

const JUMP_SALT: u64 = 0x6a75_6d70_7321_0001;
const TAIL_RATIO: f64 = 1e-3;
const MAX_BODY_EDGE: f64 = 65536.0;

pub type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ZetaFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Intensity `lambda(de) = density(e) de` on the mark space `R \ {0}`.
#[derive(Clone)]
pub enum Density {
    Null,
    /// `theta e^{-beta e} / e` on `e > 0`.
    Gamma { theta: f64, beta: f64 },
    /// `theta |e|^{-1-alpha}` on both half-lines.
    SymmetricStable { theta: f64, alpha: f64 },
    /// Finite measure with point masses `(mark, mass)`.
    Atoms(Vec<(f64, f64)>),
    Custom {
        name: String,
        f: DensityFn,
        positive_only: bool,
    },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::Null => write!(f, "Null"),
            Density::Gamma { theta, beta } => write!(f, "Gamma {{ theta: {theta}, beta: {beta} }}"),
            Density::SymmetricStable { theta, alpha } => {
                write!(f, "SymmetricStable {{ theta: {theta}, alpha: {alpha} }}")
            }
            Density::Atoms(a) => write!(f, "Atoms({a:?})"),
            Density::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

/// Modulation `zeta(t, e)` of the intensity.
#[derive(Clone)]
pub enum Zeta {
    Constant(f64),
    Function(ZetaFn),
}

impl fmt::Debug for Zeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Zeta::Constant(c) => write!(f, "Constant({c})"),
            Zeta::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Zeta {
    pub fn at(&self, t: f64, e: f64) -> f64 {
        match self {
            Zeta::Constant(c) => *c,
            Zeta::Function(g) => g(t, e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevyModel {
    pub density: Density,
    pub zeta: Zeta,
    pub c_nu: f64,
}

#[derive(Debug, Clone)]
pub struct ModelReport {
    /// `int (1 ^ e^2) lambda(de)`.
    pub integrability: f64,
    /// `(eps, lambda({eps <= |e| <= 1}))` for decreasing `eps`.
    pub activity: Vec<(f64, f64)>,
    pub infinite_activity: bool,
    pub zeta_bounded: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Pos,
    Neg,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Pos => 1.0,
            Side::Neg => -1.0,
        }
    }
}

impl LevyModel {
    pub fn null() -> Self {
        Self::from_density(Density::Null)
    }

    pub fn gamma(theta: f64, beta: f64) -> Self {
        Self::from_density(Density::Gamma { theta, beta })
    }

    pub fn symmetric_stable(theta: f64, alpha: f64) -> Self {
        Self::from_density(Density::SymmetricStable { theta, alpha })
    }

    pub fn atoms(atoms: Vec<(f64, f64)>) -> Self {
        Self::from_density(Density::Atoms(atoms))
    }

    pub fn custom(name: &str, f: DensityFn, positive_only: bool) -> Self {
        Self::from_density(Density::Custom {
            name: name.to_string(),
            f,
            positive_only,
        })
    }

    fn from_density(density: Density) -> Self {
        Self {
            density,
            zeta: Zeta::Constant(1.0),
            c_nu: 1.0,
        }
    }

    pub fn with_zeta(mut self, zeta: Zeta, c_nu: f64) -> Self {
        self.zeta = zeta;
        self.c_nu = c_nu;
        self
    }

    pub fn name(&self) -> String {
        match &self.density {
            Density::Null => "null".into(),
            Density::Gamma { .. } => "gamma".into(),
            Density::SymmetricStable { .. } => "stable".into(),
            Density::Atoms(_) => "atoms".into(),
            Density::Custom { name, .. } => name.clone(),
        }
    }

    /// Density of `lambda` at mark `e` (zero for atomic measures).
    pub fn density(&self, e: f64) -> f64 {
        if e == 0.0 {
            return 0.0;
        }
        match &self.density {
            Density::Null | Density::Atoms(_) => 0.0,
            Density::Gamma { theta, beta } => {
                if e > 0.0 {
                    theta * (-beta * e).exp() / e
                } else {
                    0.0
                }
            }
            Density::SymmetricStable { theta, alpha } => theta * e.abs().powf(-1.0 - alpha),
            Density::Custom { f, positive_only, .. } => {
                if *positive_only && e < 0.0 {
                    0.0
                } else {
                    f(e)
                }
            }
        }
    }

    fn sides(&self) -> Vec<Side> {
        match &self.density {
            Density::Null | Density::Atoms(_) => vec![],
            Density::Gamma { .. } => vec![Side::Pos],
            Density::SymmetricStable { .. } => vec![Side::Neg, Side::Pos],
            Density::Custom { positive_only, .. } => {
                if *positive_only {
                    vec![Side::Pos]
                } else {
                    vec![Side::Neg, Side::Pos]
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.c_nu >= 0.0 && self.c_nu.is_finite()) {
            return bad(format!("c_nu must be finite and nonnegative, got {}", self.c_nu));
        }
        if let Zeta::Constant(c) = self.zeta {
            if !(0.0..=self.c_nu).contains(&c) {
                return bad(format!("constant zeta {c} outside [0, {}]", self.c_nu));
            }
        }
        match &self.density {
            Density::Gamma { theta, beta } => {
                if !(*theta >= 0.0 && *beta > 0.0) {
                    return bad(format!("gamma preset needs theta >= 0, beta > 0 (got {theta}, {beta})"));
                }
            }
            Density::SymmetricStable { theta, alpha } => {
                if !(*theta >= 0.0 && *alpha > 0.0 && *alpha < 2.0) {
                    return bad(format!("stable preset needs theta >= 0, 0 < alpha < 2 (got {theta}, {alpha})"));
                }
            }
            Density::Atoms(atoms) => {
                if let Some((e, w)) = atoms.iter().find(|(e, w)| *e == 0.0 || !e.is_finite() || !(*w >= 0.0)) {
                    return bad(format!("invalid atom ({e}, {w})"));
                }
            }
            Density::Null | Density::Custom { .. } => {}
        }
        Ok(())
    }

    /// Mass of `lambda` on `{lo <= |e| <= hi}` for `0 < lo < hi < inf`.
    fn band_mass(&self, lo: f64, hi: f64) -> Result<f64> {
        if let Density::Atoms(atoms) = &self.density {
            return Ok(atoms
                .iter()
                .filter(|(e, _)| e.abs() >= lo && e.abs() <= hi)
                .map(|(_, w)| w)
                .sum());
        }
        let mut total = 0.0;
        for side in self.sides() {
            let s = side.sign();
            total += integrate(|e| self.density(s * e), lo, hi, Tolerance::default())?.value;
        }
        Ok(total)
    }

    /// Mass of `lambda` on `{|e| >= a}`.
    pub fn tail_mass(&self, a: f64) -> Result<f64> {
        if let Density::Atoms(atoms) = &self.density {
            return Ok(atoms.iter().filter(|(e, _)| e.abs() >= a).map(|(_, w)| w).sum());
        }
        let mut total = 0.0;
        for side in self.sides() {
            total += self.side_tail(side, a)?;
        }
        Ok(total)
    }

    fn side_tail(&self, side: Side, a: f64) -> Result<f64> {
        let s = side.sign();
        integrate_to_infinity(|e| self.density(s * e), a, Tolerance::default())
            .map(|est| est.value)
            .map_err(|_| Error::DivergentMass { threshold: a })
    }

    /// Checks integrability, infinite activity and the bound on `zeta`.
    pub fn check_invariants(&self) -> Result<ModelReport> {
        self.validate()?;
        let integrability = match &self.density {
            Density::Atoms(atoms) => atoms.iter().map(|(e, w)| w * e.abs().powi(2).min(1.0)).sum(),
            _ => {
                let mut total = 0.0;
                for side in self.sides() {
                    let s = side.sign();
                    total += integrate(|e| e * e * self.density(s * e), 0.0, 1.0, Tolerance::default())
                        .map_err(|_| Error::DivergentMass { threshold: 0.0 })?
                        .value;
                    total += self.side_tail(side, 1.0)?;
                }
                total
            }
        };
        let mut activity = Vec::new();
        for k in 1..=6 {
            let eps = 10f64.powi(-k);
            activity.push((eps, self.band_mass(eps, 1.0)?));
        }
        let first = activity[0].1;
        let last = activity[activity.len() - 1].1;
        let infinite_activity =
            activity.windows(2).all(|w| w[1].1 > w[0].1) && last > 2.0 * first && last > 0.0;

        let mut zeta_bounded = true;
        for i in 0..=20 {
            let t = i as f64 * 0.5;
            for j in -20..=20 {
                let e = if j == 0 { 1e-6 } else { j as f64 * 0.25 };
                let z = self.zeta.at(t, e);
                if !(z >= 0.0 && z <= self.c_nu) {
                    zeta_bounded = false;
                }
            }
        }
        Ok(ModelReport {
            integrability,
            activity,
            infinite_activity,
            zeta_bounded,
        })
    }

    /// Largest body edge: the smallest power of two past which the tail holds
    /// at most a small fraction of the mass beyond 1.
    fn body_edge(&self) -> Result<f64> {
        let reference = self.tail_mass(1.0)?;
        let mut edge = 1.0;
        while edge < MAX_BODY_EDGE {
            if self.tail_mass(edge)? <= TAIL_RATIO * reference {
                break;
            }
            edge *= 2.0;
        }
        Ok(edge)
    }
}

/// Nodes and weights discretizing `lambda` restricted to `{|e| >= 1/kappa}`.
#[derive(Debug, Clone)]
pub struct MarkQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    kappa: f64,
    zeta: Zeta,
}

impl MarkQuadrature {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>, kappa: f64) -> Result<Self> {
        if nodes.len() != weights.len() {
            return Err(Error::MisalignedField {
                expected: nodes.len(),
                got: weights.len(),
            });
        }
        if !(kappa >= 1.0) {
            return Err(Error::InvalidParameter(format!("kappa must be >= 1, got {kappa}")));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!("weight {w} is not a finite nonnegative number")));
        }
        let cut = 1.0 / kappa;
        if let Some(e) = nodes.iter().find(|e| !(e.abs() * (1.0 + 1e-12) >= cut)) {
            return Err(Error::InvalidParameter(format!("node {e} lies inside the truncated region |e| < {cut}")));
        }
        Ok(Self {
            nodes,
            weights,
            kappa,
            zeta: Zeta::Constant(1.0),
        })
    }

    pub fn with_zeta(mut self, zeta: Zeta) -> Self {
        self.zeta = zeta;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn zeta(&self) -> &Zeta {
        &self.zeta
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `zeta(t, e_i)` at every node.
    pub fn zeta_at(&self, t: f64) -> Vec<f64> {
        self.nodes.iter().map(|&e| self.zeta.at(t, e)).collect()
    }

    /// Node masses of `nu` at time `t`: `w_i zeta(t, e_i)`.
    pub fn omega(&self, t: f64) -> Vec<f64> {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&e, &w)| w * self.zeta.at(t, e))
            .collect()
    }

    /// Nodes kept by the truncation at level `kappa`.
    pub fn active(&self, kappa: f64) -> Vec<bool> {
        let cut = 1.0 / kappa;
        self.nodes.iter().map(|e| e.abs() * (1.0 + 1e-12) >= cut).collect()
    }

    /// Weights with nodes below `1/kappa` set to zero.
    pub fn restricted_weights(&self, kappa: f64) -> Vec<f64> {
        self.active(kappa)
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| if a { w } else { 0.0 })
            .collect()
    }

    /// Sub-quadrature on `{|e| >= 1/kappa}` (requires `kappa <= self.kappa`).
    pub fn restrict(&self, kappa: f64) -> Result<Self> {
        if kappa > self.kappa * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "cannot restrict a kappa={} quadrature to finer level {kappa}",
                self.kappa
            )));
        }
        let mask = self.active(kappa);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for i in 0..self.len() {
            if mask[i] {
                nodes.push(self.nodes[i]);
                weights.push(self.weights[i]);
            }
        }
        Ok(MarkQuadrature::new(nodes, weights, kappa)?.with_zeta(self.zeta.clone()))
    }
}

/// Builds a quadrature for `lambda` on `{|e| >= 1/kappa}` with roughly `q_nodes` nodes.
///
/// Cells follow dyadic bands (edges at powers of two and at `1/kappa`), so
/// quadratures at dyadic levels are nested.
pub fn build_quadrature(model: &LevyModel, kappa: f64, q_nodes: usize) -> Result<MarkQuadrature> {
    if q_nodes < 2 {
        return Err(Error::InvalidParameter(format!("q_nodes must be >= 2, got {q_nodes}")));
    }
    model.validate()?;
    let sides = model.sides().len().max(1);
    let per_side = (q_nodes / sides).max(1);
    let bands = if matches!(model.density, Density::Null | Density::Atoms(_)) {
        1
    } else {
        band_edges(1.0 / kappa, model.body_edge()?).len().saturating_sub(1).max(1)
    };
    let cells = (per_side.saturating_sub(1)).div_ceil(bands).max(1);
    build_quadrature_banded(model, kappa, cells)
}

/// Builds a quadrature with `cells_per_band` geometric cells in every dyadic band.
pub fn build_quadrature_banded(model: &LevyModel, kappa: f64, cells_per_band: usize) -> Result<MarkQuadrature> {
    model.validate()?;
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa must be finite and >= 1, got {kappa}")));
    }
    if cells_per_band == 0 {
        return Err(Error::InvalidParameter("cells_per_band must be positive".into()));
    }
    let cut = 1.0 / kappa;
    if let Density::Atoms(atoms) = &model.density {
        let mut kept: Vec<(f64, f64)> = atoms
            .iter()
            .cloned()
            .filter(|(e, w)| e.abs() * (1.0 + 1e-12) >= cut && *w > 0.0)
            .collect();
        kept.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nodes, weights) = kept.into_iter().unzip();
        return Ok(MarkQuadrature::new(nodes, weights, kappa)?.with_zeta(model.zeta.clone()));
    }
    let sides = model.sides();
    if sides.is_empty() {
        return Ok(MarkQuadrature::new(vec![], vec![], kappa)?.with_zeta(model.zeta.clone()));
    }
    let top = model.body_edge()?.max(cut);
    let edges = band_edges(cut, top);

    let mut cells: Vec<(f64, f64)> = Vec::new();
    for w in edges.windows(2) {
        let ratio = w[1] / w[0];
        for i in 0..cells_per_band {
            let lo = w[0] * ratio.powf(i as f64 / cells_per_band as f64);
            let hi = if i + 1 == cells_per_band {
                w[1]
            } else {
                w[0] * ratio.powf((i + 1) as f64 / cells_per_band as f64)
            };
            cells.push((lo, hi));
        }
    }

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for side in sides {
        let s = side.sign();
        let dens = |e: f64| model.density(s * e);
        for &(lo, hi) in &cells {
            let w = integrate(dens, lo, hi, Tolerance::default())?.value;
            if w > 0.0 {
                pairs.push((s * (lo * hi).sqrt(), w));
            }
        }
        let tail = model.side_tail(side, top)?;
        if tail > 0.0 {
            let median = tail_median(&dens, top, tail)?;
            pairs.push((s * median, tail));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    Ok(MarkQuadrature::new(nodes, weights, kappa)?.with_zeta(model.zeta.clone()))
}

fn band_edges(cut: f64, top: f64) -> Vec<f64> {
    let mut edges = vec![cut];
    if top <= cut {
        return edges;
    }
    let mut p = 2f64.powi(cut.log2().floor() as i32);
    while p <= cut * (1.0 + 1e-12) {
        p *= 2.0;
    }
    while p < top * (1.0 - 1e-12) {
        edges.push(p);
        p *= 2.0;
    }
    edges.push(top);
    edges
}

/// Point `x > a` splitting the tail mass beyond `a` in half.
fn tail_median<F: Fn(f64) -> f64>(dens: &F, a: f64, tail: f64) -> Result<f64> {
    let half = 0.5 * tail;
    let mass = |x: f64| integrate(dens, a, x, Tolerance::default()).map(|e| e.value);
    let mut lo = a;
    let mut hi = 2.0 * a;
    let mut steps = 0;
    while mass(hi)? < half {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > 1000 {
            return Err(Error::DivergentMass { threshold: a });
        }
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if mass(mid)? < half {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-10 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Jump integrand evaluated at the quadrature marks.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpField {
    pub values: Vec<f64>,
}

impl JumpField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(q: usize) -> Self {
        Self { values: vec![0.0; q] }
    }

    pub fn constant(q: usize, c: f64) -> Self {
        Self { values: vec![c; q] }
    }

    pub fn check_aligned(&self, quad: &MarkQuadrature) -> Result<()> {
        if self.values.len() != quad.len() {
            return Err(Error::MisalignedField {
                expected: quad.len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }

    /// `|u|_nu` with node masses `omega`.
    pub fn nu_norm(&self, omega: &[f64]) -> f64 {
        weighted_norm(&self.values, omega)
    }
}

pub fn weighted_norm(u: &[f64], omega: &[f64]) -> f64 {
    u.iter().zip(omega).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
}

/// `e^x - x - 1` without cancellation near zero.
pub fn expm1_minus_x(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        let x2 = x * x;
        x2 * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0)))
    } else {
        x.exp_m1() - x
    }
}

/// `sum_i omega_i (e^{delta u_i} - delta u_i - 1)`.
pub fn j_sum(u: &[f64], delta: f64, omega: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&v, &w) in u.iter().zip(omega) {
        if w == 0.0 {
            continue;
        }
        let x = delta * v;
        if x > J_EXPONENT_CAP {
            return Err(Error::JOverflow {
                exponent: x,
                cap: J_EXPONENT_CAP,
            });
        }
        total += w * expm1_minus_x(x);
    }
    Ok(total)
}

/// `j(delta u) = int (e^{delta u} - delta u - 1) d nu` on the quadrature.
pub fn j_functional(u: &JumpField, delta: f64, quad: &MarkQuadrature, zeta_at_nodes: &[f64]) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    u.check_aligned(quad)?;
    if zeta_at_nodes.len() != quad.len() {
        return Err(Error::MisalignedField {
            expected: quad.len(),
            got: zeta_at_nodes.len(),
        });
    }
    let omega: Vec<f64> = quad.weights().iter().zip(zeta_at_nodes).map(|(w, z)| w * z).collect();
    j_sum(&u.values, delta, &omega)
}

/// `int_{|e| < 1/kappa} e^2 lambda(de)`: second moment of the dropped small jumps.
pub fn small_jump_residual(model: &LevyModel, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
    }
    let cut = 1.0 / kappa;
    if let Density::Atoms(atoms) = &model.density {
        return Ok(atoms.iter().filter(|(e, _)| e.abs() < cut).map(|(e, w)| w * e * e).sum());
    }
    let mut total = 0.0;
    for side in model.sides() {
        let s = side.sign();
        total += integrate(|e| e * e * model.density(s * e), 0.0, cut, Tolerance::default())?.value;
    }
    Ok(total)
}

/// Compound-Poisson jumps per path, indexed both by path and by grid interval.
#[derive(Debug, Clone)]
pub struct JumpTable {
    n_paths: usize,
    steps: usize,
    path_offsets: Vec<usize>,
    times: Vec<f64>,
    marks: Vec<u32>,
    intervals: Vec<u32>,
    interval_offsets: Vec<usize>,
    by_interval: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub mark: usize,
    pub interval: usize,
}

impl JumpTable {
    fn assemble(n_paths: usize, steps: usize, per_path: Vec<Vec<Jump>>) -> Self {
        let mut path_offsets = Vec::with_capacity(n_paths + 1);
        let total: usize = per_path.iter().map(|v| v.len()).sum();
        let mut times = Vec::with_capacity(total);
        let mut marks = Vec::with_capacity(total);
        let mut intervals = Vec::with_capacity(total);
        path_offsets.push(0);
        for jumps in &per_path {
            for j in jumps {
                times.push(j.time);
                marks.push(j.mark as u32);
                intervals.push(j.interval as u32);
            }
            path_offsets.push(times.len());
        }
        let mut counts = vec![0usize; steps + 1];
        for &k in &intervals {
            counts[k as usize + 1] += 1;
        }
        for k in 0..steps {
            counts[k + 1] += counts[k];
        }
        let interval_offsets = counts.clone();
        let mut cursor = counts;
        let mut by_interval = vec![(0u32, 0u32); total];
        for p in 0..n_paths {
            for idx in path_offsets[p]..path_offsets[p + 1] {
                let k = intervals[idx] as usize;
                by_interval[cursor[k]] = (p as u32, marks[idx]);
                cursor[k] += 1;
            }
        }
        Self {
            n_paths,
            steps,
            path_offsets,
            times,
            marks,
            intervals,
            interval_offsets,
            by_interval,
        }
    }

    pub fn empty(n_paths: usize, steps: usize) -> Self {
        Self::assemble(n_paths, steps, vec![Vec::new(); n_paths])
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn total_jumps(&self) -> usize {
        self.times.len()
    }

    pub fn path_jumps(&self, p: usize) -> impl Iterator<Item = Jump> + '_ {
        (self.path_offsets[p]..self.path_offsets[p + 1]).map(move |i| Jump {
            time: self.times[i],
            mark: self.marks[i] as usize,
            interval: self.intervals[i] as usize,
        })
    }

    /// `(path, mark)` pairs of every jump in `(t_k, t_{k+1}]`, ordered by path.
    pub fn interval_jumps(&self, k: usize) -> &[(u32, u32)] {
        &self.by_interval[self.interval_offsets[k]..self.interval_offsets[k + 1]]
    }

    /// Drops jumps whose mark index is not kept.
    pub fn thinned(&self, keep: &[bool]) -> Self {
        let per_path = (0..self.n_paths)
            .map(|p| self.path_jumps(p).filter(|j| keep[j.mark]).collect())
            .collect();
        Self::assemble(self.n_paths, self.steps, per_path)
    }

    /// Writes `path_id,interval_index,jump_time,mark_index` rows for the given paths.
    pub fn write_csv<W: Write>(&self, mut out: W, paths: impl IntoIterator<Item = usize>) -> Result<()> {
        writeln!(out, "path_id,interval_index,jump_time,mark_index")?;
        for p in paths {
            for j in self.path_jumps(p) {
                writeln!(out, "{},{},{:.16e},{}", p, j.interval, j.time, j.mark)?;
            }
        }
        Ok(())
    }
}

/// Simulates the jumps of `nu` restricted to the quadrature marks.
///
/// Arrivals come from a Poisson clock at rate `c_nu * sum(w)` thinned by
/// `zeta(t, e)/c_nu`; every path uses its own ChaCha stream so the table does
/// not depend on the thread count.
pub fn sample_jump_paths(
    model: &LevyModel,
    quad: &MarkQuadrature,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<JumpTable> {
    let steps = grid.steps();
    let mass = quad.total_mass();
    let rate = mass * model.c_nu;
    if !(rate > 0.0) || n_paths == 0 {
        return Ok(JumpTable::empty(n_paths, steps));
    }
    if !rate.is_finite() {
        return Err(Error::DivergentMass {
            threshold: 1.0 / quad.kappa(),
        });
    }
    let mut cumulative = Vec::with_capacity(quad.len());
    let mut acc = 0.0;
    for &w in quad.weights() {
        acc += w;
        cumulative.push(acc);
    }
    let always_accept = matches!(model.zeta, Zeta::Constant(c) if c == model.c_nu);
    let horizon = grid.horizon();
    let clock = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let per_path: Vec<Vec<Jump>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ JUMP_SALT);
            rng.set_stream(p as u64);
            let mut jumps = Vec::new();
            let mut t = 0.0;
            loop {
                t += clock.sample(&mut rng);
                if t > horizon {
                    break;
                }
                let x: f64 = rng.random::<f64>() * acc;
                let mark = cumulative.partition_point(|&c| c <= x).min(quad.len() - 1);
                if !always_accept {
                    let accept: f64 = rng.random();
                    if accept * model.c_nu > model.zeta.at(t, quad.nodes()[mark]) {
                        continue;
                    }
                }
                jumps.push(Jump {
                    time: t,
                    mark,
                    interval: grid.interval_of(t),
                });
            }
            jumps
        })
        .collect();
    Ok(JumpTable::assemble(n_paths, steps, per_path))
}
