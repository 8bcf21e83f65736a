//! Quadratic-exponential drivers, their structure bounds, the `A_gamma`
//! condition and the Lipschitz regularization `f^{n,m,kappa}`.
//!
//! Drivers are separable, `f = h_y(y) + h_z(z) + sum_i omega_i g(u_i)`, which
//! makes the inf-convolution envelopes computable in closed form (piecewise
//! linear and quadratic parts) or by a one-dimensional search (mark part).
//! A brute-force grid route is kept for cross-checks and arbitrary functions.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::integrate::{integrate, Tolerance};
use crate::levy::{expm1_minus_x, j_sum, JumpField, MarkQuadrature};

/// Deterministic nonnegative function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFn {
    Constant(f64),
    /// `a + b t`.
    Affine { a: f64, b: f64 },
    /// Piecewise linear through `(times[i], values[i])`, flat outside.
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl TimeFn {
    pub fn zero() -> Self {
        TimeFn::Constant(0.0)
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            TimeFn::Constant(c) => *c,
            TimeFn::Affine { a, b } => a + b * t,
            TimeFn::Table { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let k = times.partition_point(|&s| s <= t);
                if k >= times.len() {
                    return values[values.len() - 1];
                }
                let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
        }
    }

    /// `int_s^t value(r) dr`.
    pub fn integral(&self, s: f64, t: f64) -> f64 {
        match self {
            TimeFn::Constant(c) => c * (t - s),
            TimeFn::Affine { a, b } => a * (t - s) + 0.5 * b * (t * t - s * s),
            TimeFn::Table { times, .. } => {
                // exact for piecewise linear: integrate piece by piece at the knots
                let mut knots = vec![s];
                knots.extend(times.iter().cloned().filter(|&k| k > s && k < t));
                knots.push(t);
                knots.windows(2).map(|w| 0.5 * (self.at(w[0]) + self.at(w[1])) * (w[1] - w[0])).sum()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TimeFn::Constant(c) => *c == 0.0,
            TimeFn::Affine { a, b } => *a == 0.0 && *b == 0.0,
            TimeFn::Table { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(format!("{name}: {msg}")));
        match self {
            TimeFn::Constant(c) if !(*c >= 0.0 && c.is_finite()) => bad(format!("value {c} must be nonnegative")),
            TimeFn::Affine { a, b } if !(*a >= 0.0 && *b >= 0.0) => {
                bad(format!("a + b t needs a, b >= 0 (got {a}, {b})"))
            }
            TimeFn::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return bad("table needs matching nonempty times and values".into());
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return bad("table times must increase".into());
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return bad("table values must be nonnegative".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// `delta`, `l_t`, `c_t` of the structure condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub delta: f64,
    pub l: TimeFn,
    pub c: TimeFn,
}

impl StructureParams {
    pub fn new(delta: f64, l: TimeFn, c: TimeFn) -> Result<Self> {
        let p = Self { delta, l, c };
        p.validate()?;
        Ok(p)
    }

    pub fn pure(delta: f64) -> Self {
        Self {
            delta,
            l: TimeFn::zero(),
            c: TimeFn::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be positive, got {}", self.delta)));
        }
        self.l.validate("l")?;
        self.c.validate("c")
    }

    /// `Lambda_t = int_0^t l_s ds`.
    pub fn lambda(&self, t: f64) -> f64 {
        self.l.integral(0.0, t)
    }

    /// `C_t = int_0^t c_s ds`.
    pub fn big_c(&self, t: f64) -> f64 {
        self.c.integral(0.0, t)
    }

    /// `C_{s,t} = C_t - C_s`.
    pub fn c_between(&self, s: f64, t: f64) -> f64 {
        self.c.integral(s, t)
    }

    /// `int_s^t e^{C_{s,r}} d Lambda_r`.
    pub fn discounted_lambda(&self, s: f64, t: f64) -> f64 {
        if self.l.is_zero() || t <= s {
            return 0.0;
        }
        if self.c.is_zero() {
            return self.l.integral(s, t);
        }
        integrate(|r| self.c_between(s, r).exp() * self.l.at(r), s, t, Tolerance::default())
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
    }

    /// Discrete counterparts of `e^{C_t}` and `int_0^t e^{C_s} dLambda_s` for the implicit
    /// backward step: `G_k = prod_{j<k} 1/(1 - c_j dt_j)` and `D_k = sum_{j<k} G_{j+1} l_j dt_j`.
    /// With these, `G_k |Y_k| + D_k` is an exact discrete submartingale whenever
    /// `|f| <= l + c|y|` plus the exponential terms, and both converge to the continuous forms.
    pub fn discrete_gronwall(&self, grid: &TimeGrid) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = grid.steps() + 1;
        let mut g = vec![1.0; rows];
        let mut d = vec![0.0; rows];
        for j in 0..grid.steps() {
            let (t, dt) = (grid.t(j), grid.dt(j));
            let product = self.c.at(t) * dt;
            if product >= 1.0 {
                return Err(Error::NonContraction { product });
            }
            g[j + 1] = g[j] / (1.0 - product);
            d[j + 1] = d[j] + g[j + 1] * self.l.at(t) * dt;
        }
        Ok((g, d))
    }
}

/// Common interface of base and regularized drivers.
///
/// `omega` holds the node masses `w_i zeta(t, e_i)` of the full quadrature the
/// jump fields are aligned with.
pub trait Generator: Send + Sync {
    fn eval(&self, t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64>;

    /// The `y`-dependent summand when the driver is additively separable in `y`.
    fn y_part(&self, _t: f64, _y: f64) -> Option<f64> {
        None
    }

    /// Global Lipschitz constant in `y`, if known.
    fn y_lipschitz(&self) -> Option<f64>;

    fn depends_on_y(&self) -> bool {
        self.y_lipschitz() != Some(0.0)
    }

    /// Upper clamp of the `A_gamma` density.
    fn gamma_cap(&self) -> f64 {
        f64::INFINITY
    }

    fn label(&self) -> String;
}

/// `a y - beta |y|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YPart {
    pub a: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZPart {
    Zero,
    /// `(q/2) |z|^2`.
    Quadratic { q: f64 },
    /// `b . z`.
    Linear { b: Vec<f64> },
}

/// Integrand `g` applied to each mark value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkPart {
    Zero,
    /// `(e^{delta v} - delta v - 1) / delta`.
    Exponential { delta: f64 },
    /// `c v`.
    Linear { c: f64 },
}

pub type CustomFn = Arc<dyn Fn(f64, f64, &[f64], &[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Form {
    Separable { y: YPart, z: ZPart, mark: MarkPart },
    Custom { f: CustomFn, y_lipschitz: Option<f64> },
}

#[derive(Clone)]
pub struct Driver {
    name: String,
    form: Form,
    pub params: StructureParams,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.form {
            Form::Separable { y, z, mark } => f
                .debug_struct("Driver")
                .field("name", &self.name)
                .field("y", y)
                .field("z", z)
                .field("mark", mark)
                .field("params", &self.params)
                .finish(),
            Form::Custom { .. } => write!(f, "Driver({}, custom)", self.name),
        }
    }
}

impl Driver {
    pub fn separable(name: &str, y: YPart, z: ZPart, mark: MarkPart, params: StructureParams) -> Result<Self> {
        params.validate()?;
        if let MarkPart::Exponential { delta } = mark {
            if !(delta > 0.0) {
                return Err(Error::InvalidParameter(format!("exponential mark part needs delta > 0, got {delta}")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            form: Form::Separable { y, z, mark },
            params,
        })
    }

    /// Arbitrary driver, usable by the solver and the grid envelopes only.
    pub fn custom(name: &str, f: CustomFn, params: StructureParams, y_lipschitz: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            form: Form::Custom { f, y_lipschitz },
            params,
        }
    }

    /// `f = 0`.
    pub fn zero() -> Self {
        Self::separable(
            "zero",
            YPart { a: 0.0, beta: 0.0 },
            ZPart::Zero,
            MarkPart::Zero,
            StructureParams::pure(1.0),
        )
        .expect("valid preset")
    }

    /// `(delta/2)|z|^2 + (1/delta) j(delta u)`.
    pub fn canonical(delta: f64) -> Result<Self> {
        Self::separable(
            "canonical",
            YPart { a: 0.0, beta: 0.0 },
            ZPart::Quadratic { q: delta },
            MarkPart::Exponential { delta },
            StructureParams::pure(delta),
        )
    }

    /// Canonical driver minus `beta |y|`.
    pub fn morlais(delta: f64, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be nonnegative, got {beta}")));
        }
        Self::separable(
            "morlais",
            YPart { a: 0.0, beta },
            ZPart::Quadratic { q: delta },
            MarkPart::Exponential { delta },
            StructureParams::new(delta, TimeFn::zero(), TimeFn::Constant(beta))?,
        )
    }

    /// `a y + b . z + int c u d nu` with the smallest constant `(l, c)` for the given `delta`.
    pub fn linear(a: f64, b: Vec<f64>, c: f64, delta: f64, nu_mass: f64) -> Result<Self> {
        let params = linear_structure(a, &b, c, delta, nu_mass)?;
        Self::separable(
            "linear",
            YPart { a, beta: 0.0 },
            if b.iter().all(|x| *x == 0.0) {
                ZPart::Zero
            } else {
                ZPart::Linear { b }
            },
            if c == 0.0 { MarkPart::Zero } else { MarkPart::Linear { c } },
            params,
        )
    }

    /// Whether the negative part, and its jump term, vanish identically.
    /// `None` for custom drivers.
    pub fn negative_nullity(&self) -> Option<(bool, bool)> {
        let (y, z, mark) = self.parts()?;
        let (_, neg) = split(y, z, mark);
        Some((neg.is_null(), neg.mark_is_null()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.form, Form::Separable { .. })
    }

    pub fn parts(&self) -> Option<(&YPart, &ZPart, &MarkPart)> {
        match &self.form {
            Form::Separable { y, z, mark } => Some((y, z, mark)),
            Form::Custom { .. } => None,
        }
    }

    /// `f_t(y, z, u)` with `u` integrated against the masses `omega`.
    pub fn value(&self, t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        match &self.form {
            Form::Separable { y: yp, z: zp, mark } => {
                Ok(y_value(yp, y) + z_value(zp, z) + mark_value(mark, u, omega)?)
            }
            Form::Custom { f, .. } => Ok(f(t, y, z, u, omega)),
        }
    }

    /// Sum of positive parts of the three summands.
    pub fn positive_part(&self, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        let (yp, zp, mp) = self.parts().ok_or_else(|| Error::Unsupported("custom driver split".into()))?;
        let (pos, _) = split(yp, zp, mp);
        Ok(pos.value_raw(y, z, u, omega))
    }

    /// Sum of negative parts of the three summands.
    pub fn negative_part(&self, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        let (yp, zp, mp) = self.parts().ok_or_else(|| Error::Unsupported("custom driver split".into()))?;
        let (_, neg) = split(yp, zp, mp);
        Ok(neg.value_raw(y, z, u, omega))
    }
}

impl Generator for Driver {
    fn eval(&self, t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        self.value(t, y, z, u, omega)
    }

    fn y_part(&self, _t: f64, y: f64) -> Option<f64> {
        match &self.form {
            Form::Separable { y: yp, .. } => Some(y_value(yp, y)),
            Form::Custom { .. } => None,
        }
    }

    fn y_lipschitz(&self) -> Option<f64> {
        match &self.form {
            Form::Separable { y, .. } => Some((y.a - y.beta).abs().max((y.a + y.beta).abs())),
            Form::Custom { y_lipschitz, .. } => *y_lipschitz,
        }
    }

    fn label(&self) -> String {
        self.name.clone()
    }
}

fn y_value(p: &YPart, y: f64) -> f64 {
    p.a * y - p.beta * y.abs()
}

fn z_value(p: &ZPart, z: &[f64]) -> f64 {
    match p {
        ZPart::Zero => 0.0,
        ZPart::Quadratic { q } => 0.5 * q * z.iter().map(|x| x * x).sum::<f64>(),
        ZPart::Linear { b } => b.iter().zip(z).map(|(b, z)| b * z).sum(),
    }
}

fn mark_value(p: &MarkPart, u: &[f64], omega: &[f64]) -> Result<f64> {
    match p {
        MarkPart::Zero => Ok(0.0),
        MarkPart::Exponential { delta } => Ok(j_sum(u, *delta, omega)? / delta),
        MarkPart::Linear { c } => Ok(c * u.iter().zip(omega).map(|(u, w)| u * w).sum::<f64>()),
    }
}

/// Smallest constant structure parameters of the linear driver.
///
/// `b.z <= (delta/2)|z|^2 + |b|^2/(2 delta)` and
/// `c v <= (e^{delta v} - delta v - 1)/delta + ((1+c) ln(1+c) - c)/delta`,
/// the same constant bounding the lower side.
pub fn linear_structure(a: f64, b: &[f64], c: f64, delta: f64, nu_mass: f64) -> Result<StructureParams> {
    if c != 0.0 && !(c > -1.0) {
        return Err(Error::InvalidParameter(format!(
            "linear mark coefficient must exceed -1, got {c}"
        )));
    }
    if !(nu_mass >= 0.0 && nu_mass.is_finite()) {
        return Err(Error::InvalidParameter(format!("nu mass must be finite, got {nu_mass}")));
    }
    let b2: f64 = b.iter().map(|x| x * x).sum();
    let mark_const = if c == 0.0 { 0.0 } else { ((1.0 + c) * c.ln_1p() - c) / delta };
    StructureParams::new(
        delta,
        TimeFn::Constant(b2 / (2.0 * delta) + nu_mass * mark_const),
        TimeFn::Constant(a.abs()),
    )
}

/// `(q_lower, q_upper)` of the structure condition with masses `omega`.
pub fn structure_bounds_omega(
    t: f64,
    y: f64,
    z: &[f64],
    u: &[f64],
    params: &StructureParams,
    omega: &[f64],
) -> Result<(f64, f64)> {
    let d = params.delta;
    let z2: f64 = z.iter().map(|x| x * x).sum();
    let base = 0.5 * d * z2 + params.l.at(t) + params.c.at(t) * y.abs();
    let up = j_sum(u, d, omega)? / d;
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let down = j_sum(&neg, d, omega)? / d;
    Ok((-down - base, up + base))
}

pub fn structure_bounds(
    t: f64,
    y: f64,
    z: &[f64],
    u: &JumpField,
    params: &StructureParams,
    quad: &MarkQuadrature,
) -> Result<(f64, f64)> {
    u.check_aligned(quad)?;
    structure_bounds_omega(t, y, z, &u.values, params, &quad.omega(t))
}

/// Point `(t, y, z, u)` at which driver properties are probed.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub t: f64,
    pub y: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

/// Uniform probes in `[0,T] x [-scale,scale]^(1+d+q)`.
pub fn random_probes(count: usize, d: usize, q: usize, horizon: f64, scale: f64, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Probe {
            t: rng.random::<f64>() * horizon,
            y: rng.random_range(-scale..scale),
            z: (0..d).map(|_| rng.random_range(-scale..scale)).collect(),
            u: (0..q).map(|_| rng.random_range(-scale..scale)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct StructureReport {
    pub checked: usize,
    pub violations: Vec<usize>,
    pub max_excess: f64,
}

/// Probes where the generator leaves `[q_lower - tol, q_upper + tol]`.
pub fn check_structure_with(
    gen: &dyn Generator,
    params: &StructureParams,
    probes: &[Probe],
    quad: &MarkQuadrature,
) -> Result<StructureReport> {
    let mut report = StructureReport {
        checked: probes.len(),
        ..Default::default()
    };
    for (i, p) in probes.iter().enumerate() {
        if p.u.len() != quad.len() {
            return Err(Error::MisalignedField {
                expected: quad.len(),
                got: p.u.len(),
            });
        }
        let omega = quad.omega(p.t);
        let f = gen.eval(p.t, p.y, &p.z, &p.u, &omega)?;
        let (lo, hi) = structure_bounds_omega(p.t, p.y, &p.z, &p.u, params, &omega)?;
        let tol = 1e-9 * (1.0 + hi.abs());
        let excess = (f - hi).max(lo - f);
        if excess > tol {
            report.violations.push(i);
        }
        report.max_excess = report.max_excess.max(excess);
    }
    Ok(report)
}

pub fn check_structure(driver: &Driver, probes: &[Probe], quad: &MarkQuadrature) -> Result<StructureReport> {
    check_structure_with(driver, &driver.params, probes, quad)
}

// ---------------------------------------------------------------------------
// Envelopes on explicit candidate grids.

/// Candidate point `(y, z, u)` for grid envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub y: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

impl Point {
    pub fn scalar(y: f64) -> Self {
        Self {
            y,
            z: vec![],
            u: vec![],
        }
    }
}

/// `|dy| + |dz| + |du|_nu`.
pub fn distance(a: &Point, b: &Point, omega: &[f64]) -> f64 {
    let dz: f64 = a.z.iter().zip(&b.z).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let du: f64 = a
        .u
        .iter()
        .zip(&b.u)
        .zip(omega)
        .map(|((x, y), w)| w * (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    (a.y - b.y).abs() + dz + du
}

/// `min_c phi(c) + n d(c, point)` over the grid; ties go to the first candidate.
pub fn inf_convolve_argmin<F: Fn(&Point) -> f64>(
    phi: F,
    n: f64,
    point: &Point,
    grid: &[Point],
    omega: &[f64],
) -> Result<(f64, usize)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best = (f64::INFINITY, 0);
    for (i, c) in grid.iter().enumerate() {
        let v = phi(c) + n * distance(c, point, omega);
        if v < best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

pub fn inf_convolve<F: Fn(&Point) -> f64>(phi: F, n: f64, point: &Point, grid: &[Point], omega: &[f64]) -> Result<f64> {
    inf_convolve_argmin(phi, n, point, grid, omega).map(|r| r.0)
}

/// `max_c phi(c) - m d(c, point)` over the grid.
pub fn sup_convolve<F: Fn(&Point) -> f64>(phi: F, m: f64, point: &Point, grid: &[Point], omega: &[f64]) -> Result<f64> {
    inf_convolve(|c| -phi(c), m, point, grid, omega).map(|v| -v)
}

/// Evaluates the grid envelope on successively refined grids until two
/// consecutive values differ by less than `tol`.
pub fn refine_until_stable<F, G>(
    phi: F,
    n: f64,
    point: &Point,
    omega: &[f64],
    make_grid: G,
    tol: f64,
    max_level: usize,
) -> Result<(f64, usize)>
where
    F: Fn(&Point) -> f64,
    G: Fn(usize) -> Vec<Point>,
{
    let mut last = inf_convolve(&phi, n, point, &make_grid(0), omega)?;
    for level in 1..=max_level {
        let v = inf_convolve(&phi, n, point, &make_grid(level), omega)?;
        if (v - last).abs() < tol {
            return Ok((v, level));
        }
        last = v;
    }
    Err(Error::Integration(format!(
        "grid envelope not stable to {tol} after {max_level} refinements"
    )))
}

/// Uniform one-dimensional candidate grid on `[lo, hi]`.
pub fn scalar_grid(lo: f64, hi: f64, count: usize) -> Vec<Point> {
    (0..count)
        .map(|i| Point::scalar(lo + (hi - lo) * i as f64 / (count - 1).max(1) as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Closed-form envelopes of the separable presets.

/// Convex node integrand of a positive or negative part.
#[derive(Debug, Clone, Copy, PartialEq)]
enum NodeFn {
    /// `(e^{d v} - d v - 1) / |d|`.
    Exp { d: f64 },
    /// `a max(v, 0)`.
    Pos { a: f64 },
    /// `a max(-v, 0)`.
    Neg { a: f64 },
}

impl NodeFn {
    fn value(self, v: f64) -> f64 {
        match self {
            NodeFn::Exp { d } => expm1_minus_x(d * v) / d.abs(),
            NodeFn::Pos { a } => a * v.max(0.0),
            NodeFn::Neg { a } => a * (-v).max(0.0),
        }
    }

    /// Minimum-norm subgradient.
    fn slope(self, v: f64) -> f64 {
        match self {
            NodeFn::Exp { d } => d.signum() * (d * v).exp_m1(),
            NodeFn::Pos { a } => {
                if v > 0.0 {
                    a
                } else {
                    0.0
                }
            }
            NodeFn::Neg { a } => {
                if v < 0.0 {
                    -a
                } else {
                    0.0
                }
            }
        }
    }

    /// `argmin_v value(v) + (s/2)(v - u)^2`.
    fn prox(self, u: f64, s: f64) -> f64 {
        match self {
            NodeFn::Pos { a } => {
                if u > a / s {
                    u - a / s
                } else if u >= 0.0 {
                    0.0
                } else {
                    u
                }
            }
            NodeFn::Neg { a } => {
                if u < -a / s {
                    u + a / s
                } else if u <= 0.0 {
                    0.0
                } else {
                    u
                }
            }
            NodeFn::Exp { d } => {
                // root of slope(v) + s (v - u), increasing in v, bracketed by 0 and u
                let f = |v: f64| {
                    let g = d.signum() * (d * v).exp_m1() + s * (v - u);
                    if g.is_nan() {
                        f64::INFINITY
                    } else {
                        g
                    }
                };
                let (mut lo, mut hi) = if u >= 0.0 { (0.0, u) } else { (u, 0.0) };
                let mut v = 0.5 * (lo + hi);
                for _ in 0..200 {
                    let fv = f(v);
                    let deriv = d.abs() * (d * v).exp() + s;
                    let step = fv / deriv;
                    if fv == 0.0 || step.abs() <= 1e-15 * (1.0 + v.abs()) {
                        return (v - step).clamp(lo, hi);
                    }
                    if fv > 0.0 {
                        hi = v;
                    } else {
                        lo = v;
                    }
                    let newton = v - step;
                    v = if newton.is_finite() && newton > lo && newton < hi {
                        newton
                    } else {
                        0.5 * (lo + hi)
                    };
                    if hi - lo <= 1e-15 * (1.0 + hi.abs().max(lo.abs())) {
                        break;
                    }
                }
                v
            }
        }
    }
}

/// `min_v sum_i omega_i phi(v_i) + n |v - u|_omega` over the active nodes.
fn mark_envelope(phi: NodeFn, n: f64, u: &[f64], omega: &[f64], active: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..u.len()).filter(|&i| active[i] && omega[i] > 0.0).collect();
    if idx.is_empty() {
        return 0.0;
    }
    let raw: f64 = idx.iter().map(|&i| omega[i] * phi.value(u[i])).sum();
    let grad: f64 = idx.iter().map(|&i| omega[i] * phi.slope(u[i]).powi(2)).sum::<f64>().sqrt();
    if !(grad > n) && raw.is_finite() {
        return raw;
    }
    if n == 0.0 {
        // only the minimum of phi (zero for every node integrand) survives
        return 0.0;
    }
    // s |u - v(s)|_omega increases from 0 to |slope(u)|_omega; match it to n
    let h = |s: f64| {
        s * idx
            .iter()
            .map(|&i| omega[i] * (u[i] - phi.prox(u[i], s)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let g = |x: f64| h(x.exp()) - n;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let (mut glo, mut ghi) = (g(lo), g(hi));
    while glo > 0.0 && lo > -690.0 {
        lo -= 2.0;
        glo = g(lo);
    }
    while ghi < 0.0 && hi < 690.0 {
        hi += 2.0;
        ghi = g(hi);
    }
    // Illinois regula falsi on log s; h is increasing in s
    let mut side = 0i8;
    for _ in 0..200 {
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        let mut x = if ghi > glo { (lo * ghi - hi * glo) / (ghi - glo) } else { 0.5 * (lo + hi) };
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let gx = g(x);
        if gx == 0.0 {
            lo = x;
            hi = x;
            break;
        }
        if gx < 0.0 {
            lo = x;
            glo = gx;
            if side == -1 {
                ghi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            ghi = gx;
            if side == 1 {
                glo *= 0.5;
            }
            side = 1;
        }
        if gx.abs() <= 1e-14 * n {
            lo = x;
            hi = x;
            break;
        }
    }
    let (lo, hi) = (lo.exp(), hi.exp());
    let s = (lo * hi).sqrt();
    let mut value = 0.0;
    let mut dist2 = 0.0;
    for &i in &idx {
        let v = phi.prox(u[i], s);
        value += omega[i] * phi.value(v);
        dist2 += omega[i] * (v - u[i]).powi(2);
    }
    (value + n * dist2.sqrt()).min(raw)
}

/// Radial Huber function: inf-convolution of `(q/2) r^2` with `n r`.
pub fn huber(r: f64, q: f64, n: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if q * r <= n {
        0.5 * q * r * r
    } else {
        n * r - n * n / (2.0 * q)
    }
}

#[derive(Debug, Clone)]
enum ZEnv {
    Zero,
    Huber { q: f64 },
    /// `a max(e . z, 0)` with unit `e`.
    Ramp { a: f64, e: Vec<f64> },
}

/// Positive or negative part of a separable driver.
#[derive(Debug, Clone)]
struct Part {
    /// Coefficients on `max(y,0)` and `max(-y,0)`.
    y_right: f64,
    y_left: f64,
    z: ZEnv,
    mark: Option<NodeFn>,
}

impl Part {
    fn value_raw(&self, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> f64 {
        self.value_env(f64::INFINITY, y, z, u, omega, &vec![true; u.len()])
    }

    fn value_env(&self, n: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64], active: &[bool]) -> f64 {
        self.y_env(n, y) + self.z_env(n, z) + self.mark_env(n, u, omega, active)
    }

    fn y_env(&self, n: f64, y: f64) -> f64 {
        self.y_right.min(n) * y.max(0.0) + self.y_left.min(n) * (-y).max(0.0)
    }

    fn y_lipschitz(&self, n: f64) -> f64 {
        self.y_right.min(n).max(self.y_left.min(n))
    }

    fn z_env(&self, n: f64, z: &[f64]) -> f64 {
        match &self.z {
            ZEnv::Zero => 0.0,
            ZEnv::Huber { q } => huber(z.iter().map(|x| x * x).sum::<f64>().sqrt(), *q, n),
            ZEnv::Ramp { a, e } => a.min(n) * e.iter().zip(z).map(|(e, z)| e * z).sum::<f64>().max(0.0),
        }
    }

    fn mark_env(&self, n: f64, u: &[f64], omega: &[f64], active: &[bool]) -> f64 {
        match self.mark {
            None => 0.0,
            Some(phi) => {
                if n.is_infinite() {
                    idx_sum(u, omega, active, |v| phi.value(v))
                } else {
                    mark_envelope(phi, n, u, omega, active)
                }
            }
        }
    }

    fn is_null(&self) -> bool {
        self.y_right == 0.0 && self.y_left == 0.0 && matches!(self.z, ZEnv::Zero) && self.mark.is_none()
    }

    fn mark_is_null(&self) -> bool {
        self.mark.is_none()
    }
}

fn idx_sum<F: Fn(f64) -> f64>(u: &[f64], omega: &[f64], active: &[bool], f: F) -> f64 {
    u.iter()
        .zip(omega)
        .zip(active)
        .filter(|(_, a)| **a)
        .map(|((v, w), _)| if *w == 0.0 { 0.0 } else { w * f(*v) })
        .sum()
}

fn split(y: &YPart, z: &ZPart, mark: &MarkPart) -> (Part, Part) {
    // h_y(y) = s_r y for y > 0 and s_l y for y < 0
    let s_r = y.a - y.beta;
    let s_l = y.a + y.beta;
    let (zp, zn) = match z {
        ZPart::Zero => (ZEnv::Zero, ZEnv::Zero),
        ZPart::Quadratic { q } => {
            if *q >= 0.0 {
                (ZEnv::Huber { q: *q }, ZEnv::Zero)
            } else {
                (ZEnv::Zero, ZEnv::Huber { q: -q })
            }
        }
        ZPart::Linear { b } => {
            let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                (ZEnv::Zero, ZEnv::Zero)
            } else {
                let e: Vec<f64> = b.iter().map(|x| x / norm).collect();
                let minus: Vec<f64> = e.iter().map(|x| -x).collect();
                (ZEnv::Ramp { a: norm, e }, ZEnv::Ramp { a: norm, e: minus })
            }
        }
    };
    let (mp, mn) = match mark {
        MarkPart::Zero => (None, None),
        MarkPart::Exponential { delta } => (Some(NodeFn::Exp { d: *delta }), None),
        MarkPart::Linear { c } => {
            if *c > 0.0 {
                (Some(NodeFn::Pos { a: *c }), Some(NodeFn::Neg { a: *c }))
            } else if *c < 0.0 {
                (Some(NodeFn::Neg { a: -c }), Some(NodeFn::Pos { a: -c }))
            } else {
                (None, None)
            }
        }
    };
    (
        Part {
            y_right: s_r.max(0.0),
            y_left: (-s_l).max(0.0),
            z: zp,
            mark: mp,
        },
        Part {
            y_right: (-s_r).max(0.0),
            y_left: s_l.max(0.0),
            z: zn,
            mark: mn,
        },
    )
}

/// `f^{n,m,kappa} = (inf-envelope_n of the positive part) - (inf-envelope_m of the negative part)`,
/// with the mark integrand restricted to `|e| >= 1/kappa`.
#[derive(Debug, Clone)]
pub struct RegularizedDriver {
    base: Driver,
    n: f64,
    m: f64,
    kappa: f64,
    active: Vec<bool>,
    pos: Part,
    neg: Part,
}

/// Regularizes `base` on the quadrature `quad` (truncation level `quad.kappa()`).
pub fn regularize(base: &Driver, n: f64, m: f64, quad: &MarkQuadrature) -> Result<RegularizedDriver> {
    regularize_truncated(base, n, m, quad, quad.kappa())
}

/// Regularizes `base` for fields living on the finer quadrature `quad`, keeping
/// only the marks with `|e| >= 1/kappa` in the jump integrand.
pub fn regularize_truncated(
    base: &Driver,
    n: f64,
    m: f64,
    quad: &MarkQuadrature,
    kappa: f64,
) -> Result<RegularizedDriver> {
    if !(n >= 1.0 && m >= 1.0) {
        return Err(Error::InvalidParameter(format!("regularization indices must be >= 1 (n={n}, m={m})")));
    }
    if kappa > quad.kappa() * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "truncation level {kappa} is finer than the quadrature ({})",
            quad.kappa()
        )));
    }
    let (y, z, mark) = base
        .parts()
        .ok_or_else(|| Error::Unsupported("closed-form regularization of a custom driver".into()))?;
    let (pos, neg) = split(y, z, mark);
    Ok(RegularizedDriver {
        base: base.clone(),
        n,
        m,
        kappa,
        active: quad.active(kappa),
        pos,
        neg,
    })
}

impl RegularizedDriver {
    pub fn base(&self) -> &Driver {
        &self.base
    }

    pub fn indices(&self) -> (f64, f64, f64) {
        (self.n, self.m, self.kappa)
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.active.len() {
            return Err(Error::MisalignedField {
                expected: self.active.len(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// `bar f^{n,kappa}`.
    pub fn upper(&self, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok(self.pos.value_env(self.n, y, z, u, omega, &self.active))
    }

    /// `underline f^{m,kappa}`.
    pub fn lower(&self, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok(self.neg.value_env(self.m, y, z, u, omega, &self.active))
    }

    /// Mark part `bar G^{n,kappa}(u)` of the upper envelope.
    pub fn upper_mark(&self, u: &[f64], omega: &[f64]) -> Result<f64> {
        self.check_len(u)?;
        Ok(self.pos.mark_env(self.n, u, omega, &self.active))
    }

    pub fn negative_part_is_null(&self) -> bool {
        self.neg.is_null()
    }

    pub fn negative_mark_is_null(&self) -> bool {
        self.neg.mark_is_null()
    }

    /// `(q_lower^{m,kappa}, q_upper^{n,kappa})`: sup-envelope of the lower and
    /// inf-envelope of the upper structure bound.
    pub fn envelope_bounds(&self, t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<(f64, f64)> {
        self.check_len(u)?;
        let p = &self.base.params;
        let d = p.delta;
        let bound = |idx: f64, sign: f64| {
            let part = Part {
                y_right: p.c.at(t),
                y_left: p.c.at(t),
                z: ZEnv::Huber { q: d },
                mark: Some(NodeFn::Exp { d: sign * d }),
            };
            p.l.at(t) + part.value_env(idx, y, z, u, omega, &self.active)
        };
        Ok((-bound(self.m, -1.0), bound(self.n, 1.0)))
    }

    /// Structure bounds with the jump terms restricted to the active marks.
    pub fn truncated_bounds(&self, t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<(f64, f64)> {
        let masked: Vec<f64> = omega
            .iter()
            .zip(&self.active)
            .map(|(w, a)| if *a { *w } else { 0.0 })
            .collect();
        structure_bounds_omega(t, y, z, u, &self.base.params, &masked)
    }
}

impl Generator for RegularizedDriver {
    fn eval(&self, _t: f64, y: f64, z: &[f64], u: &[f64], omega: &[f64]) -> Result<f64> {
        Ok(self.upper(y, z, u, omega)? - self.lower(y, z, u, omega)?)
    }

    fn y_part(&self, _t: f64, y: f64) -> Option<f64> {
        Some(self.pos.y_env(self.n, y) - self.neg.y_env(self.m, y))
    }

    fn y_lipschitz(&self) -> Option<f64> {
        Some(self.pos.y_lipschitz(self.n) + self.neg.y_lipschitz(self.m))
    }

    fn gamma_cap(&self) -> f64 {
        self.n
    }

    fn label(&self) -> String {
        format!("{}[n={},m={},kappa={}]", self.base.name, self.n, self.m, self.kappa)
    }
}

// ---------------------------------------------------------------------------
// A_gamma condition and Lipschitz estimation.

#[derive(Debug, Clone)]
pub struct AGammaReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
    pub gamma: Vec<f64>,
}

/// Checks `f(u) - f(ubar) <= sum_i gamma_i (u_i - ubar_i) omega_i` with
/// `gamma_i` the clamped difference quotient obtained by moving one mark at a time.
#[allow(clippy::too_many_arguments)]
pub fn check_a_gamma(
    gen: &dyn Generator,
    t: f64,
    y: f64,
    z: &[f64],
    u: &JumpField,
    u_bar: &JumpField,
    quad: &MarkQuadrature,
) -> Result<AGammaReport> {
    u.check_aligned(quad)?;
    u_bar.check_aligned(quad)?;
    let omega = quad.omega(t);
    let cap = gen.gamma_cap();
    let lo = -1.0 + 1e-9;
    let mut w = u_bar.values.clone();
    let mut prev = gen.eval(t, y, z, &w, &omega)?;
    let start = prev;
    let mut gamma = vec![0.0; quad.len()];
    let mut rhs = 0.0;
    for i in 0..quad.len() {
        let du = u.values[i] - u_bar.values[i];
        if du == 0.0 || omega[i] == 0.0 {
            w[i] = u.values[i];
            continue;
        }
        w[i] = u.values[i];
        let next = gen.eval(t, y, z, &w, &omega)?;
        let g = ((next - prev) / (omega[i] * du)).clamp(lo, cap.min(f64::MAX));
        gamma[i] = g;
        rhs += g * du * omega[i];
        prev = next;
    }
    let lhs = prev - start;
    Ok(AGammaReport {
        lhs,
        rhs,
        ok: lhs <= rhs + 1e-9,
        gamma,
    })
}

/// Box in `(y, z)` space sampled by [`lipschitz_estimate`].
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub y: (f64, f64),
    pub z: (f64, f64),
    pub d: usize,
}

/// `max |f(p) - f(p')| / (|y - y'| + |z - z'|)` over random pairs; half of the
/// pairs are close to catch local slopes.
pub fn lipschitz_estimate<F: Fn(f64, &[f64]) -> f64>(f: F, region: Region, n_probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let y = rng.random_range(region.y.0..=region.y.1);
        let z: Vec<f64> = (0..region.d).map(|_| rng.random_range(region.z.0..=region.z.1)).collect();
        (y, z)
    };
    let span = (region.y.1 - region.y.0).max(region.z.1 - region.z.0).max(1e-12);
    let mut best: f64 = 0.0;
    for i in 0..n_probes.max(2) {
        let (y1, z1) = draw(&mut rng);
        let (y2, z2) = if i % 2 == 0 {
            draw(&mut rng)
        } else {
            let h = 1e-4 * span;
            (
                (y1 + rng.random_range(-h..=h)).clamp(region.y.0, region.y.1),
                z1.iter()
                    .map(|z| (z + rng.random_range(-h..=h)).clamp(region.z.0, region.z.1))
                    .collect(),
            )
        };
        let dist = (y1 - y2).abs() + z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        best = best.max((f(y1, &z1) - f(y2, &z2)).abs() / dist);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prox_solves_optimality() {
        for &d in &[1.0, -1.0, 2.5] {
            for &u in &[-3.0, -0.1, 0.0, 0.2, 4.0] {
                for &s in &[0.1, 1.0, 50.0] {
                    let phi = NodeFn::Exp { d };
                    let v = phi.prox(u, s);
                    let resid = phi.slope(v) + s * (v - u);
                    assert!(resid.abs() < 1e-9 * (1.0 + s * u.abs()), "d={d} u={u} s={s}: {resid}");
                }
            }
        }
    }

    #[test]
    fn time_fn_integrals() {
        let f = TimeFn::Affine { a: 1.0, b: 2.0 };
        assert!((f.integral(0.0, 1.0) - 2.0).abs() < 1e-15);
        let t = TimeFn::Table {
            times: vec![0.0, 1.0],
            values: vec![0.0, 2.0],
        };
        assert!((t.integral(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((t.integral(0.0, 2.0) - 3.0).abs() < 1e-15);
        assert!((t.at(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn discounted_lambda_closed_form() {
        let p = StructureParams::new(1.0, TimeFn::Constant(1.0), TimeFn::Constant(1.0)).unwrap();
        // int_0^1 e^r dr = e - 1
        assert!((p.discounted_lambda(0.0, 1.0) - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn discrete_gronwall_factors() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let p = StructureParams::new(1.0, TimeFn::Constant(2.0), TimeFn::Constant(1.0)).unwrap();
        let (g, d) = p.discrete_gronwall(&grid).unwrap();
        assert_eq!(g[0], 1.0);
        assert!((g[4] - 0.75f64.powi(-4)).abs() < 1e-12);
        assert!((d[1] - g[1] * 2.0 * 0.25).abs() < 1e-15);
        let (g, d) = p.discrete_gronwall(&TimeGrid::uniform(1.0, 20_000).unwrap()).unwrap();
        assert!((g[20_000] - 1f64.exp()).abs() < 1e-4);
        assert!((d[20_000] - p.discounted_lambda(0.0, 1.0)).abs() < 1e-3);
        assert!(matches!(p.discrete_gronwall(&TimeGrid::uniform(1.0, 1).unwrap()), Err(Error::NonContraction { .. })));
    }
}
