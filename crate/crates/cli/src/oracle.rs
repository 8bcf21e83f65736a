//! Independent reference values with standard errors.

use qbsdej::bsdej::simulate_forward;
use qbsdej::driver::huber;
use qbsdej::risk::entropic;
use qbsdej::semimartingale::Direction;
use qbsdej::{build_quadrature_banded, j_functional, stats, JumpField, LevyModel, TimeGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::{ExperimentConfig, OracleSpec};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct OracleValue {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    /// Closed form when one exists.
    pub exact: Option<f64>,
    pub tol: f64,
}

impl OracleValue {
    pub fn pass(&self) -> bool {
        match self.exact {
            Some(x) => (self.value - x).abs() <= 3.0 * self.stderr + self.tol,
            None => self.value.is_finite(),
        }
    }
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Minimizes `(q/2) x^2 + n |y - x|` on a coarse grid, then on a fine grid around the best point.
fn grid_min_huber(n: f64, y: f64, q: f64) -> f64 {
    let f = |x: f64| 0.5 * q * x * x + n * (y - x).abs();
    let (mut lo, mut hi) = (-y.abs() - 1.0, y.abs() + 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let cells = 20_000;
        let h = (hi - lo) / cells as f64;
        let mut arg = lo;
        for i in 0..=cells {
            let x = lo + h * i as f64;
            let v = f(x);
            if v < best {
                best = v;
                arg = x;
            }
        }
        lo = arg - h;
        hi = arg + h;
    }
    best
}

pub fn evaluate(cfg: &ExperimentConfig, index: usize, spec: &OracleSpec) -> Result<OracleValue, CliError> {
    let n = cfg.ensemble.n_paths;
    let seed = cfg.ensemble.seed.wrapping_add(index as u64);
    let horizon = cfg.grid.horizon;
    let out = match spec {
        OracleSpec::GaussianEntropic { sigma } => {
            let xs: Vec<f64> = normals(n, seed).into_iter().map(|g| sigma * g).collect();
            let (value, stderr) = stats::log_mean_exp(&xs);
            OracleValue {
                name: format!("gaussian_entropic(sigma={sigma})"),
                value,
                stderr,
                exact: Some(0.5 * sigma * sigma),
                tol: 0.0,
            }
        }
        OracleSpec::Huber { n: slope, y, q } => OracleValue {
            name: format!("huber(n={slope};y={y};q={q})"),
            value: grid_min_huber(*slope, *y, *q),
            stderr: 0.0,
            exact: Some(huber(y.abs(), *q, *slope)),
            tol: 1e-6,
        },
        OracleSpec::NullMeasure => {
            let quad = build_quadrature_banded(&LevyModel::null(), cfg.truncation.kappa, 2)?;
            let value = j_functional(&JumpField::constant(quad.len(), 3.0), 1.0, &quad, &quad.zeta_at(0.0))?;
            OracleValue {
                name: "null_measure_j".into(),
                value,
                stderr: 0.0,
                exact: Some(0.0),
                tol: 0.0,
            }
        }
        OracleSpec::Girsanov { b } => {
            let sd = horizon.sqrt();
            let xs: Vec<f64> = normals(n, seed)
                .into_iter()
                .map(|g| {
                    let w = sd * g;
                    w * (b * w - 0.5 * b * b * horizon).exp()
                })
                .collect();
            let (value, stderr) = stats::mean_se(&xs);
            OracleValue {
                name: format!("girsanov(b={b})"),
                value,
                stderr,
                exact: Some(b * horizon),
                tol: 0.0,
            }
        }
        OracleSpec::CompoundPoisson { rate, u } => {
            let lambda = rate * horizon;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = if lambda > 0.0 {
                let pois = Poisson::new(lambda).map_err(|e| CliError::Config(format!("compound_poisson: {e}")))?;
                (0..n)
                    .map(|_| (u * pois.sample(&mut rng) - lambda * u.exp_m1()).exp())
                    .collect()
            } else {
                vec![1.0; n]
            };
            let (value, stderr) = stats::mean_se(&xs);
            OracleValue {
                name: format!("compound_poisson(rate={rate};u={u})"),
                value,
                stderr,
                exact: Some(1.0),
                tol: 0.0,
            }
        }
        OracleSpec::TerminalEntropic => {
            let model = cfg.model.build();
            let quad = build_quadrature_banded(&model, cfg.truncation.kappa, cfg.truncation.cells_per_band)?;
            let grid = TimeGrid::uniform(horizon, cfg.grid.steps)?;
            let ens = simulate_forward(&model, &quad, cfg.ensemble.dynamics, &grid, n, cfg.ensemble.seed)?;
            let xi = ens.terminal_values(|x| cfg.terminal.eval(x));
            let r = entropic(&ens, &xi, 0, Direction::Upper, cfg.solver.degree)?;
            OracleValue {
                name: "terminal_entropic".into(),
                value: r.value,
                stderr: r.stderr,
                exact: None,
                tol: 0.0,
            }
        }
    };
    Ok(out)
}
