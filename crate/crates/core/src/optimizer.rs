//! Mini-batch stochastic gradient descent with random reshuffling on the
//! level-set function.
//!
//! Every iteration evolves `phi_t = -V_n |grad phi| + alpha Lap(phi)` by one
//! forward-Euler step whose size comes from the CFL bound of that equation, then
//! reinitializes `phi` towards a signed distance function.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Grid3;
use crate::io::write_atomic;
use crate::levelset::{
    band_mask, heaviside, laplacian, regularization_energy, reinitialize, upwind_grad_norm,
    LevelSetField,
};
use crate::lowrank::KernelOperator;
use crate::par;

/// Predicted modulus below this value (nT) gets zero gradient weight.
pub const MODULUS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the H1 regularization.
    pub alpha: f64,
    /// CFL number, strictly between 0 and 1.
    pub cfl: f64,
    pub band_halfwidth: f64,
    pub reinit_iters: usize,
    pub seed: u64,
    /// Use the stepsize without the regularization terms.
    pub drop_alpha: bool,
    /// Stop once the full misfit has not improved for 5 epochs.
    pub early_stop: bool,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl < 1.0) {
            return Err(Error::InvalidInput(format!(
                "CFL number must lie in (0, 1), got {}",
                self.cfl
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.band_halfwidth > 0.0) {
            return Err(Error::InvalidInput(format!(
                "band half-width must be > 0, got {}",
                self.band_halfwidth
            )));
        }
        Ok(())
    }
}

/// One epoch's permutation of the data indices, cut into consecutive batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchSchedule {
    pub permutation: Vec<usize>,
    pub batch_size: usize,
}

impl MiniBatchSchedule {
    pub fn n_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.permutation.chunks(self.batch_size)
    }
}

/// Uniform random permutation of `0..m` in batches of `b` (last one shorter
/// when `b` does not divide `m`).
pub fn reshuffle_partition<R: Rng + ?Sized>(
    m: usize,
    b: usize,
    rng: &mut R,
) -> Result<MiniBatchSchedule> {
    if b == 0 || b > m {
        return Err(Error::InvalidInput(format!(
            "batch size {b} must satisfy 1 <= b <= M = {m}"
        )));
    }
    let mut permutation: Vec<usize> = (0..m).collect();
    permutation.shuffle(rng);
    Ok(MiniBatchSchedule {
        permutation,
        batch_size: b,
    })
}

/// Everything fixed during an inversion: the compressed kernel, the data and the
/// physical constants.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub grid: Grid3,
    pub operator: &'a KernelOperator,
    pub observed: &'a [f64],
    /// Inducing field strength `B0` in nT.
    pub field_strength: f64,
    pub kappa0: f64,
}

impl<'a> Problem<'a> {
    pub fn new(
        grid: Grid3,
        operator: &'a KernelOperator,
        observed: &'a [f64],
        field_strength: f64,
        kappa0: f64,
    ) -> Result<Self> {
        operator.check_compatible(&grid, observed.len())?;
        Ok(Problem {
            grid,
            operator,
            observed,
            field_strength,
            kappa0,
        })
    }

    /// `B0 / (4 pi) * dV`: kernel sums to nT.
    pub fn field_scale(&self) -> f64 {
        self.field_strength / (4.0 * PI) * self.grid.cell_volume()
    }

    pub fn kappa(&self, phi: &[f64]) -> Vec<f64> {
        heaviside(phi)
            .into_iter()
            .map(|h| self.kappa0 * h)
            .collect()
    }

    /// Predicted field components for the given rows.
    pub fn predict(&self, rows: &[usize], kappa: &[f64]) -> Result<Vec<[f64; 3]>> {
        let i = self.operator.batch_forward(rows, kappa)?;
        let scale = self.field_scale();
        Ok((0..rows.len())
            .map(|k| [scale * i[0][k], scale * i[1][k], scale * i[2][k]])
            .collect())
    }
}

/// Output of one mini-batch gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    /// Normal speed per node; zero outside the band.
    pub vn: Vec<f64>,
    /// Mini-batch misfit `(1/|S|) sum (d - d*)^2 / 2`.
    pub misfit: f64,
    pub max_abs: f64,
}

/// Shared kernel of the sharp and smoothed gradients: misfit of `kappa` on
/// `rows` and `(B0 kappa0 dV / (4 pi |S|)) sum_s G_s` restricted to `band`.
fn batch_speed(
    problem: &Problem,
    rows: &[usize],
    kappa: &[f64],
    band: &[bool],
) -> Result<(Vec<f64>, f64)> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty mini-batch".into()));
    }
    let b = problem.predict(rows, kappa)?;
    let n_rows = rows.len();
    let mut weights = [vec![0.0; n_rows], vec![0.0; n_rows], vec![0.0; n_rows]];
    let mut misfit = 0.0;
    for (k, &i) in rows.iter().enumerate() {
        let d = crate::forward::modulus(&b[k]);
        let res = d - problem.observed[i];
        misfit += 0.5 * res * res;
        if d >= MODULUS_FLOOR {
            for s in 0..3 {
                weights[s][k] = b[k][s] / d * res;
            }
        }
    }
    misfit /= n_rows as f64;
    let g = problem.operator.batch_gradient_rows(
        rows,
        &[&weights[0], &weights[1], &weights[2]],
        band,
    )?;
    let coef = problem.field_scale() * problem.kappa0 / n_rows as f64;
    let mut vn = vec![0.0; band.len()];
    par::fill(&mut vn, |j| coef * (g[0][j] + g[1][j] + g[2][j]));
    Ok((vn, misfit))
}

/// Normal velocity `V_n` and mini-batch misfit at the current level set.
pub fn velocity_field(problem: &Problem, phi: &LevelSetField, rows: &[usize]) -> Result<Velocity> {
    let kappa = problem.kappa(&phi.values);
    let band = band_mask(&phi.values, phi.band_halfwidth);
    let (vn, misfit) = batch_speed(problem, rows, &kappa, &band)?;
    let max_abs = vn.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Velocity {
        vn,
        misfit,
        max_abs,
    })
}

/// CFL stepsize `C / (max|V|/h_min + 2 alpha sum 1/h^2)`; with `drop_alpha`
/// the regularization terms are left out.
pub fn cfl_stepsize(
    max_abs_vn: f64,
    grid: &Grid3,
    alpha: f64,
    cfl: f64,
    drop_alpha: bool,
) -> Result<f64> {
    let h = grid.spacing();
    let mut denom = max_abs_vn / grid.min_spacing();
    if !drop_alpha {
        denom += 2.0 * alpha * (1.0 / (h[0] * h[0]) + 1.0 / (h[1] * h[1]) + 1.0 / (h[2] * h[2]));
    }
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Stall);
    }
    Ok(cfl / denom)
}

/// One row of the iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    pub batch: usize,
    pub f_sk: f64,
    pub dt: f64,
    pub max_vn: f64,
    pub model_err: Option<f64>,
}

pub const TRACE_HEADER: &str = "iter,epoch,batch,f_sk,dt,max_vn,model_err";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let err = r.model_err.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iter, r.epoch, r.batch, r.f_sk, r.dt, r.max_vn, err
        );
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_atomic(path, trace_csv(rows).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionState {
    pub phi: LevelSetField,
    /// Completed iterations.
    pub iteration: usize,
    pub trace: Vec<TraceRow>,
}

/// `sqrt(sum (kappa - kappa*)^2 dV)`.
pub fn l2_model_error(kappa: &[f64], kappa_star: &[f64], cell_volume: f64) -> f64 {
    kappa
        .iter()
        .zip(kappa_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .mul_add(cell_volume, 0.0)
        .sqrt()
}

/// One SGD update on `rows`, followed by reinitialization. On a stall the state
/// is left untouched.
pub fn sgd_step(
    problem: &Problem,
    cfg: &SgdConfig,
    state: &mut InversionState,
    rows: &[usize],
    epoch: usize,
    batch: usize,
    truth: Option<&[f64]>,
) -> Result<TraceRow> {
    let grid = &problem.grid;
    let vel = velocity_field(problem, &state.phi, rows)?;
    let dt = cfl_stepsize(vel.max_abs, grid, cfg.alpha, cfg.cfl, cfg.drop_alpha)?;
    let phi = &state.phi.values;
    let advect = upwind_grad_norm(grid, phi, &vel.vn);
    let lap = if cfg.alpha > 0.0 {
        laplacian(grid, phi)
    } else {
        vec![0.0; phi.len()]
    };
    let mut next = vec![0.0; phi.len()];
    par::fill(&mut next, |j| {
        phi[j] + dt * (-vel.vn[j] * advect[j] + cfg.alpha * lap[j])
    });
    let next = reinitialize(grid, &next, cfg.reinit_iters);
    state.iteration += 1;
    if let Some(node) = next.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            iteration: state.iteration,
            node,
        });
    }
    state.phi.values = next;
    let model_err =
        truth.map(|t| l2_model_error(&problem.kappa(&state.phi.values), t, grid.cell_volume()));
    let row = TraceRow {
        iter: state.iteration,
        epoch,
        batch,
        f_sk: vel.misfit,
        dt,
        max_vn: vel.max_abs,
        model_err,
    };
    state.trace.push(row.clone());
    Ok(row)
}

/// Full-data misfit `(1/M) sum (d - d*)^2 / 2`.
pub fn full_misfit(problem: &Problem, phi: &[f64]) -> Result<f64> {
    let rows: Vec<usize> = (0..problem.observed.len()).collect();
    let b = problem.predict(&rows, &problem.kappa(phi))?;
    let s: f64 = b
        .iter()
        .zip(problem.observed)
        .map(|(b, d)| 0.5 * (crate::forward::modulus(b) - d).powi(2))
        .sum();
    Ok(s / rows.len() as f64)
}

/// `f^M + alpha E_r`.
pub fn total_objective(problem: &Problem, phi: &[f64], alpha: f64) -> Result<f64> {
    let f = full_misfit(problem, phi)?;
    if alpha == 0.0 {
        return Ok(f);
    }
    Ok(f + alpha * regularization_energy(&problem.grid, phi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_f_sk: f64,
    pub model_err: Option<f64>,
    pub full_misfit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub phi: LevelSetField,
    pub kappa: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochSummary>,
    /// Model error of the reinitialized starting guess, when truth was given.
    pub initial_model_err: Option<f64>,
}

const EARLY_STOP_PATIENCE: usize = 5;
const EARLY_STOP_REL: f64 = 1e-3;

/// Run the full reshuffled mini-batch loop from `phi0`.
pub fn run_inversion(
    problem: &Problem,
    cfg: &SgdConfig,
    phi0: &[f64],
    truth: Option<&[f64]>,
) -> Result<InversionResult> {
    cfg.validate()?;
    let grid = problem.grid;
    if phi0.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            what: "initial level set",
            expected: grid.n_nodes(),
            actual: phi0.len(),
        });
    }
    if let Some(t) = truth {
        if t.len() != grid.n_nodes() {
            return Err(Error::DimensionMismatch {
                what: "true susceptibility",
                expected: grid.n_nodes(),
                actual: t.len(),
            });
        }
    }
    let m = problem.observed.len();
    let batch_size = cfg.batch_size.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = reinitialize(&grid, phi0, cfg.reinit_iters);
    let initial_model_err =
        truth.map(|t| l2_model_error(&problem.kappa(&start), t, grid.cell_volume()));
    let mut state = InversionState {
        phi: LevelSetField::new(grid, start, cfg.band_halfwidth),
        iteration: 0,
        trace: Vec::new(),
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best_misfits: Vec<f64> = Vec::new();
    for epoch in 1..=cfg.epochs {
        let schedule = reshuffle_partition(m, batch_size, &mut rng)?;
        let first = state.trace.len();
        for (k, rows) in schedule.batches().enumerate() {
            sgd_step(problem, cfg, &mut state, rows, epoch, k + 1, truth)?;
        }
        let rows = &state.trace[first..];
        let mean_f_sk = rows.iter().map(|r| r.f_sk).sum::<f64>() / rows.len().max(1) as f64;
        let model_err = rows.last().and_then(|r| r.model_err);
        let full = if cfg.early_stop {
            Some(full_misfit(problem, &state.phi.values)?)
        } else {
            None
        };
        epochs.push(EpochSummary {
            epoch,
            mean_f_sk,
            model_err,
            full_misfit: full,
        });
        if let Some(f) = full {
            best_misfits.push(f);
            if stagnated(&best_misfits) {
                break;
            }
        }
    }
    let kappa = problem.kappa(&state.phi.values);
    Ok(InversionResult {
        phi: state.phi,
        kappa,
        trace: state.trace,
        epochs,
        initial_model_err,
    })
}

/// No relative improvement over the best value seen before the last
/// `EARLY_STOP_PATIENCE` epochs.
fn stagnated(history: &[f64]) -> bool {
    if history.len() <= EARLY_STOP_PATIENCE {
        return false;
    }
    let split = history.len() - EARLY_STOP_PATIENCE;
    let before = history[..split]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let recent = history[split..]
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    recent > before * (1.0 - EARLY_STOP_REL)
}

/// Smoothed-Heaviside variant of the misfit, used to check the assembled
/// gradient against finite differences. The sharp Heaviside has no classical
/// derivative, so here `H_eps(x) = (1 + x/eps + sin(pi x/eps)/pi) / 2` inside
/// the band and the exact `H_eps'` replaces the band `|grad phi|` factor.
pub mod smoothed {
    use super::*;

    pub fn heaviside(x: f64, eps: f64) -> f64 {
        if x >= eps {
            1.0
        } else if x <= -eps {
            0.0
        } else {
            0.5 * (1.0 + x / eps + (PI * x / eps).sin() / PI)
        }
    }

    pub fn delta(x: f64, eps: f64) -> f64 {
        if x.abs() >= eps {
            0.0
        } else {
            0.5 / eps * (1.0 + (PI * x / eps).cos())
        }
    }

    /// Mini-batch misfit and its gradient with respect to every node of `phi`.
    pub fn misfit_and_gradient(
        problem: &Problem,
        phi: &[f64],
        eps: f64,
        rows: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let kappa: Vec<f64> = phi
            .iter()
            .map(|p| problem.kappa0 * heaviside(*p, eps))
            .collect();
        let band = band_mask(phi, eps);
        let (vn, misfit) = batch_speed(problem, rows, &kappa, &band)?;
        let grad = vn
            .iter()
            .zip(phi)
            .map(|(v, p)| v * delta(*p, eps))
            .collect();
        Ok((misfit, grad))
    }
}
