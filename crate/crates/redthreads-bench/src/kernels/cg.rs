//! Conjugate gradient solvers.
//!
//! The plain CG kernel wraps every iteration in a sphere and compares the
//! iteration's residual norm: the norm drives the convergence test, so a
//! corrupted norm is a corrupted control decision. The self-stabilizing
//! variant protects only its periodic correction step — the recomputation of
//! the true residual — and leaves the regular iterations unprotected, since
//! the correction step restores the algorithm's state invariants.

use super::sparse::CsrMatrix;
use super::{AbortKind, Kernel, KernelRun, Real, RunAbort, SphereDriver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redthreads::{Outputs, Runtime, SphereInputs, SphereSpec, Strength};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error("breakdown at iteration {iteration}: curvature {curvature} <= 0 (matrix not SPD)")]
    Breakdown { iteration: usize, curvature: f64 },
    #[error("dimension mismatch: matrix {rows}x{cols}, rhs {rhs}")]
    DimensionMismatch { rows: usize, cols: usize, rhs: usize },
}

/// Solver state: iterate, residual, search direction and the norm history.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState<F> {
    pub x: Vec<F>,
    pub r: Vec<F>,
    pub p: Vec<F>,
    pub iterations: usize,
    pub residual_history: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CgIterate<F> {
    x: Vec<F>,
    r: Vec<F>,
    p: Vec<F>,
    rho: F,
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn norm<F: Real>(v: &[F]) -> F {
    dot(v, v).sqrt()
}

fn cg_init<F: Real>(b: &[F]) -> CgIterate<F> {
    let r = b.to_vec();
    let p = r.clone();
    let rho = dot(&r, &r);
    CgIterate {
        x: vec![F::zero(); b.len()],
        r,
        p,
        rho,
    }
}

/// One CG iteration in a fixed floating-point order. Returns the new iterate
/// and the new residual norm, or the breakdown curvature.
fn cg_step<F: Real>(a: &CsrMatrix<F>, s: &CgIterate<F>) -> Result<(CgIterate<F>, F), F> {
    let q = a.matvec(&s.p);
    let curvature = dot(&s.p, &q);
    if curvature <= F::zero() {
        return Err(curvature);
    }
    let alpha = s.rho / curvature;
    let mut x = s.x.clone();
    let mut r = s.r.clone();
    for i in 0..x.len() {
        x[i] += alpha * s.p[i];
        r[i] -= alpha * q[i];
    }
    let rho_new = dot(&r, &r);
    let beta = rho_new / s.rho;
    let mut p = r.clone();
    for i in 0..p.len() {
        p[i] += beta * s.p[i];
    }
    let residual_norm = rho_new.sqrt();
    Ok((
        CgIterate {
            x,
            r,
            p,
            rho: rho_new,
        },
        residual_norm,
    ))
}

/// Plain conjugate gradient without replication; the reference path.
pub fn cg_reference<F: Real>(
    a: &CsrMatrix<F>,
    b: &[F],
    tol: F,
    max_iter: usize,
) -> Result<SolverState<F>, SolverError> {
    if a.n_rows != a.n_cols || a.n_cols != b.len() {
        return Err(SolverError::DimensionMismatch {
            rows: a.n_rows,
            cols: a.n_cols,
            rhs: b.len(),
        });
    }
    let threshold = tol * norm(b);
    let mut state = cg_init(b);
    let mut history = vec![norm(&state.r)];
    let mut iterations = 0;
    while iterations < max_iter && *history.last().unwrap() > threshold {
        match cg_step(a, &state) {
            Ok((next, residual_norm)) => {
                state = next;
                history.push(residual_norm);
                iterations += 1;
            }
            Err(curvature) => {
                return Err(SolverError::Breakdown {
                    iteration: iterations,
                    curvature: curvature.to_f64().unwrap_or(f64::NAN),
                })
            }
        }
    }
    Ok(SolverState {
        x: state.x,
        r: state.r,
        p: state.p,
        iterations,
        residual_history: history,
    })
}

/// Conjugate gradient with one sphere per iteration. The matrix and rhs are
/// shared, the solver state is private (copied per replica), and the
/// iteration's residual norm is the compared output. The canonical norm from
/// the sphere drives the convergence test.
pub fn cg_protected(
    driver: &mut SphereDriver<'_>,
    problem: &Arc<CgProblem>,
    strength: Strength,
    tol: f64,
    max_iter: usize,
) -> Result<Result<SolverState<f64>, SolverError>, RunAbort> {
    let spec = SphereSpec::new(0u64, strength)
        .share(["A", "b"])
        .private(["x", "r", "p", "rho"])
        .compare(["residual_norm"]);
    let threshold = tol * norm(&problem.b);
    let mut state = cg_init(&problem.b);
    let mut history = vec![norm(&state.r)];
    let mut iterations = 0;

    let unit = |_r: usize, prob: &CgProblem, state: CgIterate<f64>| match cg_step(&prob.a, &state) {
        Ok((next, residual_norm)) => (Outputs::scalar("residual_norm", residual_norm), Ok(next)),
        Err(curvature) => (Outputs::scalar("residual_norm", f64::NAN), Err(curvature)),
    };

    while iterations < max_iter && *history.last().unwrap() > threshold {
        let (record, carry) = driver.protected(
            &spec,
            SphereInputs::new(Arc::clone(problem), state.clone()),
            unit,
        )?;
        match carry {
            Ok(next) => state = next,
            Err(curvature) => {
                return Ok(Err(SolverError::Breakdown {
                    iteration: iterations,
                    curvature,
                }))
            }
        }
        // Continue with the verified (or corrected) norm, not a local one.
        let residual_norm = record.values[0].1.as_scalar().expect("scalar norm");
        history.push(residual_norm);
        iterations += 1;
    }
    Ok(Ok(SolverState {
        x: state.x,
        r: state.r,
        p: state.p,
        iterations,
        residual_history: history,
    }))
}

/// Shared CG operands.
pub struct CgProblem {
    pub a: CsrMatrix<f64>,
    pub b: Vec<f64>,
}

pub struct CgKernel {
    problem: Arc<CgProblem>,
    tol: f64,
    max_iter: usize,
    sphere_count: u64,
    reference: Vec<f64>,
}

pub const CG_TOLERANCE: f64 = 1e-10;
/// Relative error at which a solver output counts as correct.
pub const SOLUTION_TOLERANCE: f64 = 1e-8;

impl CgKernel {
    pub fn new(a: CsrMatrix<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_9cba_11aa_22bb);
        let b: Vec<f64> = (0..a.n_rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_iter = 40 * a.n_rows;
        let reference_state =
            cg_reference(&a, &b, CG_TOLERANCE, max_iter).expect("SPD system converges");
        CgKernel {
            sphere_count: reference_state.iterations as u64,
            reference: reference_state.x,
            problem: Arc::new(CgProblem { a, b }),
            tol: CG_TOLERANCE,
            max_iter,
        }
    }
}

impl Kernel for CgKernel {
    fn name(&self) -> &'static str {
        "cg"
    }

    fn sphere_count(&self) -> u64 {
        self.sphere_count
    }

    fn reference(&self) -> &[f64] {
        &self.reference
    }

    fn tolerance(&self) -> f64 {
        SOLUTION_TOLERANCE
    }

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort> {
        let mut driver = SphereDriver::new(rt);
        let solved =
            cg_protected(&mut driver, &self.problem, strength, self.tol, self.max_iter)?;
        match solved {
            Ok(state) => Ok(KernelRun {
                output: state.x,
                detections: driver.detections,
                corrections: driver.corrections,
            }),
            Err(e) => Err(driver.abort(AbortKind::Solver(e.to_string()))),
        }
    }
}

/// Optional perturbation of the iterate between corrections, for resilience
/// experiments: flips one bit of `x[element]` at the start of the given
/// unprotected iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatePerturbation {
    pub iteration: usize,
    pub element: usize,
    pub bit: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct SscgOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub correction_period: usize,
    pub perturb: Option<StatePerturbation>,
}

impl Default for SscgOptions {
    fn default() -> Self {
        SscgOptions {
            tol: CG_TOLERANCE,
            max_iter: 0, // 0: derive from problem size
            correction_period: 8,
            perturb: None,
        }
    }
}

/// Self-stabilizing CG: unprotected iterations plus a periodically executed,
/// sphere-protected correction step that recomputes the true residual from
/// the current iterate and restarts the search direction from it.
pub fn sscg_protected(
    driver: &mut SphereDriver<'_>,
    problem: &Arc<CgProblem>,
    strength: Strength,
    opts: SscgOptions,
) -> Result<Result<SolverState<f64>, SolverError>, RunAbort> {
    let period = opts.correction_period.max(1);
    let n = problem.b.len();
    let max_iter = if opts.max_iter == 0 { 40 * n } else { opts.max_iter };
    let threshold = opts.tol * norm(&problem.b);

    let spec = SphereSpec::new(1u64, strength)
        .share(["A", "b"])
        .private(["x"])
        .compare(["residual_norm"]);
    // Correction step: recompute r = b - A x and restart the direction.
    let correction = |_r: usize, prob: &CgProblem, x: Vec<f64>| {
        let ax = prob.a.matvec(&x);
        let mut r = prob.b.clone();
        for i in 0..r.len() {
            r[i] -= ax[i];
        }
        let residual_norm = norm(&r);
        (Outputs::scalar("residual_norm", residual_norm), r)
    };

    let mut state = cg_init(&problem.b);
    let mut history = vec![norm(&state.r)];
    let mut iterations = 0usize;
    let mut verified_norm = f64::INFINITY;

    while iterations < max_iter && verified_norm > threshold {
        if let Some(p) = opts.perturb {
            if p.iteration == iterations {
                let i = p.element % n;
                state.x[i] = f64::from_bits(state.x[i].to_bits() ^ (1u64 << (p.bit % 64)));
            }
        }

        // Unprotected iteration.
        match cg_step(&problem.a, &state) {
            Ok((next, local_norm)) => {
                state = next;
                iterations += 1;
                history.push(local_norm);

                let due = iterations % period == 0 || local_norm <= threshold;
                if due {
                    let (record, r) = driver.protected(
                        &spec,
                        SphereInputs::new(Arc::clone(problem), state.x.clone()),
                        correction,
                    )?;
                    verified_norm = record.values[0].1.as_scalar().expect("scalar norm");
                    state.rho = dot(&r, &r);
                    state.p = r.clone();
                    state.r = r;
                    history.push(verified_norm);
                }
            }
            Err(curvature) => {
                return Ok(Err(SolverError::Breakdown {
                    iteration: iterations,
                    curvature,
                }))
            }
        }
    }

    Ok(Ok(SolverState {
        x: state.x,
        r: state.r,
        p: state.p,
        iterations,
        residual_history: history,
    }))
}

pub struct SscgKernel {
    problem: Arc<CgProblem>,
    opts: SscgOptions,
    sphere_count: u64,
    reference: Vec<f64>,
}

impl SscgKernel {
    pub fn new(a: CsrMatrix<f64>, seed: u64, opts: SscgOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_9cba_11aa_22bb);
        let b: Vec<f64> = (0..a.n_rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // The direct solve is the correctness anchor; the sphere count comes
        // from a fault-free dry run.
        let problem = Arc::new(CgProblem { a, b });
        let reference = {
            let dense = problem.a.to_dense();
            super::dense::lu_solve(&dense, &problem.b).expect("SPD system solvable")
        };
        let rt = Runtime::<f64>::with_config(redthreads::RuntimeConfig {
            max_strength: Strength::Off,
            ..Default::default()
        })
        .expect("runtime");
        let mut driver = SphereDriver::new(&rt);
        sscg_protected(&mut driver, &problem, Strength::Off, opts)
            .expect("no aborts serially")
            .expect("SPD system converges");
        let sphere_count = driver.sphere;
        rt.finalize().expect("idle runtime");
        SscgKernel {
            problem,
            opts,
            sphere_count,
            reference,
        }
    }
}

impl Kernel for SscgKernel {
    fn name(&self) -> &'static str {
        "sscg"
    }

    fn sphere_count(&self) -> u64 {
        self.sphere_count
    }

    fn reference(&self) -> &[f64] {
        &self.reference
    }

    fn tolerance(&self) -> f64 {
        SOLUTION_TOLERANCE
    }

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort> {
        let mut driver = SphereDriver::new(rt);
        let solved = sscg_protected(&mut driver, &self.problem, strength, self.opts)?;
        match solved {
            Ok(state) => Ok(KernelRun {
                output: state.x,
                detections: driver.detections,
                corrections: driver.corrections,
            }),
            Err(e) => Err(driver.abort(AbortKind::Solver(e.to_string()))),
        }
    }
}
