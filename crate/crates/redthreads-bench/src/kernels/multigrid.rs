//! Geometric multigrid V-cycles for the 1D Poisson problem.
//!
//! Each restriction, relaxation and interpolation phase instance executes in
//! its own sphere; the compared output is a checksum (the sum of the grid
//! values the phase produced), which bounds comparison cost at the price of
//! letting compensating double errors escape. The kernel cross-checks the
//! canonical checksum against the grid it carries forward, so a corrupted
//! checksum is caught even in serial mode — as an aborted run rather than a
//! detected sphere error.

use super::{AbortKind, Kernel, KernelRun, Real, RunAbort, SphereDriver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redthreads::{Outputs, Runtime, SphereInputs, SphereSpec, Strength};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("grid of {points} points cannot support depth {depth}: need (points-1) a power of two with 2^depth <= points-1")]
    GridTooCoarse { points: usize, depth: usize },
}

/// Weighted-Jacobi sweeps on the interior of a Dirichlet grid.
/// `h2` is the squared mesh width; the operator is (2u[i]-u[i-1]-u[i+1])/h2.
pub fn weighted_jacobi<F: Real>(u: &[F], f: &[F], h2: F, omega: F, sweeps: usize) -> Vec<F> {
    let n = u.len();
    let mut current = u.to_vec();
    let mut next = u.to_vec();
    let half = F::from_f64(0.5).unwrap();
    for _ in 0..sweeps {
        for i in 1..n - 1 {
            let gauss = half * (current[i - 1] + current[i + 1] + h2 * f[i]);
            next[i] = current[i] + omega * (gauss - current[i]);
        }
        std::mem::swap(&mut current, &mut next);
    }
    current
}

/// Residual r = f - A u with homogeneous Dirichlet boundaries.
pub fn residual<F: Real>(u: &[F], f: &[F], h2: F) -> Vec<F> {
    let n = u.len();
    let mut r = vec![F::zero(); n];
    for i in 1..n - 1 {
        let au = (F::from_f64(2.0).unwrap() * u[i] - u[i - 1] - u[i + 1]) / h2;
        r[i] = f[i] - au;
    }
    r
}

/// Full-weighting restriction onto the next coarser grid.
pub fn restrict_full_weighting<F: Real>(fine: &[F]) -> Vec<F> {
    let nc = (fine.len() - 1) / 2 + 1;
    let quarter = F::from_f64(0.25).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let mut coarse = vec![F::zero(); nc];
    for i in 1..nc - 1 {
        let fi = 2 * i;
        coarse[i] = quarter * fine[fi - 1] + half * fine[fi] + quarter * fine[fi + 1];
    }
    coarse
}

/// Linear interpolation onto the next finer grid.
pub fn interpolate_linear<F: Real>(coarse: &[F]) -> Vec<F> {
    let nf = (coarse.len() - 1) * 2 + 1;
    let half = F::from_f64(0.5).unwrap();
    let mut fine = vec![F::zero(); nf];
    for i in 0..coarse.len() {
        fine[2 * i] = coarse[i];
    }
    for i in 0..coarse.len() - 1 {
        fine[2 * i + 1] = half * (coarse[i] + coarse[i + 1]);
    }
    fine
}

/// Direct tridiagonal solve of the coarsest system (Thomas algorithm).
pub fn coarsest_solve<F: Real>(f: &[F], h2: F) -> Vec<F> {
    let n = f.len();
    let mut u = vec![F::zero(); n];
    if n < 3 {
        return u;
    }
    let interior = n - 2;
    let two = F::from_f64(2.0).unwrap();
    let mut diag = vec![two / h2; interior];
    let off = -F::one() / h2;
    let mut rhs: Vec<F> = f[1..n - 1].to_vec();
    for i in 1..interior {
        let w = off / diag[i - 1];
        diag[i] = diag[i] - w * off;
        let prev = rhs[i - 1];
        rhs[i] = rhs[i] - w * prev;
    }
    u[interior] = rhs[interior - 1] / diag[interior - 1];
    for i in (0..interior - 1).rev() {
        u[i + 1] = (rhs[i] - off * u[i + 2]) / diag[i];
    }
    u
}

/// Fixed-order checksum of a produced grid, the compared output of a phase.
pub fn grid_checksum<F: Real>(v: &[F]) -> F {
    let mut acc = F::zero();
    for x in v {
        acc += *x;
    }
    acc
}

pub fn l2_norm<F: Real>(v: &[F]) -> F {
    let mut acc = F::zero();
    for x in v {
        acc += *x * *x;
    }
    acc.sqrt()
}

const OMEGA: f64 = 2.0 / 3.0;
const SWEEPS: usize = 2;

/// One protected phase of the V-cycle. The arguments are private (copied per
/// replica); the produced grid is the carry and its checksum the compared
/// output.
#[derive(Debug, Clone)]
pub enum PhaseCall {
    /// (u, f, h2) -> smoothed u
    Smooth { u: Vec<f64>, f: Vec<f64>, h2: f64 },
    /// (u, f, h2) -> restricted residual on the coarser grid
    Restrict { u: Vec<f64>, f: Vec<f64>, h2: f64 },
    /// (u_fine, e_coarse) -> corrected fine grid
    Interpolate { u: Vec<f64>, e: Vec<f64> },
}

/// Pure phase application; the single arithmetic path used by both the
/// protected and the reference executions.
pub fn apply_phase(call: &PhaseCall) -> Vec<f64> {
    match call {
        PhaseCall::Smooth { u, f, h2 } => weighted_jacobi(u, f, *h2, OMEGA, SWEEPS),
        PhaseCall::Restrict { u, f, h2 } => restrict_full_weighting(&residual(u, f, *h2)),
        PhaseCall::Interpolate { u, e } => {
            let correction = interpolate_linear(e);
            let mut out = u.clone();
            for i in 0..out.len() {
                out[i] += correction[i];
            }
            out
        }
    }
}

/// Phase executor: either the pure reference path or a sphere per phase.
trait PhaseExec {
    fn phase(&mut self, call: PhaseCall) -> Result<Vec<f64>, RunAbort>;
}

struct DirectExec;

impl PhaseExec for DirectExec {
    fn phase(&mut self, call: PhaseCall) -> Result<Vec<f64>, RunAbort> {
        Ok(apply_phase(&call))
    }
}

struct ProtectedExec<'rt, 'd> {
    driver: &'d mut SphereDriver<'rt>,
    spec: SphereSpec,
}

impl PhaseExec for ProtectedExec<'_, '_> {
    fn phase(&mut self, call: PhaseCall) -> Result<Vec<f64>, RunAbort> {
        let unit = |_r: usize, _shared: &(), call: PhaseCall| {
            let out = apply_phase(&call);
            (Outputs::scalar("checksum", grid_checksum(&out)), out)
        };
        let (record, grid) =
            self.driver
                .protected(&self.spec, SphereInputs::private_only(call), unit)?;
        let verified = record.values[0].1.as_scalar().expect("scalar checksum");
        // The application consumes the verified checksum: a grid that does
        // not add up to it cannot be trusted.
        if grid_checksum(&grid).to_bits() != verified.to_bits() {
            return Err(self.driver.abort(AbortKind::StateCorrupt));
        }
        Ok(grid)
    }
}

fn v_cycle<E: PhaseExec>(
    exec: &mut E,
    u: Vec<f64>,
    f: &[f64],
    h2: f64,
    level: usize,
    depth: usize,
) -> Result<Vec<f64>, RunAbort> {
    if level == depth {
        return Ok(coarsest_solve(f, h2));
    }
    let u = exec.phase(PhaseCall::Smooth {
        u,
        f: f.to_vec(),
        h2,
    })?;
    let coarse_rhs = exec.phase(PhaseCall::Restrict {
        u: u.clone(),
        f: f.to_vec(),
        h2,
    })?;
    let coarse_zero = vec![0.0; coarse_rhs.len()];
    let e = v_cycle(exec, coarse_zero, &coarse_rhs, h2 * 4.0, level + 1, depth)?;
    let u = exec.phase(PhaseCall::Interpolate { u, e })?;
    exec.phase(PhaseCall::Smooth {
        u,
        f: f.to_vec(),
        h2,
    })
}

/// Result of a multigrid solve: the grid plus the residual norm after each
/// V-cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MultigridSolution {
    pub u: Vec<f64>,
    pub cycle_residual_norms: Vec<f64>,
}

fn solve<E: PhaseExec>(
    exec: &mut E,
    f: &[f64],
    h2: f64,
    depth: usize,
    cycles: usize,
) -> Result<MultigridSolution, RunAbort> {
    let mut u = vec![0.0; f.len()];
    let mut norms = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        u = v_cycle(exec, u, f, h2, 0, depth)?;
        norms.push(l2_norm(&residual(&u, f, h2)));
    }
    Ok(MultigridSolution {
        u,
        cycle_residual_norms: norms,
    })
}

/// Validates that `points` supports `depth` levels of coarsening.
pub fn validate_grid(points: usize, depth: usize) -> Result<(), GridError> {
    let intervals = points.saturating_sub(1);
    if depth == 0
        || points < 3
        || !intervals.is_power_of_two()
        || (1usize << depth) > intervals
    {
        return Err(GridError::GridTooCoarse { points, depth });
    }
    Ok(())
}

/// 1D Poisson V-cycle kernel: `cycles` V-cycles of depth `depth` on a grid
/// of `points` points, phases protected as spheres.
pub struct MultigridKernel {
    f: Arc<Vec<f64>>,
    h2: f64,
    depth: usize,
    cycles: usize,
    reference: Vec<f64>,
    reference_norms: Vec<f64>,
    sphere_count: u64,
}

impl MultigridKernel {
    pub fn new(points: usize, depth: usize, cycles: usize, seed: u64) -> Result<Self, GridError> {
        validate_grid(points, depth)?;
        let h = 1.0 / (points - 1) as f64;
        let h2 = h * h;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77aa_22cc_55ee_0011);
        let f: Vec<f64> = (0..points)
            .map(|i| {
                let x = i as f64 * h;
                (std::f64::consts::PI * x).sin() + 0.25 * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let reference = solve(&mut DirectExec, &f, h2, depth, cycles)
            .expect("direct execution cannot abort");
        Ok(MultigridKernel {
            sphere_count: (cycles * 4 * depth) as u64,
            reference_norms: reference.cycle_residual_norms,
            reference: reference.u,
            f: Arc::new(f),
            h2,
            depth,
            cycles,
        })
    }

    /// Residual norms after each reference V-cycle.
    pub fn reference_cycle_norms(&self) -> &[f64] {
        &self.reference_norms
    }

    /// Reference path run to convergence (many cycles), for oracle checks.
    pub fn converged_reference(&self, cycles: usize) -> MultigridSolution {
        solve(&mut DirectExec, &self.f, self.h2, self.depth, cycles)
            .expect("direct execution cannot abort")
    }
}

impl Kernel for MultigridKernel {
    fn name(&self) -> &'static str {
        "multigrid"
    }

    fn sphere_count(&self) -> u64 {
        self.sphere_count
    }

    fn reference(&self) -> &[f64] {
        &self.reference
    }

    fn tolerance(&self) -> f64 {
        0.0
    }

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort> {
        let mut driver = SphereDriver::new(rt);
        let spec = SphereSpec::new(2u64, strength)
            .private(["phase_input"])
            .compare(["checksum"]);
        let solution = {
            let mut exec = ProtectedExec {
                driver: &mut driver,
                spec,
            };
            solve(&mut exec, &self.f, self.h2, self.depth, self.cycles)?
        };
        Ok(KernelRun {
            output: solution.u,
            detections: driver.detections,
            corrections: driver.corrections,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rhs_zero_guess_has_zero_residual() {
        let f = vec![0.0; 17];
        let r = residual(&vec![0.0; 17], &f, 1.0 / 256.0);
        assert_eq!(l2_norm(&r), 0.0);
    }

    #[test]
    fn grid_validation_rejects_excessive_depth() {
        assert!(validate_grid(129, 5).is_ok());
        assert!(validate_grid(129, 7).is_ok());
        assert!(matches!(
            validate_grid(129, 8),
            Err(GridError::GridTooCoarse { .. })
        ));
        assert!(validate_grid(100, 2).is_err());
        assert!(validate_grid(3, 0).is_err());
    }

    #[test]
    fn v_cycles_contract_the_residual_quickly() {
        let kernel = MultigridKernel::new(129, 5, 6, 7).unwrap();
        let norms = kernel.reference_cycle_norms();
        let f: Vec<f64> = (0..129)
            .map(|i| {
                let x = i as f64 / 128.0;
                (std::f64::consts::PI * x).sin()
            })
            .collect();
        let initial = l2_norm(&residual(&vec![0.0; 129], &f, kernel.h2));
        assert!(norms[0] / initial < 0.2, "first cycle ratio {}", norms[0] / initial);
        for w in norms.windows(2) {
            if w[0] > 1e-12 {
                assert!(w[1] / w[0] < 0.2, "cycle ratio {} not < 0.2", w[1] / w[0]);
            }
        }
    }

    #[test]
    fn coarsest_solve_inverts_the_operator() {
        let n = 5;
        let h2 = 1.0 / 16.0;
        let u_true = vec![0.0, 1.0, -2.0, 0.5, 0.0];
        let mut f = vec![0.0; n];
        for i in 1..n - 1 {
            f[i] = (2.0 * u_true[i] - u_true[i - 1] - u_true[i + 1]) / h2;
        }
        let u = coarsest_solve(&f, h2);
        for (a, b) in u.iter().zip(&u_true) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn interpolation_and_restriction_shapes_compose() {
        let coarse = vec![0.0, 1.0, 2.0, 1.0, 0.0];
        let fine = interpolate_linear(&coarse);
        assert_eq!(fine.len(), 9);
        let back = restrict_full_weighting(&fine);
        assert_eq!(back.len(), 5);
    }
}
