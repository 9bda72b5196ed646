//! Benchmark kernels and fault-injection campaigns for the redthreads
//! runtime.
//!
//! Five kernels scope spheres of replication the way their algorithms call
//! for: matrix multiplication per inner dot product, sparse matrix-vector
//! multiplication per row inner product, conjugate gradient per iteration,
//! self-stabilizing CG around its correction step only, and multigrid around
//! each restriction/relaxation/interpolation phase. The harness injects
//! seeded notification events and single-bit output corruptions, runs
//! campaigns, and estimates robustness ratings from rate sweeps.

pub mod harness;
pub mod kernels;

pub use harness::{
    failure_sweep, inject_corruption, robustness_rating, run_campaign, CampaignConfig,
    CampaignReport, InjectionKind, InjectionPlan, Rating, RunOutcome,
};
pub use kernels::{build_kernel, Kernel, KernelRun, Real, RunAbort};

/// 64-bit dense matrix, the concrete type the harness runs on.
pub type Dense64 = kernels::dense::DenseMatrix<f64>;
/// 64-bit CSR matrix.
pub type Csr64 = kernels::sparse::CsrMatrix<f64>;
/// 64-bit CG solver state.
pub type SolverState64 = kernels::cg::SolverState<f64>;
