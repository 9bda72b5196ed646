//! Benchmark kernels with programmer-scoped spheres of replication.
//!
//! Each kernel pairs the protected computation with an independent
//! correctness oracle and knows its fault-free sphere count, so injection
//! schedules can be derived ahead of a run.

pub mod cg;
pub mod dense;
pub mod multigrid;
pub mod sparse;

use num_traits::{Float, FromPrimitive, NumAssign};
use redthreads::{
    OutputRecord, Runtime, Scalar, SphereError, SphereInputs, SphereOutcome, SphereSpec, Strength,
};
use std::fmt::Display;
use std::iter::Sum;
use std::path::Path;
use thiserror::Error;

/// Floating-point scalar the kernels are generic over (f32 or f64).
pub trait Real: Scalar + Float + NumAssign + FromPrimitive + Sum + Display {}

impl<T> Real for T where T: Scalar + Float + NumAssign + FromPrimitive + Sum + Display {}

/// A completed kernel run.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRun {
    pub output: Vec<f64>,
    pub detections: u64,
    pub corrections: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbortKind {
    /// A detection-mode mismatch; the run is discarded rather than trusted.
    Detected,
    /// A vote with no majority.
    Uncorrectable,
    /// The application's own consistency check failed (a verified checksum
    /// disagreed with the state it summarizes).
    StateCorrupt,
    /// Numerical failure inside the kernel.
    Solver(String),
}

/// A run that did not produce a trustworthy output.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("run aborted at sphere {sphere}: {kind:?}")]
pub struct RunAbort {
    pub kind: AbortKind,
    /// Ordinal of the sphere at which the run stopped.
    pub sphere: u64,
    pub detections: u64,
    pub corrections: u64,
}

/// One benchmark code: its protected run, its fault-free reference output
/// and the tolerance at which outputs count as correct.
pub trait Kernel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Spheres a fault-free run issues; the injection schedule length.
    fn sphere_count(&self) -> u64;

    /// Fault-free output of the kernel.
    fn reference(&self) -> &[f64];

    /// Relative L2 tolerance for judging an output correct; `0.0` means
    /// bitwise-exact.
    fn tolerance(&self) -> f64;

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort>;
}

/// Relative L2 deviation of `output` from `reference`.
pub fn relative_l2(output: &[f64], reference: &[f64]) -> f64 {
    if output.len() != reference.len() {
        return f64::INFINITY;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (o, r) in output.iter().zip(reference) {
        num += (o - r) * (o - r);
        den += r * r;
    }
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    (num / den).sqrt()
}

/// True when `output` matches `reference` at `tolerance` (bitwise for 0.0).
pub fn output_matches(output: &[f64], reference: &[f64], tolerance: f64) -> bool {
    if output.len() != reference.len() {
        return false;
    }
    if tolerance == 0.0 {
        output
            .iter()
            .zip(reference)
            .all(|(o, r)| o.to_bits() == r.to_bits())
    } else {
        relative_l2(output, reference) <= tolerance
    }
}

/// Shared sphere-issuing loop state: counts spheres, detections and
/// corrections, and translates sphere outcomes into the kernel result
/// algebra (detection discards the run, no-majority aborts it).
pub struct SphereDriver<'rt> {
    rt: &'rt Runtime<f64>,
    pub sphere: u64,
    pub detections: u64,
    pub corrections: u64,
}

impl<'rt> SphereDriver<'rt> {
    pub fn new(rt: &'rt Runtime<f64>) -> Self {
        SphereDriver {
            rt,
            sphere: 0,
            detections: 0,
            corrections: 0,
        }
    }

    pub fn abort(&self, kind: AbortKind) -> RunAbort {
        RunAbort {
            kind,
            sphere: self.sphere,
            detections: self.detections,
            corrections: self.corrections,
        }
    }

    /// Runs one sphere and hands back the canonical record and carry.
    pub fn protected<S, P, C, F>(
        &mut self,
        spec: &SphereSpec,
        inputs: SphereInputs<S, P>,
        unit: F,
    ) -> Result<(OutputRecord<f64>, C), RunAbort>
    where
        S: Send + Sync + ?Sized + 'static,
        P: Clone + Send + 'static,
        C: Send + 'static,
        F: Fn(usize, &S, P) -> (redthreads::Outputs<f64>, C) + Clone + Send + Sync + 'static,
    {
        let result = self
            .rt
            .execute_sphere(spec, inputs, unit)
            .unwrap_or_else(|e: SphereError| panic!("kernel sphere misuse: {e}"));
        self.sphere += 1;
        match result.outcome {
            SphereOutcome::SerialDone { record, carry }
            | SphereOutcome::Verified { record, carry }
            | SphereOutcome::Deferred { record, carry } => Ok((record, carry)),
            SphereOutcome::Corrected { record, carry, .. } => {
                self.corrections += 1;
                Ok((record, carry))
            }
            SphereOutcome::DetectedError(_) => {
                self.detections += 1;
                Err(self.abort(AbortKind::Detected))
            }
            SphereOutcome::UncorrectableError => Err(self.abort(AbortKind::Uncorrectable)),
        }
    }
}

#[derive(Debug, Error)]
pub enum KernelBuildError {
    #[error("unknown kernel `{0}` (expected dgemm|spmv|cg|sscg|multigrid)")]
    UnknownKernel(String),
    #[error("invalid kernel size: {0}")]
    InvalidSize(String),
    #[error("matrix load failed: {0}")]
    Matrix(String),
}

/// Builds a kernel by CLI name at the given problem size.
pub fn build_kernel(
    name: &str,
    size: Option<usize>,
    matrix: Option<&Path>,
    seed: u64,
) -> Result<Box<dyn Kernel>, KernelBuildError> {
    match name {
        "dgemm" => {
            let n = size.unwrap_or(24);
            Ok(Box::new(dense::DgemmKernel::new(n, n, n, seed)))
        }
        "spmv" => match matrix {
            Some(path) => {
                let a = sparse::CsrMatrix::<f64>::from_matrix_market(path)
                    .map_err(|e| KernelBuildError::Matrix(e.to_string()))?;
                Ok(Box::new(sparse::SpmvKernel::from_matrix(a, seed)))
            }
            None => {
                let n = size.unwrap_or(512);
                let hw = (n / 8).clamp(2, 192);
                Ok(Box::new(sparse::SpmvKernel::banded(n, hw, seed)))
            }
        },
        "cg" => {
            let n = size.unwrap_or(96);
            let a = match matrix {
                Some(path) => sparse::CsrMatrix::<f64>::from_matrix_market(path)
                    .map_err(|e| KernelBuildError::Matrix(e.to_string()))?,
                None => sparse::spd_banded(n, (n / 12).clamp(2, 48), seed),
            };
            Ok(Box::new(cg::CgKernel::new(a, seed)))
        }
        "sscg" => {
            let n = size.unwrap_or(96);
            let a = sparse::spd_banded(n, (n / 12).clamp(2, 48), seed);
            Ok(Box::new(cg::SscgKernel::new(a, seed, cg::SscgOptions::default())))
        }
        "multigrid" => {
            let n = size.unwrap_or(129);
            let kernel = multigrid::MultigridKernel::new(n, 5, 6, seed)
                .map_err(|e| KernelBuildError::InvalidSize(e.to_string()))?;
            Ok(Box::new(kernel))
        }
        other => Err(KernelBuildError::UnknownKernel(other.to_string())),
    }
}

pub const KERNEL_NAMES: [&str; 5] = ["dgemm", "spmv", "cg", "sscg", "multigrid"];
