//! Dense matrices, the matrix-matrix multiplication kernel and a direct
//! solver used as the oracle for the iterative kernels.

use super::{Kernel, KernelRun, Real, RunAbort, SphereDriver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redthreads::{Outputs, Runtime, SphereInputs, SphereSpec, Strength, Value};
use std::sync::Arc;
use thiserror::Error;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<F> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DenseError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular at pivot {0}")]
    Singular(usize),
}

impl<F: Real> DenseMatrix<F> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        DenseMatrix {
            n_rows,
            n_cols,
            data: vec![F::zero(); n_rows * n_cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<F>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged rows");
            data.extend(row);
        }
        DenseMatrix { n_rows, n_cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    /// Uniform values in [-1, 1), deterministic in the seed.
    pub fn random(n_rows: usize, n_cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_rows * n_cols)
            .map(|_| F::from_f64(rng.gen_range(-1.0..1.0)).unwrap())
            .collect();
        DenseMatrix { n_rows, n_cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> F {
        self.data[i * self.n_cols + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn transposed(&self) -> DenseMatrix<F> {
        let mut t = Self::zeros(self.n_cols, self.n_rows);
        for i in 0..self.n_rows {
            for j in 0..self.n_cols {
                t.data[j * self.n_rows + i] = self.at(i, j);
            }
        }
        t
    }
}

/// Naive triple-loop reference multiply; the oracle the protected kernel is
/// checked against.
pub fn dgemm_reference<F: Real>(
    a: &DenseMatrix<F>,
    b: &DenseMatrix<F>,
) -> Result<DenseMatrix<F>, DenseError> {
    if a.n_cols != b.n_rows {
        return Err(DenseError::DimensionMismatch(format!(
            "{}x{} * {}x{}",
            a.n_rows, a.n_cols, b.n_rows, b.n_cols
        )));
    }
    let mut c = DenseMatrix::zeros(a.n_rows, b.n_cols);
    for i in 0..a.n_rows {
        for j in 0..b.n_cols {
            let mut acc = F::zero();
            for k in 0..a.n_cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            c.data[i * b.n_cols + j] = acc;
        }
    }
    Ok(c)
}

/// Direct solve via LU with partial pivoting. Oracle for the CG kernels.
pub fn lu_solve<F: Real>(a: &DenseMatrix<F>, b: &[F]) -> Result<Vec<F>, DenseError> {
    let n = a.n_rows;
    if a.n_cols != n || b.len() != n {
        return Err(DenseError::DimensionMismatch(format!(
            "{}x{} with rhs {}",
            a.n_rows,
            a.n_cols,
            b.len()
        )));
    }
    let mut lu = a.data.clone();
    let mut x: Vec<F> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[perm[col] * n + col].abs();
        for row in col + 1..n {
            let candidate = lu[perm[row] * n + col].abs();
            if candidate > best {
                best = candidate;
                pivot = row;
            }
        }
        if best == F::zero() {
            return Err(DenseError::Singular(col));
        }
        perm.swap(col, pivot);
        let diag = lu[perm[col] * n + col];
        for row in col + 1..n {
            let factor = lu[perm[row] * n + col] / diag;
            lu[perm[row] * n + col] = factor;
            for k in col + 1..n {
                let upper = lu[perm[col] * n + k];
                lu[perm[row] * n + k] = lu[perm[row] * n + k] - factor * upper;
            }
        }
    }

    // Forward substitution on the permuted rhs.
    let mut y = vec![F::zero(); n];
    for row in 0..n {
        let mut acc = x[perm[row]];
        for col in 0..row {
            acc -= lu[perm[row] * n + col] * y[col];
        }
        y[row] = acc;
    }
    // Back substitution.
    for row in (0..n).rev() {
        let mut acc = y[row];
        for col in row + 1..n {
            acc -= lu[perm[row] * n + col] * x[col];
        }
        x[row] = acc / lu[perm[row] * n + row];
    }
    Ok(x)
}

/// Shared operands of the multiplication kernel. `bt` is the right operand
/// stored transposed so each dot product streams two contiguous rows.
pub struct DgemmData {
    pub a: DenseMatrix<f64>,
    pub bt: DenseMatrix<f64>,
}

/// Matrix-matrix multiplication with one sphere per inner dot product:
/// the dot of one row of A and one column of B produces one element of C,
/// and that element is the compared output. A and B are shared, the element
/// indices are private. A coarse per-row granularity exists for measuring
/// scoping overhead.
pub struct DgemmKernel {
    data: Arc<DgemmData>,
    m: usize,
    k: usize,
    n: usize,
    coarse: bool,
    reference: Vec<f64>,
}

impl DgemmKernel {
    pub fn new(m: usize, k: usize, n: usize, seed: u64) -> Self {
        let a = DenseMatrix::<f64>::random(m, k, seed ^ 0xd6e8_feb8_6659_fd93);
        let b = DenseMatrix::<f64>::random(k, n, seed ^ 0xaf25_1af3_b0f0_25b4);
        let reference = dgemm_reference(&a, &b).expect("conforming dims").data;
        let bt = b.transposed();
        DgemmKernel {
            data: Arc::new(DgemmData { a, bt }),
            m,
            k,
            n,
            coarse: false,
            reference,
        }
    }

    /// One sphere per output row instead of per element.
    pub fn coarse(mut self) -> Self {
        self.coarse = true;
        self
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl Kernel for DgemmKernel {
    fn name(&self) -> &'static str {
        "dgemm"
    }

    fn sphere_count(&self) -> u64 {
        if self.coarse {
            self.m as u64
        } else {
            (self.m * self.n) as u64
        }
    }

    fn reference(&self) -> &[f64] {
        &self.reference
    }

    fn tolerance(&self) -> f64 {
        0.0
    }

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort> {
        let mut driver = SphereDriver::new(rt);
        let mut c = vec![0.0f64; self.m * self.n];
        let k = self.k;

        if self.coarse {
            let n = self.n;
            let spec = SphereSpec::new(0u64, strength)
                .share(["A", "B"])
                .private(["i"])
                .compare(["c_row"]);
            let unit = move |_r: usize, data: &DgemmData, i: usize| {
                let a_row = data.a.row(i);
                let row: Vec<f64> = (0..n).map(|j| dot(a_row, &data.bt.row(j)[..k])).collect();
                (Outputs::new().with("c_row", Value::Array(row)), ())
            };
            for i in 0..self.m {
                let (record, ()) =
                    driver.protected(&spec, SphereInputs::new(Arc::clone(&self.data), i), unit.clone())?;
                c[i * n..(i + 1) * n].copy_from_slice(record.values[0].1.as_slice());
            }
        } else {
            let spec = SphereSpec::new(0u64, strength)
                .share(["A", "B"])
                .private(["i", "j"])
                .compare(["c"]);
            let unit = move |_r: usize, data: &DgemmData, (i, j): (usize, usize)| {
                let y = dot(&data.a.row(i)[..k], &data.bt.row(j)[..k]);
                (Outputs::scalar("c", y), ())
            };
            for i in 0..self.m {
                for j in 0..self.n {
                    let (record, ()) = driver.protected(
                        &spec,
                        SphereInputs::new(Arc::clone(&self.data), (i, j)),
                        unit.clone(),
                    )?;
                    c[i * self.n + j] = record.values[0].1.as_scalar().expect("scalar output");
                }
            }
        }

        Ok(KernelRun {
            output: c,
            detections: driver.detections,
            corrections: driver.corrections,
        })
    }
}
