//! Compressed sparse row matrices, Matrix Market loading and the
//! sparse matrix-vector kernel.

use super::dense::DenseMatrix;
use super::{Kernel, KernelRun, Real, RunAbort, SphereDriver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redthreads::{Outputs, Runtime, SphereInputs, SphereSpec, Strength};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CsrError {
    #[error("row_ptr must start at 0")]
    BadRowPtrStart,
    #[error("row_ptr must be nondecreasing (row {0})")]
    RowPtrDecreasing(usize),
    #[error("row_ptr length {got} does not match n_rows {rows} + 1")]
    BadRowPtrLen { got: usize, rows: usize },
    #[error("column index {col} out of bounds for {cols} columns")]
    ColumnOutOfBounds { col: usize, cols: usize },
    #[error("col_idx/values length mismatch with row_ptr")]
    BadNnz,
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<F> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Real> CsrMatrix<F> {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<F>,
    ) -> Result<Self, CsrError> {
        if row_ptr.len() != n_rows + 1 {
            return Err(CsrError::BadRowPtrLen {
                got: row_ptr.len(),
                rows: n_rows,
            });
        }
        if row_ptr[0] != 0 {
            return Err(CsrError::BadRowPtrStart);
        }
        for i in 1..row_ptr.len() {
            if row_ptr[i] < row_ptr[i - 1] {
                return Err(CsrError::RowPtrDecreasing(i - 1));
            }
        }
        if col_idx.len() != *row_ptr.last().unwrap() || values.len() != col_idx.len() {
            return Err(CsrError::BadNnz);
        }
        for &col in &col_idx {
            if col >= n_cols {
                return Err(CsrError::ColumnOutOfBounds { col, cols: n_cols });
            }
        }
        Ok(CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, F)>,
    ) -> Result<Self, CsrError> {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<F> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                let idx = values.len() - 1;
                values[idx] += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] = col_idx.len();
                last = Some((r, c));
            }
        }
        // forward-fill rows without entries
        for i in 1..row_ptr.len() {
            if row_ptr[i] < row_ptr[i - 1] {
                row_ptr[i] = row_ptr[i - 1];
            }
        }
        CsrMatrix::new(n_rows, n_cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![F::one(); n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Inner product of row `i` with `x`, in stored order.
    pub fn row_dot(&self, i: usize, x: &[F]) -> F {
        let mut acc = F::zero();
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            acc += self.values[k] * x[self.col_idx[k]];
        }
        acc
    }

    /// Full matrix-vector product, one `row_dot` per row.
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        (0..self.n_rows).map(|i| self.row_dot(i, x)).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix<F> {
        let mut dense = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                dense.data[i * self.n_cols + self.col_idx[k]] += self.values[k];
            }
        }
        dense
    }
}

#[derive(Debug, Error)]
pub enum MatrixMarketError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Structure(#[from] CsrError),
}

impl<F: Real> CsrMatrix<F> {
    /// Loads a Matrix Market `coordinate real` file (general or symmetric).
    pub fn from_matrix_market(path: &Path) -> Result<Self, MatrixMarketError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (line_no, header) = lines
            .next()
            .ok_or_else(|| MatrixMarketError::Parse {
                line: 0,
                msg: "empty file".into(),
            })
            .and_then(|(i, l)| Ok((i + 1, l?)))?;
        let fields: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
        if fields.len() < 5
            || fields[0] != "%%matrixmarket"
            || fields[1] != "matrix"
            || fields[2] != "coordinate"
        {
            return Err(MatrixMarketError::Parse {
                line: line_no,
                msg: "expected `%%MatrixMarket matrix coordinate ...` header".into(),
            });
        }
        if fields[3] != "real" && fields[3] != "integer" {
            return Err(MatrixMarketError::Parse {
                line: line_no,
                msg: format!("unsupported field type `{}` (expected real)", fields[3]),
            });
        }
        let symmetric = match fields[4].as_str() {
            "general" => false,
            "symmetric" => true,
            other => {
                return Err(MatrixMarketError::Parse {
                    line: line_no,
                    msg: format!("unsupported symmetry `{other}`"),
                })
            }
        };

        let mut dims: Option<(usize, usize, usize)> = None;
        let mut triplets: Vec<(usize, usize, F)> = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let line_no = i + 1;
            let text = line.trim();
            if text.is_empty() || text.starts_with('%') {
                continue;
            }
            let mut parts = text.split_whitespace();
            if dims.is_none() {
                let parse = |p: Option<&str>| -> Result<usize, MatrixMarketError> {
                    p.and_then(|s| s.parse().ok()).ok_or(MatrixMarketError::Parse {
                        line: line_no,
                        msg: "expected `rows cols nnz`".into(),
                    })
                };
                let rows = parse(parts.next())?;
                let cols = parse(parts.next())?;
                let nnz = parse(parts.next())?;
                dims = Some((rows, cols, nnz));
                triplets.reserve(if symmetric { nnz * 2 } else { nnz });
                continue;
            }
            let (rows, cols, _) = dims.unwrap();
            let r: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(MatrixMarketError::Parse {
                    line: line_no,
                    msg: "bad row index".into(),
                })?;
            let c: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(MatrixMarketError::Parse {
                    line: line_no,
                    msg: "bad column index".into(),
                })?;
            let v: f64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(MatrixMarketError::Parse {
                    line: line_no,
                    msg: "bad value".into(),
                })?;
            if r == 0 || c == 0 || r > rows || c > cols {
                return Err(MatrixMarketError::Parse {
                    line: line_no,
                    msg: format!("index ({r},{c}) out of bounds for {rows}x{cols}"),
                });
            }
            let value = F::from_f64(v).unwrap();
            triplets.push((r - 1, c - 1, value));
            if symmetric && r != c {
                triplets.push((c - 1, r - 1, value));
            }
        }
        let (rows, cols, _) = dims.ok_or(MatrixMarketError::Parse {
            line: 0,
            msg: "missing dimensions line".into(),
        })?;
        Ok(CsrMatrix::from_triplets(rows, cols, triplets)?)
    }
}

/// Banded matrix with uniform random entries; rows are dense within the band
/// so a per-row sphere carries real work.
pub fn banded<F: Real>(n: usize, half_bandwidth: usize, seed: u64) -> CsrMatrix<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for i in 0..n {
        let lo = i.saturating_sub(half_bandwidth);
        let hi = (i + half_bandwidth + 1).min(n);
        for j in lo..hi {
            col_idx.push(j);
            let v = loop {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if v != 0.0 {
                    break v;
                }
            };
            values.push(F::from_f64(v).unwrap());
        }
        row_ptr.push(col_idx.len());
    }
    CsrMatrix::new(n, n, row_ptr, col_idx, values).expect("well-formed band")
}

/// Symmetric positive definite banded matrix: random symmetric band made
/// strictly diagonally dominant.
pub fn spd_banded<F: Real>(n: usize, half_bandwidth: usize, seed: u64) -> CsrMatrix<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = vec![std::collections::BTreeMap::<usize, f64>::new(); n];
    for i in 0..n {
        for j in i + 1..(i + half_bandwidth + 1).min(n) {
            let v: f64 = rng.gen_range(-1.0..1.0);
            entries[i].insert(j, v);
            entries[j].insert(i, v);
        }
    }
    let mut triplets = Vec::new();
    for (i, row) in entries.iter().enumerate() {
        let off_sum: f64 = row.values().map(|v| v.abs()).sum();
        triplets.push((i, i, F::from_f64(off_sum + 1.0).unwrap()));
        for (&j, &v) in row {
            triplets.push((i, j, F::from_f64(v).unwrap()));
        }
    }
    CsrMatrix::from_triplets(n, n, triplets).expect("well-formed spd band")
}

/// Shared operands of the sparse matrix-vector kernel.
pub struct SpmvData {
    pub a: CsrMatrix<f64>,
    pub x: Vec<f64>,
}

/// Sparse matrix-vector multiplication with one sphere per row inner
/// product. The matrix and the input vector are shared; only the loop
/// counter (the row index) is private; the reduced element y[i] is compared.
pub struct SpmvKernel {
    data: Arc<SpmvData>,
    reference: Vec<f64>,
}

impl SpmvKernel {
    pub fn banded(n: usize, half_bandwidth: usize, seed: u64) -> Self {
        Self::from_matrix(banded(n, half_bandwidth, seed), seed ^ 0x1234_5678)
    }

    pub fn from_matrix(a: CsrMatrix<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..a.n_cols).map(|_| rng.gen_range(0.1..1.0)).collect();
        // Independent oracle path: densify and take full-row dot products.
        let dense = a.to_dense();
        let reference: Vec<f64> = (0..a.n_rows)
            .map(|i| {
                let mut acc = 0.0;
                for j in 0..a.n_cols {
                    acc += dense.at(i, j) * x[j];
                }
                acc
            })
            .collect();
        SpmvKernel {
            data: Arc::new(SpmvData { a, x }),
            reference,
        }
    }
}

impl Kernel for SpmvKernel {
    fn name(&self) -> &'static str {
        "spmv"
    }

    fn sphere_count(&self) -> u64 {
        self.data.a.n_rows as u64
    }

    fn reference(&self) -> &[f64] {
        &self.reference
    }

    fn tolerance(&self) -> f64 {
        0.0
    }

    fn run(&self, rt: &Runtime<f64>, strength: Strength) -> Result<KernelRun, RunAbort> {
        let mut driver = SphereDriver::new(rt);
        let n = self.data.a.n_rows;
        let mut y = vec![0.0f64; n];
        let spec = SphereSpec::new(0u64, strength)
            .share(["A", "x"])
            .private(["row"])
            .compare(["y"]);
        let unit = |_r: usize, data: &SpmvData, row: usize| {
            (Outputs::scalar("y", data.a.row_dot(row, &data.x)), ())
        };
        for row in 0..n {
            let (record, ()) =
                driver.protected(&spec, SphereInputs::new(Arc::clone(&self.data), row), unit)?;
            y[row] = record.values[0].1.as_scalar().expect("scalar output");
        }
        Ok(KernelRun {
            output: y,
            detections: driver.detections,
            corrections: driver.corrections,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matvec_is_identity() {
        let a = CsrMatrix::<f64>::identity(4);
        let v = vec![1.0, -2.0, 3.5, 0.25];
        assert_eq!(a.matvec(&v), v);
    }

    #[test]
    fn two_by_two_matches_dense_oracle() {
        // A = [[2,0],[1,3]] in CSR form.
        let a = CsrMatrix::new(2, 2, vec![0, 1, 3], vec![0, 0, 1], vec![2.0, 1.0, 3.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 2.0]), vec![2.0, 7.0]);
    }

    #[test]
    fn empty_row_yields_zero() {
        let a = CsrMatrix::new(3, 3, vec![0, 1, 1, 2], vec![0, 2], vec![5.0, 4.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]), vec![5.0, 0.0, 4.0]);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(matches!(
            CsrMatrix::<f64>::new(2, 2, vec![1, 1, 2], vec![0, 1], vec![1.0, 1.0]),
            Err(CsrError::BadRowPtrStart)
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]),
            Err(CsrError::RowPtrDecreasing(_))
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(2, 2, vec![0, 1, 2], vec![0, 5], vec![1.0, 1.0]),
            Err(CsrError::ColumnOutOfBounds { .. })
        ));
    }

    #[test]
    fn matrix_market_general_round_trip() {
        let dir = std::env::temp_dir().join("redbench-mm-general");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("general.mtx");
        std::fs::write(
            &path,
            "%%MatrixMarket matrix coordinate real general\n% comment\n3 3 4\n1 1 2.0\n2 2 3.0\n3 1 -1.0\n3 3 4.0\n",
        )
        .unwrap();
        let a = CsrMatrix::<f64>::from_matrix_market(&path).unwrap();
        assert_eq!(a.n_rows, 3);
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]), vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn matrix_market_symmetric_mirrors_off_diagonals() {
        let dir = std::env::temp_dir().join("redbench-mm-sym");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sym.mtx");
        std::fs::write(
            &path,
            "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 2.0\n2 1 5.0\n",
        )
        .unwrap();
        let a = CsrMatrix::<f64>::from_matrix_market(&path).unwrap();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.matvec(&[1.0, 0.0]), vec![2.0, 5.0]);
        assert_eq!(a.matvec(&[0.0, 1.0]), vec![5.0, 0.0]);
    }

    #[test]
    fn matrix_market_rejects_garbage() {
        let dir = std::env::temp_dir().join("redbench-mm-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mtx");
        std::fs::write(&path, "not a matrix\n").unwrap();
        assert!(CsrMatrix::<f64>::from_matrix_market(&path).is_err());
    }

    #[test]
    fn spd_band_is_symmetric_and_dominant() {
        let a = spd_banded::<f64>(32, 4, 3);
        let dense = a.to_dense();
        for i in 0..32 {
            let mut off = 0.0;
            for j in 0..32 {
                if i != j {
                    assert_eq!(dense.at(i, j), dense.at(j, i));
                    off += dense.at(i, j).abs();
                }
            }
            assert!(dense.at(i, i) > off);
        }
    }
}
