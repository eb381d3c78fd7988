//! Dense row-major 2-D tensor of f64 plus the few kernels everything else
//! is built from. All hidden activations in the crate live in this type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Tensor2::new",
                format!("{rows}x{cols}"),
                format!("data len {}", data.len()),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Identity matrix (used for generator-projection init).
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor2::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dimension("Tensor2::from_rows", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Tensor2::new(r, c, data)
    }

    /// 1 x n row vector.
    pub fn row_vec(v: &[f64]) -> Self {
        Tensor2 {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    /// n x 1 column vector.
    pub fn col_vec(v: &[f64]) -> Self {
        Tensor2 {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// self += alpha * other (shapes must match).
    pub fn add_scaled(&mut self, other: &Tensor2, alpha: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                "Tensor2::add_scaled",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    /// Matrix product self * rhs.
    pub fn matmul(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.rows {
            return Err(Error::dimension(
                "matmul",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", rhs.rows, rhs.cols),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// self * rhs^T.
    pub fn matmul_nt(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.cols != rhs.cols {
            return Err(Error::dimension(
                "matmul_nt",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{} (transposed)", rhs.rows, rhs.cols),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..rhs.rows {
                let brow = rhs.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * rhs.rows + j] = acc;
            }
        }
        Ok(out)
    }

    /// self^T * rhs.
    pub fn matmul_tn(&self, rhs: &Tensor2) -> Result<Tensor2> {
        if self.rows != rhs.rows {
            return Err(Error::dimension(
                "matmul_tn",
                format!("{}x{} (transposed)", self.rows, self.cols),
                format!("{}x{}", rhs.rows, rhs.cols),
            ));
        }
        let mut out = Tensor2::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = rhs.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Squared Euclidean distance between two equal-length slices.
    pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum()
    }
}

/// Numerically stable softmax of a finite, non-empty slice.
///
/// Output entries are positive and sum to one; the max entry is shifted out
/// before exponentiation so inputs like 1000 do not overflow.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("softmax of non-finite vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::new(rows, cols, data).unwrap()
    }

    /// Independent naive triple loop, kept separate from the production kernel.
    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Tensor2 {
        let mut out = Tensor2::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.random_range(1..6),
                rng.random_range(1..6),
                rng.random_range(1..6),
            );
            let a = random_tensor(&mut rng, m, k);
            let b = random_tensor(&mut rng, k, n);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_transposed_variants_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 5, 4);
        let nt = a.matmul_nt(&b).unwrap();
        // transpose b by hand
        let mut bt = Tensor2::zeros(4, 5);
        for i in 0..5 {
            for j in 0..4 {
                bt.set(j, i, b.get(i, j));
            }
        }
        let direct = a.matmul(&bt).unwrap();
        assert_eq!(nt, direct);

        let c = random_tensor(&mut rng, 4, 3);
        let d = random_tensor(&mut rng, 4, 2);
        let tn = c.matmul_tn(&d).unwrap();
        let mut ct = Tensor2::zeros(3, 4);
        for i in 0..4 {
            for j in 0..3 {
                ct.set(j, i, c.get(i, j));
            }
        }
        assert_eq!(tn, ct.matmul(&d).unwrap());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_analytic_two_thirds() {
        let p = softmax(&[(2.0f64).ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] < 1e-12);
    }

    #[test]
    fn softmax_empty_input_is_an_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_is_probability_vector_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..10);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let p = softmax(&v).unwrap();
            assert!(p.iter().all(|&x| x > 0.0));
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s}");
            let c = rng.random_range(-5.0..5.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
