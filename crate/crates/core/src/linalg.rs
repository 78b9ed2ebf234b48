//! Small structured linear algebra used by the subsolvers and the Newton oracle.
//!
//! Jacobians are carried as [`StructuredMatrix`] so that scaled identities and
//! banded operators (the implicit Lax-Friedrichs map is tridiagonal) never get
//! densified inside the Levenberg-Marquardt normal equations.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Square band matrix with `lower` sub-diagonals and `upper` super-diagonals.
///
/// Entry `(i, j)` lives at `data[(upper + i - j) * n + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self {
            n,
            lower,
            upper,
            data: vec![0.0; (lower + upper + 1) * n],
        }
    }

    pub fn from_dense(a: &Matrix, lower: usize, upper: usize) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "band matrices are square");
        let mut b = Self::zeros(a.nrows(), lower, upper);
        for j in 0..b.n {
            for i in b.row_range(j) {
                b.set(i, j, a[(i, j)]);
            }
        }
        b
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> usize {
        self.lower
    }

    pub fn upper(&self) -> usize {
        self.upper
    }

    /// Rows that may hold a nonzero in column `j`.
    fn row_range(&self, j: usize) -> std::ops::Range<usize> {
        j.saturating_sub(self.upper)..(j + self.lower + 1).min(self.n)
    }

    /// Columns that may hold a nonzero in row `i`.
    fn col_range(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.lower)..(i + self.upper + 1).min(self.n)
    }

    fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.lower >= i && i + self.upper >= j
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[(self.upper + i - j) * self.n + j]
        } else {
            0.0
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        self.data[(self.upper + i - j) * self.n + j] = v;
    }

    pub fn add_to(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "({i}, {j}) outside band");
        self.data[(self.upper + i - j) * self.n + j] += v;
    }

    pub fn mul(&self, x: &Vector) -> Vector {
        let mut y = Vector::zeros(self.n);
        for i in 0..self.n {
            y[i] = self.col_range(i).map(|j| self.get(i, j) * x[j]).sum();
        }
        y
    }

    pub fn tr_mul(&self, x: &Vector) -> Vector {
        let mut y = Vector::zeros(self.n);
        for j in 0..self.n {
            y[j] = self.row_range(j).map(|i| self.get(i, j) * x[i]).sum();
        }
        y
    }

    pub fn to_dense(&self) -> Matrix {
        let mut a = Matrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for i in self.row_range(j) {
                a[(i, j)] = self.get(i, j);
            }
        }
        a
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `AᵀA`, which has `lower + upper` diagonals on each side.
    pub fn gram(&self) -> BandMatrix {
        let w = self.lower + self.upper;
        let mut g = BandMatrix::zeros(self.n, w, w);
        for r in 0..self.n {
            let cols = self.col_range(r);
            for i in cols.clone() {
                let a_ri = self.get(r, i);
                if a_ri == 0.0 {
                    continue;
                }
                for j in cols.clone() {
                    g.add_to(i, j, a_ri * self.get(r, j));
                }
            }
        }
        g
    }

    /// Copy into a band of at least the requested widths.
    pub fn widened(&self, lower: usize, upper: usize) -> BandMatrix {
        let mut out = BandMatrix::zeros(self.n, lower.max(self.lower), upper.max(self.upper));
        for j in 0..self.n {
            for i in self.row_range(j) {
                out.set(i, j, self.get(i, j));
            }
        }
        out
    }

    /// Solve `A x = b` by banded Gaussian elimination with partial pivoting.
    ///
    /// Returns `None` when a zero pivot is met.
    pub fn solve(&self, b: &Vector) -> Option<Vector> {
        BandLu::factor(self)?.solve(b)
    }
}

/// LU factors of a band matrix, row-pivoted. Storage follows the usual
/// LAPACK `gbtrf` layout with `lower` extra rows for fill-in.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    lower: usize,
    upper: usize,
    ld: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandLu {
    fn idx(&self, i: usize, j: usize) -> usize {
        // kv = lower + upper is the row of the main diagonal.
        (self.lower + self.upper + i - j) * self.n + j
    }

    pub fn factor(a: &BandMatrix) -> Option<Self> {
        let n = a.n;
        let (kl, ku) = (a.lower, a.upper);
        let ld = 2 * kl + ku + 1;
        let mut lu = BandLu {
            n,
            lower: kl,
            upper: ku,
            ld,
            ab: vec![0.0; ld * n],
            pivots: vec![0; n],
        };
        for j in 0..n {
            for i in a.row_range(j) {
                let k = lu.idx(i, j);
                lu.ab[k] = a.get(i, j);
            }
        }
        let kv = kl + ku;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = lu.ab[lu.idx(j, j)].abs();
            for t in 1..=km {
                let v = lu.ab[lu.idx(j + t, j)].abs();
                if v > best {
                    best = v;
                    jp = t;
                }
            }
            lu.pivots[j] = j + jp;
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let (p, q) = (lu.idx(j, c), lu.idx(j + jp, c));
                    lu.ab.swap(p, q);
                }
            }
            let pivot = lu.ab[lu.idx(j, j)];
            for t in 1..=km {
                let k = lu.idx(j + t, j);
                lu.ab[k] /= pivot;
            }
            for c in (j + 1)..=ju {
                let u_jc = lu.ab[lu.idx(j, c)];
                if u_jc == 0.0 {
                    continue;
                }
                for t in 1..=km {
                    let l = lu.ab[lu.idx(j + t, j)];
                    let k = lu.idx(j + t, c);
                    lu.ab[k] -= l * u_jc;
                }
            }
            debug_assert!(kv + km < lu.ld);
        }
        Some(lu)
    }

    pub fn solve(&self, b: &Vector) -> Option<Vector> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        for j in 0..n {
            let p = self.pivots[j];
            if p != j {
                x.swap_rows(j, p);
            }
            let km = self.lower.min(n - 1 - j);
            let xj = x[j];
            for t in 1..=km {
                x[j + t] -= self.ab[self.idx(j + t, j)] * xj;
            }
        }
        let kv = self.lower + self.upper;
        for j in (0..n).rev() {
            let d = self.ab[self.idx(j, j)];
            x[j] /= d;
            let xj = x[j];
            for r in j.saturating_sub(kv)..j {
                x[r] -= self.ab[self.idx(r, j)] * xj;
            }
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

/// A matrix with enough structure to keep normal equations cheap.
#[derive(Debug, Clone, PartialEq)]
pub enum StructuredMatrix {
    /// `scale · I` of the given dimension.
    Identity { dim: usize, scale: f64 },
    Dense(Matrix),
    Banded(BandMatrix),
}

impl StructuredMatrix {
    pub fn identity(dim: usize) -> Self {
        StructuredMatrix::Identity { dim, scale: 1.0 }
    }

    pub fn nrows(&self) -> usize {
        match self {
            StructuredMatrix::Identity { dim, .. } => *dim,
            StructuredMatrix::Dense(a) => a.nrows(),
            StructuredMatrix::Banded(b) => b.dim(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            StructuredMatrix::Identity { dim, .. } => *dim,
            StructuredMatrix::Dense(a) => a.ncols(),
            StructuredMatrix::Banded(b) => b.dim(),
        }
    }

    pub fn mul(&self, x: &Vector) -> Vector {
        match self {
            StructuredMatrix::Identity { scale, .. } => x * *scale,
            StructuredMatrix::Dense(a) => a * x,
            StructuredMatrix::Banded(b) => b.mul(x),
        }
    }

    pub fn tr_mul(&self, x: &Vector) -> Vector {
        match self {
            StructuredMatrix::Identity { scale, .. } => x * *scale,
            StructuredMatrix::Dense(a) => a.tr_mul(x),
            StructuredMatrix::Banded(b) => b.tr_mul(x),
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        match &mut self {
            StructuredMatrix::Identity { scale, .. } => *scale *= s,
            StructuredMatrix::Dense(a) => *a *= s,
            StructuredMatrix::Banded(b) => b.scale(s),
        }
        self
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            StructuredMatrix::Identity { dim, scale } => Matrix::identity(*dim, *dim) * *scale,
            StructuredMatrix::Dense(a) => a.clone(),
            StructuredMatrix::Banded(b) => b.to_dense(),
        }
    }

    /// `AᵀA` in the cheapest representation available.
    pub fn gram(&self) -> StructuredMatrix {
        match self {
            StructuredMatrix::Identity { dim, scale } => StructuredMatrix::Identity {
                dim: *dim,
                scale: scale * scale,
            },
            StructuredMatrix::Dense(a) if a.nrows() == 0 => StructuredMatrix::Identity {
                dim: a.ncols(),
                scale: 0.0,
            },
            StructuredMatrix::Dense(a) => StructuredMatrix::Dense(a.tr_mul(a)),
            StructuredMatrix::Banded(b) => StructuredMatrix::Banded(b.gram()),
        }
    }

    /// Sum of two square matrices of equal dimension.
    pub fn add(&self, other: &StructuredMatrix) -> StructuredMatrix {
        use StructuredMatrix::*;
        assert_eq!(self.ncols(), other.ncols());
        match (self, other) {
            (Identity { dim, scale: a }, Identity { scale: b, .. }) => Identity {
                dim: *dim,
                scale: a + b,
            },
            (Banded(b), Identity { scale, .. }) | (Identity { scale, .. }, Banded(b)) => {
                let mut out = b.clone();
                for i in 0..out.dim() {
                    out.add_to(i, i, *scale);
                }
                Banded(out)
            }
            (Banded(a), Banded(b)) => {
                let mut out = a.widened(b.lower(), b.upper());
                for j in 0..b.dim() {
                    for i in b.row_range(j) {
                        out.add_to(i, j, b.get(i, j));
                    }
                }
                Banded(out)
            }
            (Dense(a), other) | (other, Dense(a)) => Dense(a + other.to_dense()),
        }
    }

    pub fn max_diagonal(&self) -> f64 {
        match self {
            StructuredMatrix::Identity { scale, .. } => *scale,
            StructuredMatrix::Dense(a) => a.diagonal().max(),
            StructuredMatrix::Banded(b) => (0..b.dim()).map(|i| b.get(i, i)).fold(f64::MIN, f64::max),
        }
    }

    /// Solve the square system `A x = b`.
    pub fn solve(&self, b: &Vector) -> Option<Vector> {
        match self {
            StructuredMatrix::Identity { scale, .. } => {
                (*scale != 0.0).then(|| b / *scale)
            }
            StructuredMatrix::Dense(a) => a.clone().lu().solve(b),
            StructuredMatrix::Banded(m) => m.solve(b),
        }
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            StructuredMatrix::Identity { scale, .. } => scale.abs(),
            _ => {
                let a = self.to_dense();
                if a.is_empty() {
                    0.0
                } else {
                    a.singular_values().max()
                }
            }
        }
    }
}

/// Dense matrix of `map` assembled column-by-column from transpose products
/// with unit vectors (row `k` of `J` is `Jᵀ e_k`).
pub fn dense_from_transpose_products(dim_out: usize, dim_in: usize, jt: impl Fn(&Vector) -> Vector) -> Matrix {
    let mut j = Matrix::zeros(dim_out, dim_in);
    let mut e = Vector::zeros(dim_out);
    for k in 0..dim_out {
        e[k] = 1.0;
        let row = jt(&e);
        j.row_mut(k).copy_from(&row.transpose());
        e[k] = 0.0;
    }
    j
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_band(n: usize, kl: usize, ku: usize) -> BandMatrix {
        let mut b = BandMatrix::zeros(n, kl, ku);
        for j in 0..n {
            for i in b.row_range(j) {
                let v = ((i * 7 + j * 3) % 11) as f64 - 5.0 + if i == j { 0.5 } else { 0.0 };
                b.set(i, j, v);
            }
        }
        b
    }

    #[test]
    fn band_products_match_dense() {
        let b = sample_band(9, 2, 1);
        let a = b.to_dense();
        let x = Vector::from_fn(9, |i, _| (i as f64).sin());
        assert!((b.mul(&x) - &a * &x).norm() < 1e-13);
        assert!((b.tr_mul(&x) - a.tr_mul(&x)).norm() < 1e-13);
        assert!((b.gram().to_dense() - a.tr_mul(&a)).norm() < 1e-12);
    }

    #[test]
    fn band_lu_needs_pivoting_and_matches_dense() {
        // Zero leading diagonal forces a row swap.
        let mut b = sample_band(12, 2, 3);
        b.set(0, 0, 0.0);
        let a = b.to_dense();
        let rhs = Vector::from_fn(12, |i, _| 1.0 + i as f64);
        let x = b.solve(&rhs).expect("nonsingular");
        let reference = a.clone().lu().solve(&rhs).unwrap();
        assert!((&x - &reference).norm() <= 1e-9 * reference.norm());
        assert!((&a * &x - &rhs).norm() < 1e-9);
    }

    #[test]
    fn singular_band_is_reported() {
        let b = BandMatrix::zeros(4, 1, 1);
        assert!(b.solve(&Vector::zeros(4)).is_none());
    }

    #[test]
    fn structured_sum_keeps_band() {
        let b = StructuredMatrix::Banded(sample_band(6, 1, 1));
        let s = b.add(&StructuredMatrix::Identity { dim: 6, scale: 2.0 });
        assert!(matches!(s, StructuredMatrix::Banded(_)));
        let expected = b.to_dense() + Matrix::identity(6, 6) * 2.0;
        assert!((s.to_dense() - expected).norm() < 1e-14);
    }

    #[test]
    fn empty_dense_gram_is_zero() {
        let z = StructuredMatrix::Dense(Matrix::zeros(0, 3)).gram();
        assert_eq!(z, StructuredMatrix::Identity { dim: 3, scale: 0.0 });
    }
}
