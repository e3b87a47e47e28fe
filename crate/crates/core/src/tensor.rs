//! Dense three-mode tensors, observation masks, labelled feature matrices and
//! the Tucker contraction kernel.
//!
//! All three-mode arrays use one fixed layout: mode 1 varies fastest, so the
//! cell `(i, j, k)` of an `I x J x K` array lives at `i + I * (j + J * k)`.
//! Checkpoints and every kernel in the crate rely on this layout.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

#[inline]
pub fn flat_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

#[inline]
pub fn unravel_index(dims: [usize; 3], flat: usize) -> (usize, usize, usize) {
    let i = flat % dims[0];
    let rest = flat / dims[0];
    (i, rest % dims[1], rest / dims[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {}x{}x{} needs {} values, got {}",
                dims[0],
                dims[1],
                dims[2],
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (i, j, k) = unravel_index(dims, pos);
            return Err(Error::Shape(format!("non-finite entry at ({i}, {j}, {k})")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[flat_index(self.dims, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = flat_index(self.dims, i, j, k);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Sub-tensor picking the given indices along each mode, in order.
    pub fn select(&self, idx: [&[usize]; 3]) -> Tensor3 {
        Tensor3::from_fn([idx[0].len(), idx[1].len(), idx[2].len()], |a, b, c| {
            self.get(idx[0][a], idx[1][b], idx[2][c])
        })
    }
}

/// Binary observation mask paired with a [`Tensor3`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    dims: [usize; 3],
    flags: Vec<bool>,
}

impl Mask3 {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            flags: vec![true; dims.iter().product()],
        }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            flags: vec![false; dims.iter().product()],
        }
    }

    pub fn from_flags(dims: [usize; 3], flags: Vec<bool>) -> Result<Self> {
        if flags.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask {}x{}x{} needs {} flags, got {}",
                dims[0],
                dims[1],
                dims[2],
                dims.iter().product::<usize>(),
                flags.len()
            )));
        }
        Ok(Self { dims, flags })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.flags[flat_index(self.dims, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, observed: bool) {
        let idx = flat_index(self.dims, i, j, k);
        self.flags[idx] = observed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn select(&self, idx: [&[usize]; 3]) -> Mask3 {
        let dims = [idx[0].len(), idx[1].len(), idx[2].len()];
        let mut flags = Vec::with_capacity(dims.iter().product());
        for &k in idx[2] {
            for &j in idx[1] {
                for &i in idx[0] {
                    flags.push(self.get(i, j, k));
                }
            }
        }
        Mask3 { dims, flags }
    }

    /// Checks that the mask can gate `y`.
    pub fn check_pairs(&self, y: &Tensor3) -> Result<()> {
        if self.dims != y.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} do not match tensor dims {:?}",
                self.dims,
                y.dims()
            )));
        }
        Ok(())
    }
}

/// Feature matrix with example (row) and feature (column) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self> {
        if row_ids.len() != values.nrows() || col_ids.len() != values.ncols() {
            return Err(Error::Shape(format!(
                "feature matrix is {}x{} but has {} row ids and {} column ids",
                values.nrows(),
                values.ncols(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Shape(format!(
                "non-finite feature value at example '{}' feature '{}'",
                row_ids[r], col_ids[c]
            )));
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
        })
    }

    /// Labels rows `"{prefix}{n}"` and columns `"f{n}"`.
    pub fn with_default_ids(values: Matrix, prefix: &str) -> Result<Self> {
        let rows = (0..values.nrows()).map(|i| format!("{prefix}{i}")).collect();
        let cols = (0..values.ncols()).map(|p| format!("f{p}")).collect();
        Self::new(values, rows, cols)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_rows(rows),
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            col_ids: self.col_ids.clone(),
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            values: self.values.select_columns(cols),
            row_ids: self.row_ids.clone(),
            col_ids: cols.iter().map(|&c| self.col_ids[c].clone()).collect(),
        }
    }
}

/// Prepends a column of ones (index 0) to `m`.
pub fn append_ones_column(m: &Matrix) -> Matrix {
    let mut out = Matrix::from_element(m.nrows(), m.ncols() + 1, 1.0);
    out.view_mut((0, 1), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// Builds an `R x R x R` core that is zero off the superdiagonal.
pub fn superdiag_core(weights: &[f64]) -> Result<Tensor3> {
    let r = weights.len();
    if r == 0 {
        return Err(Error::Shape("superdiagonal core needs R >= 1".into()));
    }
    let mut core = Tensor3::zeros([r, r, r]);
    for (q, &w) in weights.iter().enumerate() {
        core.set(q, q, q, w);
    }
    Ok(core)
}

/// `y_ijk = sum c_{abc} h1_{ia} h2_{jb} h3_{kc}`, computed as three successive
/// mode products.
pub fn tucker_compose(core: &Tensor3, factors: [&Matrix; 3]) -> Result<Tensor3> {
    let [r1, r2, r3] = core.dims();
    for (m, (f, r)) in factors.iter().zip([r1, r2, r3]).enumerate() {
        if f.ncols() != r {
            return Err(Error::Shape(format!(
                "factor for mode {} has {} columns but core axis {} has size {}",
                m + 1,
                f.ncols(),
                m + 1,
                r
            )));
        }
    }
    let (n1, n2, n3) = (factors[0].nrows(), factors[1].nrows(), factors[2].nrows());
    let c = core.as_slice();

    // t1[i, b, c] = sum_a h1[i, a] core[a, b, c]
    let mut t1 = vec![0.0; n1 * r2 * r3];
    for bc in 0..r2 * r3 {
        let fiber = &c[bc * r1..(bc + 1) * r1];
        if fiber.iter().all(|&v| v == 0.0) {
            continue;
        }
        for i in 0..n1 {
            let mut acc = 0.0;
            for (a, &v) in fiber.iter().enumerate() {
                acc += factors[0][(i, a)] * v;
            }
            t1[i + n1 * bc] = acc;
        }
    }

    // t2[i, j, c] = sum_b h2[j, b] t1[i, b, c]
    let mut t2 = vec![0.0; n1 * n2 * r3];
    for cc in 0..r3 {
        for j in 0..n2 {
            let out = &mut t2[n1 * (j + n2 * cc)..n1 * (j + n2 * cc + 1)];
            for b in 0..r2 {
                let w = factors[1][(j, b)];
                if w == 0.0 {
                    continue;
                }
                let src = &t1[n1 * (b + r2 * cc)..n1 * (b + r2 * cc + 1)];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    // y[i, j, k] = sum_c h3[k, c] t2[i, j, c]
    let plane = n1 * n2;
    let mut y = vec![0.0; plane * n3];
    for k in 0..n3 {
        let out = &mut y[plane * k..plane * (k + 1)];
        for cc in 0..r3 {
            let w = factors[2][(k, cc)];
            if w == 0.0 {
                continue;
            }
            let src = &t2[plane * cc..plane * (cc + 1)];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
    }
    Ok(Tensor3 {
        dims: [n1, n2, n3],
        data: y,
    })
}
