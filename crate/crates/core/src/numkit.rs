//! Dense float64 kernels used by the matching head.
//!
//! Matrices are row-major with rows indexing temporal positions and columns
//! indexing feature dimensions. Every differentiable kernel has a matching
//! `*_backward` that maps an upstream gradient to input gradients; the
//! [`grad_check`] helpers compare those against central differences.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};

/// Row-major 2-D array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ScanError::dim(
                "Matrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ScanError::dim(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies rows `start..start + len` into a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows {
            return Err(ScanError::dim(
                "Matrix::slice_rows",
                format!("rows within 0..{}", self.rows),
                format!("{start}..{}", start + len),
            ));
        }
        Ok(Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Returns a copy with rows reordered so that row `i` is `self.row(order[i])`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let mut out = Self::zeros(order.len(), self.cols);
        for (dst, &src) in order.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(ScanError::dim(
                "Matrix::matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(ScanError::dim("Matrix::matvec", self.cols, v.len()));
        }
        Ok(Vector::from(
            self.rows_iter().map(|row| dot(row, v)).collect::<Vec<_>>(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ScanError::dim(
                "Matrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        axpy(1.0, &other.data, &mut self.data);
        Ok(())
    }
}

/// Dense `f64` vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fully connected layer `y = x W + b` with `W` stored as `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(ScanError::dim(
                "LinearLayer::new",
                format!("bias of length {}", weight.cols()),
                bias.len(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(in_dim, out_dim),
            bias: Vector::zeros(out_dim),
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }
}

/// Gradients of a loss with respect to a linear layer's input and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub grad_x: Matrix,
    pub grad_weight: Matrix,
    pub grad_bias: Vector,
}

pub fn linear_forward(x: &Matrix, layer: &LinearLayer) -> Result<Matrix> {
    if x.cols() != layer.in_dim() {
        return Err(ScanError::dim(
            "linear_forward",
            format!("{} input columns", layer.in_dim()),
            x.cols(),
        ));
    }
    let out_dim = layer.out_dim();
    let mut out = Matrix::zeros(x.rows(), out_dim);
    for t in 0..x.rows() {
        let dst = out.row_mut(t);
        dst.copy_from_slice(layer.bias.as_slice());
        for (i, &xi) in x.row(t).iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, layer.weight.row(i), dst);
            }
        }
    }
    Ok(out)
}

pub fn linear_backward(x: &Matrix, layer: &LinearLayer, grad_out: &Matrix) -> Result<LinearGrads> {
    if x.cols() != layer.in_dim() {
        return Err(ScanError::dim(
            "linear_backward",
            format!("{} input columns", layer.in_dim()),
            x.cols(),
        ));
    }
    if grad_out.shape() != (x.rows(), layer.out_dim()) {
        return Err(ScanError::dim(
            "linear_backward",
            format!("grad_out {}x{}", x.rows(), layer.out_dim()),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut grad_weight = Matrix::zeros(layer.in_dim(), layer.out_dim());
    let mut grad_bias = Vector::zeros(layer.out_dim());
    for t in 0..x.rows() {
        let g = grad_out.row(t);
        axpy(1.0, g, grad_bias.as_mut_slice());
        for (i, &xi) in x.row(t).iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, g, grad_weight.row_mut(i));
            }
            grad_x.data[t * x.cols() + i] = dot(layer.weight.row(i), g);
        }
    }
    Ok(LinearGrads {
        grad_x,
        grad_weight,
        grad_bias,
    })
}

/// Column-wise softmax over the temporal (row) axis.
pub fn softmax_temporal(logits: &Matrix) -> Matrix {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    if rows == 0 {
        return out;
    }
    let mut col_max = logits.row(0).to_vec();
    for t in 1..rows {
        for (m, &v) in col_max.iter_mut().zip(logits.row(t)) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut col_sum = vec![0.0; cols];
    for t in 0..rows {
        let src = logits.row(t);
        let dst = out.row_mut(t);
        for d in 0..cols {
            let e = (src[d] - col_max[d]).exp();
            dst[d] = e;
            col_sum[d] += e;
        }
    }
    for t in 0..rows {
        for (v, s) in out.row_mut(t).iter_mut().zip(&col_sum) {
            *v /= s;
        }
    }
    out
}

pub fn softmax_temporal_backward(out: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if out.shape() != grad_out.shape() {
        return Err(ScanError::dim(
            "softmax_temporal_backward",
            format!("{:?}", out.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (rows, cols) = out.shape();
    let mut inner = vec![0.0; cols];
    for t in 0..rows {
        for ((acc, g), y) in inner.iter_mut().zip(grad_out.row(t)).zip(out.row(t)) {
            *acc += g * y;
        }
    }
    let mut grad_in = Matrix::zeros(rows, cols);
    for t in 0..rows {
        let y = out.row(t);
        let g = grad_out.row(t);
        for (d, dst) in grad_in.row_mut(t).iter_mut().enumerate() {
            *dst = y[d] * (g[d] - inner[d]);
        }
    }
    Ok(grad_in)
}

/// `out[d] = sum_t weights[t, d] * frames[t, d]`
pub fn weighted_sum(weights: &Matrix, frames: &Matrix) -> Result<Vector> {
    if weights.shape() != frames.shape() {
        return Err(ScanError::dim(
            "weighted_sum",
            format!("{:?}", frames.shape()),
            format!("{:?}", weights.shape()),
        ));
    }
    let mut out = vec![0.0; frames.cols()];
    for t in 0..frames.rows() {
        for ((acc, w), f) in out.iter_mut().zip(weights.row(t)).zip(frames.row(t)) {
            *acc += w * f;
        }
    }
    Ok(Vector::from(out))
}

/// Returns `(grad_weights, grad_frames)`.
pub fn weighted_sum_backward(
    weights: &Matrix,
    frames: &Matrix,
    grad_out: &Vector,
) -> Result<(Matrix, Matrix)> {
    if weights.shape() != frames.shape() || grad_out.len() != frames.cols() {
        return Err(ScanError::dim(
            "weighted_sum_backward",
            format!("{:?} with grad of length {}", frames.shape(), frames.cols()),
            format!("{:?} with grad of length {}", weights.shape(), grad_out.len()),
        ));
    }
    let (rows, cols) = frames.shape();
    let mut grad_w = Matrix::zeros(rows, cols);
    let mut grad_f = Matrix::zeros(rows, cols);
    let g = grad_out.as_slice();
    for t in 0..rows {
        let f = frames.row(t);
        let w = weights.row(t);
        let gw = grad_w.row_mut(t);
        for d in 0..cols {
            gw[d] = g[d] * f[d];
        }
        let gf = grad_f.row_mut(t);
        for d in 0..cols {
            gf[d] = g[d] * w[d];
        }
    }
    Ok((grad_w, grad_f))
}

/// Average pooling over the temporal axis.
pub fn column_mean(x: &Matrix) -> Vector {
    let mut out = vec![0.0; x.cols()];
    if x.rows() == 0 {
        return Vector::from(out);
    }
    let w = 1.0 / x.rows() as f64;
    for t in 0..x.rows() {
        for (acc, v) in out.iter_mut().zip(x.row(t)) {
            *acc += w * v;
        }
    }
    Vector::from(out)
}

pub fn column_mean_backward(rows: usize, grad_out: &Vector) -> Matrix {
    let mut grad = Matrix::zeros(rows, grad_out.len());
    if rows == 0 {
        return grad;
    }
    let w = 1.0 / rows as f64;
    for t in 0..rows {
        for (dst, g) in grad.row_mut(t).iter_mut().zip(grad_out.as_slice()) {
            *dst = w * g;
        }
    }
    grad
}

/// Max pooling over the temporal axis; also returns the winning row per column
/// (first occurrence on ties).
pub fn column_max(x: &Matrix) -> (Vector, Vec<usize>) {
    let cols = x.cols();
    if x.rows() == 0 {
        return (Vector::zeros(cols), vec![0; cols]);
    }
    let mut best = x.row(0).to_vec();
    let mut arg = vec![0; cols];
    for t in 1..x.rows() {
        for (d, &v) in x.row(t).iter().enumerate() {
            if v > best[d] {
                best[d] = v;
                arg[d] = t;
            }
        }
    }
    (Vector::from(best), arg)
}

pub fn column_max_backward(rows: usize, argmax: &[usize], grad_out: &Vector) -> Matrix {
    let mut grad = Matrix::zeros(rows, grad_out.len());
    for (d, (&t, &g)) in argmax.iter().zip(grad_out.as_slice()).enumerate() {
        grad.set(t, d, g);
    }
    grad
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Denominator floor for relative gradient errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// `(row, col)` of the worst element; flat checks report `(0, index)`.
    pub worst_index: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    fn new(op_name: &str, tolerance: f64) -> Self {
        Self {
            op_name: op_name.to_string(),
            max_rel_error: 0.0,
            worst_index: (0, 0),
            checked: 0,
            tolerance,
            pass: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, index: (usize, usize)) {
        let err = relative_error(analytic, numeric);
        // NaN must never look like a pass
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
            self.worst_index = index;
        }
        self.checked += 1;
        self.pass = self.max_rel_error <= self.tolerance;
    }

    /// Folds another report into this one, keeping the worst error.
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst_index = other.worst_index;
        }
        self.checked += other.checked;
        self.tolerance = self.tolerance.min(other.tolerance);
        self.pass = self.pass && other.pass && self.max_rel_error <= self.tolerance;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Differentiable kernels that [`grad_check`] knows how to exercise.
///
/// Ops with matrix or vector outputs are reduced to a scalar through a fixed,
/// non-constant projection so every output element carries a distinct
/// upstream gradient.
#[derive(Clone, Debug)]
pub enum GradOp {
    /// Gradient with respect to the layer input.
    Linear(LinearLayer),
    SoftmaxTemporal,
    /// Gradient with respect to the weights; `frames` held fixed.
    WeightedSumWeights {
        frames: Matrix,
    },
    /// Gradient with respect to the frames; `weights` held fixed.
    WeightedSumFrames {
        weights: Matrix,
    },
    ColumnMean,
}

impl GradOp {
    pub fn name(&self) -> &'static str {
        match self {
            GradOp::Linear(_) => "linear",
            GradOp::SoftmaxTemporal => "softmax_temporal",
            GradOp::WeightedSumWeights { .. } => "weighted_sum/weights",
            GradOp::WeightedSumFrames { .. } => "weighted_sum/frames",
            GradOp::ColumnMean => "column_mean",
        }
    }

    /// Scalar objective `sum_i probe_i * op(input)_i`.
    pub fn objective(&self, input: &Matrix) -> Result<f64> {
        let out: Vec<f64> = match self {
            GradOp::Linear(layer) => linear_forward(input, layer)?.into_data(),
            GradOp::SoftmaxTemporal => softmax_temporal(input).into_data(),
            GradOp::WeightedSumWeights { frames } => weighted_sum(input, frames)?.into_vec(),
            GradOp::WeightedSumFrames { weights } => weighted_sum(weights, input)?.into_vec(),
            GradOp::ColumnMean => column_mean(input).into_vec(),
        };
        Ok(out.iter().enumerate().map(|(i, v)| probe_weight(i) * v).sum())
    }

    /// Analytic gradient of [`GradOp::objective`] via the op's backward rule.
    pub fn gradient(&self, input: &Matrix) -> Result<Matrix> {
        match self {
            GradOp::Linear(layer) => {
                let upstream = probe_matrix(input.rows(), layer.out_dim());
                Ok(linear_backward(input, layer, &upstream)?.grad_x)
            }
            GradOp::SoftmaxTemporal => {
                let out = softmax_temporal(input);
                let upstream = probe_matrix(input.rows(), input.cols());
                softmax_temporal_backward(&out, &upstream)
            }
            GradOp::WeightedSumWeights { frames } => {
                let upstream = probe_vector(input.cols());
                Ok(weighted_sum_backward(input, frames, &upstream)?.0)
            }
            GradOp::WeightedSumFrames { weights } => {
                let upstream = probe_vector(input.cols());
                Ok(weighted_sum_backward(weights, input, &upstream)?.1)
            }
            GradOp::ColumnMean => Ok(column_mean_backward(input.rows(), &probe_vector(input.cols()))),
        }
    }
}

fn probe_weight(i: usize) -> f64 {
    0.3 + (1.7 * i as f64 + 0.4).sin()
}

fn probe_matrix(rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(probe_weight).collect();
    Matrix { rows, cols, data }
}

fn probe_vector(len: usize) -> Vector {
    Vector::from((0..len).map(probe_weight).collect::<Vec<_>>())
}

/// Checks `op`'s backward rule at `input` with central differences of step `h`.
pub fn grad_check(op: &GradOp, input: &Matrix, h: f64, tol: f64) -> Result<GradReport> {
    if !(h > 0.0) {
        return Err(ScanError::Contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let analytic = op.gradient(input)?;
    let mut report = GradReport::new(op.name(), tol);
    let mut probe = input.clone();
    for r in 0..input.rows() {
        for c in 0..input.cols() {
            let orig = input.get(r, c);
            probe.set(r, c, orig + h);
            let plus = op.objective(&probe)?;
            probe.set(r, c, orig - h);
            let minus = op.objective(&probe)?;
            probe.set(r, c, orig);
            report.record(analytic.get(r, c), (plus - minus) / (2.0 * h), (r, c));
        }
    }
    Ok(report)
}

/// Checks an arbitrary scalar function of a flat parameter vector.
pub fn grad_check_flat<F>(
    name: &str,
    point: &[f64],
    analytic: &[f64],
    mut f: F,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(ScanError::dim("grad_check_flat", point.len(), analytic.len()));
    }
    if !(h > 0.0) {
        return Err(ScanError::Contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut report = GradReport::new(name, tol);
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = point[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        report.record(analytic[i], (plus - minus) / (2.0 * h), (0, i));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, i: usize, o: usize) -> LinearLayer {
        let w = random_matrix(rng, i, o);
        let b = Vector::from((0..o).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        LinearLayer::new(w, b).unwrap()
    }

    #[test]
    fn linear_forward_examples() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let id = LinearLayer::new(Matrix::identity(2), Vector::zeros(2)).unwrap();
        assert_eq!(linear_forward(&x, &id).unwrap().data(), &[1.0, 2.0]);

        let zero = Matrix::zeros(1, 2);
        let layer = LinearLayer::new(
            Matrix::from_rows(&[[5.0, -1.0], [2.0, 7.0]]).unwrap(),
            Vector::from(vec![3.0, 4.0]),
        )
        .unwrap();
        assert_eq!(linear_forward(&zero, &layer).unwrap().data(), &[3.0, 4.0]);

        let ones = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let layer = LinearLayer::new(
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
            Vector::zeros(2),
        )
        .unwrap();
        assert_eq!(linear_forward(&ones, &layer).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_shape_errors() {
        let x = Matrix::zeros(2, 3);
        let layer = LinearLayer::zeros(2, 4);
        assert!(matches!(
            linear_forward(&x, &layer),
            Err(ScanError::Dimension { .. })
        ));
        let x = Matrix::zeros(2, 2);
        assert!(linear_backward(&x, &layer, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn linear_backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 3, 4);
        let layer = random_layer(&mut rng, 4, 2);
        let g = linear_backward(&x, &layer, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_weight.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.as_slice().iter().all(|&v| v == 0.0));

        let x = Matrix::from_rows(&[[1.0]]).unwrap();
        let layer = LinearLayer::new(Matrix::from_rows(&[[1.0]]).unwrap(), Vector::zeros(1)).unwrap();
        let g = linear_backward(&x, &layer, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.grad_x.data(), &[1.0]);
        assert_eq!(g.grad_weight.data(), &[1.0]);
        assert_eq!(g.grad_bias.as_slice(), &[1.0]);
    }

    #[test]
    fn linear_parameter_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, 4);
        let layer = random_layer(&mut rng, 4, 3);
        let upstream = random_matrix(&mut rng, 3, 3);
        let grads = linear_backward(&x, &layer, &upstream).unwrap();
        let objective = |l: &LinearLayer| -> f64 {
            let y = linear_forward(&x, l).unwrap();
            dot(y.data(), upstream.data())
        };
        let mut params = layer.weight.data().to_vec();
        params.extend_from_slice(layer.bias.as_slice());
        let mut analytic = grads.grad_weight.data().to_vec();
        analytic.extend_from_slice(grads.grad_bias.as_slice());
        let report = grad_check_flat(
            "linear/params",
            &params,
            &analytic,
            |p| {
                let w = Matrix::from_vec(4, 3, p[..12].to_vec())?;
                let b = Vector::from(p[12..].to_vec());
                Ok(objective(&LinearLayer::new(w, b)?))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let single = Matrix::from_rows(&[[3.0, -2.0, 100.0]]).unwrap();
        assert!(softmax_temporal(&single).data().iter().all(|&v| v == 1.0));

        let constant = Matrix::filled(4, 2, 0.7);
        for &v in softmax_temporal(&constant).data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }

        let col = Matrix::from_rows(&[[0.5], [1.5]]).unwrap();
        let out = softmax_temporal(&col);
        assert_abs_diff_eq!(out.get(0, 0), 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(out.get(1, 0), 0.73106, epsilon = 1e-5);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let big = Matrix::from_rows(&[[1000.0], [999.0], [-1000.0]]).unwrap();
        let out = softmax_temporal(&big);
        assert!(out.is_finite());
        assert_abs_diff_eq!(out.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_matrix(&mut rng, 4, 3);
        let out = softmax_temporal(&logits);
        let mut upstream = Matrix::zeros(4, 3);
        for t in 0..4 {
            upstream.row_mut(t).copy_from_slice(&[2.0, -1.0, 0.5]);
        }
        let g = softmax_temporal_backward(&out, &upstream).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));

        let one = softmax_temporal(&Matrix::from_rows(&[[0.2, 0.4]]).unwrap());
        let g = softmax_temporal_backward(&one, &Matrix::from_rows(&[[3.0, -7.0]]).unwrap()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        let logits = random_matrix(&mut rng, 3, 2);
        let report = grad_check(&GradOp::SoftmaxTemporal, &logits, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn weighted_sum_examples() {
        let frames = Matrix::from_rows(&[[1.0, 4.0], [2.0, -2.0], [6.0, 1.0]]).unwrap();
        let uniform = Matrix::filled(3, 2, 1.0 / 3.0);
        let ws = weighted_sum(&uniform, &frames).unwrap();
        assert!(ws.max_abs_diff(&column_mean(&frames)) <= 1e-12);

        let mut one_hot = Matrix::zeros(3, 2);
        one_hot.set(1, 0, 1.0);
        one_hot.set(1, 1, 1.0);
        assert_eq!(weighted_sum(&one_hot, &frames).unwrap().as_slice(), frames.row(1));

        let w = Matrix::from_rows(&[[0.25], [0.75]]).unwrap();
        let f = Matrix::from_rows(&[[4.0], [8.0]]).unwrap();
        assert_eq!(weighted_sum(&w, &f).unwrap().as_slice(), &[7.0]);

        assert!(weighted_sum(&Matrix::zeros(2, 2), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn column_mean_examples() {
        let one = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        assert_eq!(column_mean(&one).as_slice(), &[1.5, -2.0]);
        let two = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        assert_eq!(column_mean(&two).as_slice(), &[2.0]);
        let three = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let m = column_mean(&three);
        assert_abs_diff_eq!(m[0], 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 4.0, epsilon = 1e-15);
    }

    #[test]
    fn column_max_picks_first_maximum() {
        let x = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0], [2.0, 0.0]]).unwrap();
        let (m, arg) = column_max(&x);
        assert_eq!(m.as_slice(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let g = column_max_backward(3, &arg, &Vector::from(vec![2.0, -1.0]));
        assert_eq!(g.data(), &[0.0, -1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 3, 2);
        let x = random_matrix(&mut rng, 2, 3);
        let report = grad_check(&GradOp::Linear(layer), &x, 1e-5, 1e-7).unwrap();
        assert!(report.pass, "{report:?}");

        let logits = random_matrix(&mut rng, 4, 3);
        let report = grad_check(&GradOp::SoftmaxTemporal, &logits, 1e-5, 1e-5).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Matrix::zeros(1, 1);
        assert!(grad_check(&GradOp::ColumnMean, &x, 0.0, 1e-6).is_err());
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let report = grad_check_flat("square", &[2.0], &[3.0], |p| Ok(p[0] * p[0]), 1e-5, 1e-6).unwrap();
        assert!(!report.pass);
        assert_abs_diff_eq!(report.max_rel_error, 0.25, epsilon = 1e-6);
    }
}
