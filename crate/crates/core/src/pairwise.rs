//! Connection functions, pair masks, batch costs and their matrix-form gradients.
//!
//! Features are stored column-wise: a `d x n` matrix holds one `d`-dimensional
//! CNN output per column. For a batch the similarity matrix `S` is scored
//! against a mask `M` (`+1` positive pair, `-c` negative pair, `0` neglected),
//! a weight matrix `W` (`1/n1`, `1/n2`, `0`) and a Fisher sign matrix `P`
//! (`1/n1`, `-1/n2`, `0`).
//!
//! Gradients with respect to the features are obtained in closed form by
//! pushing a per-pair weight matrix `A = dJ/dS` through the cosine Jacobian:
//!
//! ```text
//! dJ/dX = X (A∘B + (A∘B)^T) - X ∘ (repmat(rowsum(A∘C)) + repmat(colsum(A∘D)))
//! B_ij = 1 / sqrt(x_i·x_i  x_j·x_j)
//! C_ij = B_ij (x_i·x_j) / (x_i·x_i)
//! D_ij = B_ij (x_i·x_j) / (x_j·x_j)
//! ```

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired-view connection function mapping two feature vectors to a similarity.
#[derive(Debug, Clone, PartialEq)]
pub enum Connection {
    /// Negated squared Euclidean distance.
    Euclidean,
    Cosine,
    /// Negated L1 distance.
    AbsDiff,
    /// Linear score of the concatenation `[x; y]` with fixed weights of length `2d`.
    Concat(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnectionKind {
    Euclidean,
    Cosine,
    AbsDiff,
    Concat,
}

impl Connection {
    pub fn kind(&self) -> ConnectionKind {
        match self {
            Connection::Euclidean => ConnectionKind::Euclidean,
            Connection::Cosine => ConnectionKind::Cosine,
            Connection::AbsDiff => ConnectionKind::AbsDiff,
            Connection::Concat(_) => ConnectionKind::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub kind: ConnectionKind,
}

/// Squared column norms, rejecting zero columns.
fn column_sq_norms(x: &Array2<f64>, matrix: &'static str) -> Result<Array1<f64>> {
    let q = x.map_axis(Axis(0), |col| col.dot(&col));
    if let Some(column) = q.iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroNormColumn { matrix, column });
    }
    Ok(q)
}

/// Cosine similarity of every column of `x` against every column of `y`.
pub fn cosine_matrix(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.nrows() != y.nrows() {
        return Err(Error::dim("cosine", "feature dimension", x.nrows(), y.nrows()));
    }
    let qx = column_sq_norms(x, "X")?;
    let qy = column_sq_norms(y, "Y")?;
    let mut s = x.t().dot(y);
    for ((i, j), v) in s.indexed_iter_mut() {
        *v /= (qx[i] * qy[j]).sqrt();
    }
    Ok(s)
}

/// Evaluates the connection function between the columns of `x` and of `y`
/// (or of `x` against itself when `y` is `None`).
pub fn connect(x: &Array2<f64>, y: Option<&Array2<f64>>, connection: &Connection) -> Result<SimilarityMatrix> {
    let y = y.unwrap_or(x);
    let d = x.nrows();
    if y.nrows() != d {
        return Err(Error::dim("connect", "feature dimension", d, y.nrows()));
    }
    let pairwise = |f: &dyn Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64| {
        Array2::from_shape_fn((x.ncols(), y.ncols()), |(i, j)| f(x.column(i), y.column(j)))
    };
    let values = match connection {
        Connection::Cosine => cosine_matrix(x, y)?,
        Connection::Euclidean => pairwise(&|a, b| -a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()),
        Connection::AbsDiff => pairwise(&|a, b| -a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>()),
        Connection::Concat(weights) => {
            if weights.len() != 2 * d {
                return Err(Error::dim("connect", "concat weights", 2 * d, weights.len()));
            }
            let (wx, wy) = weights.split_at(d);
            pairwise(&|a, b| {
                a.iter().zip(wx).map(|(p, w)| p * w).sum::<f64>()
                    + b.iter().zip(wy).map(|(p, w)| p * w).sum::<f64>()
            })
        }
    };
    Ok(SimilarityMatrix {
        values,
        kind: connection.kind(),
    })
}

/// Pair label, weight and sign matrices for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMasks {
    pub m: Array2<f64>,
    pub w: Array2<f64>,
    pub p: Array2<f64>,
    pub n1: usize,
    pub n2: usize,
    pub negative_cost: f64,
    pub view_specific: bool,
}

impl PairMasks {
    /// Shared-parameter batch: each unordered pair `i < j` is counted once;
    /// the diagonal and lower triangle are neglected.
    pub fn general<L: PartialEq>(labels: &[L], negative_cost: f64) -> Result<Self> {
        let n = labels.len();
        if n < 2 {
            return Err(Error::Usage(format!("mask construction needs at least 2 samples, got {n}")));
        }
        Self::build(n, n, negative_cost, false, true, |i, j| {
            (i < j).then(|| labels[i] == labels[j])
        })
    }

    /// Like [`PairMasks::general`] but accepts batches lacking positive or
    /// negative pairs; the missing class simply gets no weight.
    pub fn general_lenient<L: PartialEq>(labels: &[L], negative_cost: f64) -> Result<Self> {
        Self::build(labels.len(), labels.len(), negative_cost, false, false, |i, j| {
            (i < j).then(|| labels[i] == labels[j])
        })
    }

    /// Two-view batch: every `(x_i, y_j)` combination is a considered pair.
    pub fn view_specific<L: PartialEq>(x_labels: &[L], y_labels: &[L], negative_cost: f64) -> Result<Self> {
        if x_labels.is_empty() || y_labels.is_empty() {
            return Err(Error::Usage("view-specific masks need samples in both views".into()));
        }
        Self::build(x_labels.len(), y_labels.len(), negative_cost, true, true, |i, j| {
            Some(x_labels[i] == y_labels[j])
        })
    }

    pub fn view_specific_lenient<L: PartialEq>(x_labels: &[L], y_labels: &[L], negative_cost: f64) -> Result<Self> {
        Self::build(x_labels.len(), y_labels.len(), negative_cost, true, false, |i, j| {
            Some(x_labels[i] == y_labels[j])
        })
    }

    fn build(
        rows: usize,
        cols: usize,
        negative_cost: f64,
        view_specific: bool,
        require_both: bool,
        same: impl Fn(usize, usize) -> Option<bool>,
    ) -> Result<Self> {
        if !(negative_cost >= 1.0) {
            return Err(Error::Usage(format!("negative cost must be >= 1, got {negative_cost}")));
        }
        let mut m = Array2::zeros((rows, cols));
        let (mut n1, mut n2) = (0, 0);
        for i in 0..rows {
            for j in 0..cols {
                match same(i, j) {
                    Some(true) => {
                        m[[i, j]] = 1.0;
                        n1 += 1;
                    }
                    Some(false) => {
                        m[[i, j]] = -negative_cost;
                        n2 += 1;
                    }
                    None => {}
                }
            }
        }
        if (n1 == 0 && n2 == 0) || (require_both && (n1 == 0 || n2 == 0)) {
            return Err(Error::DegenerateBatch {
                positives: n1,
                negatives: n2,
            });
        }
        let (w1, w2) = (1.0 / n1.max(1) as f64, 1.0 / n2.max(1) as f64);
        let w = m.mapv(|v| if v > 0.0 { w1 } else if v < 0.0 { w2 } else { 0.0 });
        let p = m.mapv(|v| if v > 0.0 { w1 } else if v < 0.0 { -w2 } else { 0.0 });
        Ok(Self {
            m,
            w,
            p,
            n1,
            n2,
            negative_cost,
            view_specific,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.m.dim()
    }

    /// Index pairs with a nonzero mask entry, in row-major order.
    pub fn considered(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.m
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|(ij, _)| ij)
    }

    fn expect_shape(&self, op: &'static str, s: &Array2<f64>) -> Result<()> {
        let (r, c) = self.shape();
        if s.nrows() != r {
            return Err(Error::dim(op, "similarity rows", r, s.nrows()));
        }
        if s.ncols() != c {
            return Err(Error::dim(op, "similarity columns", c, s.ncols()));
        }
        Ok(())
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `e^z / (1 + e^z)` without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binomial deviance `sum W ∘ ln(exp(-alpha (S - beta) ∘ M) + 1)` over considered pairs.
pub fn deviance_cost(s: &Array2<f64>, masks: &PairMasks, alpha: f64, beta: f64) -> Result<f64> {
    masks.expect_shape("deviance_cost", s)?;
    Ok(masks
        .considered()
        .map(|(i, j)| masks.w[[i, j]] * softplus(-alpha * (s[[i, j]] - beta) * masks.m[[i, j]]))
        .sum())
}

/// Per-pair sensitivity `A = dJ_dev/dS = -alpha W ∘ M ∘ sigmoid(-alpha (S - beta) ∘ M)`.
pub fn deviance_pair_weights(s: &Array2<f64>, masks: &PairMasks, alpha: f64, beta: f64) -> Result<Array2<f64>> {
    masks.expect_shape("deviance_pair_weights", s)?;
    let mut a = Array2::zeros(s.raw_dim());
    for (i, j) in masks.considered() {
        let m = masks.m[[i, j]];
        a[[i, j]] = -alpha * masks.w[[i, j]] * m * sigmoid(-alpha * (s[[i, j]] - beta) * m);
    }
    Ok(a)
}

/// Pushes per-pair weights `A` (`n x n`) through the cosine Jacobian of `X` (`d x n`).
pub fn cosine_backward_general(x: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = x.ncols();
    if a.dim() != (n, n) {
        return Err(Error::dim("cosine_backward_general", "pair weights", n, a.nrows()));
    }
    let q = column_sq_norms(x, "X")?;
    let gram = x.t().dot(x);
    let mut ab = Array2::zeros((n, n));
    let mut row_ac = Array1::<f64>::zeros(n);
    let mut col_ad = Array1::<f64>::zeros(n);
    for ((i, j), &aij) in a.indexed_iter() {
        if aij == 0.0 {
            continue;
        }
        let b = 1.0 / (q[i] * q[j]).sqrt();
        ab[[i, j]] = aij * b;
        row_ac[i] += aij * b * gram[[i, j]] / q[i];
        col_ad[j] += aij * b * gram[[i, j]] / q[j];
    }
    let sym = &ab + &ab.t();
    let mut grad = x.dot(&sym);
    let scale = &row_ac + &col_ad;
    for (mut col, (xc, s)) in grad.columns_mut().into_iter().zip(x.columns().into_iter().zip(scale.iter())) {
        col.scaled_add(-s, &xc);
    }
    Ok(grad)
}

/// Two-view version: `A` is `n x m`, rows index columns of `X`, columns index columns of `Y`.
///
/// Returns `(Y (E∘F)^T - X ∘ repmat(rowsum(E∘G)), X (E∘F) - Y ∘ repmat(colsum(E∘H)))`.
pub fn cosine_backward_specific(
    x: &Array2<f64>,
    y: &Array2<f64>,
    e: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, m) = (x.ncols(), y.ncols());
    if x.nrows() != y.nrows() {
        return Err(Error::dim("cosine_backward_specific", "feature dimension", x.nrows(), y.nrows()));
    }
    if e.nrows() != n {
        return Err(Error::dim("cosine_backward_specific", "pair weight rows", n, e.nrows()));
    }
    if e.ncols() != m {
        return Err(Error::dim("cosine_backward_specific", "pair weight columns", m, e.ncols()));
    }
    let qx = column_sq_norms(x, "X")?;
    let qy = column_sq_norms(y, "Y")?;
    let cross = x.t().dot(y);
    let mut ef = Array2::zeros((n, m));
    let mut row_eg = Array1::<f64>::zeros(n);
    let mut col_eh = Array1::<f64>::zeros(m);
    for ((i, j), &eij) in e.indexed_iter() {
        if eij == 0.0 {
            continue;
        }
        let f = 1.0 / (qx[i] * qy[j]).sqrt();
        ef[[i, j]] = eij * f;
        row_eg[i] += eij * f * cross[[i, j]] / qx[i];
        col_eh[j] += eij * f * cross[[i, j]] / qy[j];
    }
    let mut gx = y.dot(&ef.t());
    for (mut col, (xc, s)) in gx.columns_mut().into_iter().zip(x.columns().into_iter().zip(row_eg.iter())) {
        col.scaled_add(-s, &xc);
    }
    let mut gy = x.dot(&ef);
    for (mut col, (yc, s)) in gy.columns_mut().into_iter().zip(y.columns().into_iter().zip(col_eh.iter())) {
        col.scaled_add(-s, &yc);
    }
    Ok((gx, gy))
}

/// Matrix-form `dJ_dev/dX` for a shared-parameter batch; `s` must be the cosine matrix of `x`.
pub fn deviance_grad_general(
    x: &Array2<f64>,
    s: &Array2<f64>,
    masks: &PairMasks,
    alpha: f64,
    beta: f64,
) -> Result<Array2<f64>> {
    let a = deviance_pair_weights(s, masks, alpha, beta)?;
    cosine_backward_general(x, &a)
}

/// Matrix-form `(dJ_dev/dX, dJ_dev/dY)` for a two-view batch.
pub fn deviance_grad_specific(
    x: &Array2<f64>,
    y: &Array2<f64>,
    s: &Array2<f64>,
    masks: &PairMasks,
    alpha: f64,
    beta: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let e = deviance_pair_weights(s, masks, alpha, beta)?;
    cosine_backward_specific(x, y, &e)
}

struct FisherParts {
    numerator: f64,
    denominator: f64,
    mean: f64,
}

fn fisher_parts(s: &Array2<f64>, masks: &PairMasks) -> Result<FisherParts> {
    masks.expect_shape("fisher_cost", s)?;
    let count = (masks.n1 + masks.n2) as f64;
    let mut numerator = 0.0;
    let mut total = 0.0;
    let mut scale = 0.0f64;
    for (i, j) in masks.considered() {
        numerator += masks.p[[i, j]] * s[[i, j]];
        total += s[[i, j]];
        scale = scale.max(s[[i, j]].abs());
    }
    let mean = total / count;
    let denominator: f64 = masks.considered().map(|(i, j)| (s[[i, j]] - mean).powi(2)).sum();
    // rounding noise in nearly equal similarities is treated as zero variance
    if denominator <= count * (1e-12 * scale).powi(2) || denominator == 0.0 {
        return Err(Error::DegenerateVariance);
    }
    Ok(FisherParts {
        numerator,
        denominator,
        mean,
    })
}

/// Fisher criterion `-(sum P∘S)^2 / sum (S - mean)^2`, with the mean and the
/// variance taken over considered pairs only.
pub fn fisher_cost(s: &Array2<f64>, masks: &PairMasks) -> Result<f64> {
    let parts = fisher_parts(s, masks)?;
    Ok(-parts.numerator.powi(2) / parts.denominator)
}

/// `dJ_fisher/dS`, zero outside the considered pairs.
pub fn fisher_pair_weights(s: &Array2<f64>, masks: &PairMasks) -> Result<Array2<f64>> {
    let FisherParts {
        numerator,
        denominator,
        mean,
    } = fisher_parts(s, masks)?;
    let mut a = Array2::zeros(s.raw_dim());
    for (i, j) in masks.considered() {
        a[[i, j]] = -2.0 * numerator * masks.p[[i, j]] / denominator
            + 2.0 * numerator.powi(2) * (s[[i, j]] - mean) / denominator.powi(2);
    }
    Ok(a)
}

pub fn fisher_grad(x: &Array2<f64>, s: &Array2<f64>, masks: &PairMasks) -> Result<Array2<f64>> {
    let a = fisher_pair_weights(s, masks)?;
    cosine_backward_general(x, &a)
}

pub fn fisher_grad_specific(
    x: &Array2<f64>,
    y: &Array2<f64>,
    s: &Array2<f64>,
    masks: &PairMasks,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let a = fisher_pair_weights(s, masks)?;
    cosine_backward_specific(x, y, &a)
}

/// Batch objective used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFunction {
    Deviance { alpha: f64, beta: f64 },
    Fisher,
}

impl Default for CostFunction {
    fn default() -> Self {
        CostFunction::Deviance { alpha: 2.0, beta: 0.5 }
    }
}

impl CostFunction {
    pub fn cost(&self, s: &Array2<f64>, masks: &PairMasks) -> Result<f64> {
        match *self {
            CostFunction::Deviance { alpha, beta } => deviance_cost(s, masks, alpha, beta),
            CostFunction::Fisher => fisher_cost(s, masks),
        }
    }

    pub fn pair_weights(&self, s: &Array2<f64>, masks: &PairMasks) -> Result<Array2<f64>> {
        match *self {
            CostFunction::Deviance { alpha, beta } => deviance_pair_weights(s, masks, alpha, beta),
            CostFunction::Fisher => fisher_pair_weights(s, masks),
        }
    }

    /// Cost and feature gradient for a shared-parameter batch.
    pub fn general(&self, x: &Array2<f64>, masks: &PairMasks) -> Result<(f64, Array2<f64>)> {
        let s = cosine_matrix(x, x)?;
        let cost = self.cost(&s, masks)?;
        let a = self.pair_weights(&s, masks)?;
        Ok((cost, cosine_backward_general(x, &a)?))
    }

    /// Cost and both feature gradients for a two-view batch.
    pub fn specific(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        masks: &PairMasks,
    ) -> Result<(f64, Array2<f64>, Array2<f64>)> {
        let s = cosine_matrix(x, y)?;
        let cost = self.cost(&s, masks)?;
        let a = self.pair_weights(&s, masks)?;
        let (gx, gy) = cosine_backward_specific(x, y, &a)?;
        Ok((cost, gx, gy))
    }
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cosine_grad_wrt_first(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (f64, Array1<f64>) {
    let (qa, qb) = (a.dot(&a), b.dot(&b));
    let norm = (qa * qb).sqrt();
    let cos = a.dot(&b) / norm;
    let g = &b / norm - &a * (cos / qa);
    (cos, g)
}

/// Reference pair-by-pair evaluation of the deviance cost and `dJ/dX` for a
/// shared-parameter batch. Quadratic in the batch size and single-threaded;
/// intended as ground truth for the matrix form.
pub fn pairwise_oracle(x: &Array2<f64>, masks: &PairMasks, alpha: f64, beta: f64) -> Result<(f64, Array2<f64>)> {
    let n = x.ncols();
    if masks.shape() != (n, n) {
        return Err(Error::dim("pairwise_oracle", "mask size", n, masks.shape().0));
    }
    column_sq_norms(x, "X")?;
    let mut cost = 0.0;
    let mut grad = Array2::zeros(x.raw_dim());
    for (i, j) in masks.considered() {
        let (m, w) = (masks.m[[i, j]], masks.w[[i, j]]);
        let (cos, gi) = cosine_grad_wrt_first(x.column(i), x.column(j));
        let (_, gj) = cosine_grad_wrt_first(x.column(j), x.column(i));
        let z = -alpha * (cos - beta) * m;
        cost += w * softplus(z);
        let a = -alpha * w * m * sigmoid(z);
        grad.column_mut(i).scaled_add(a, &gi);
        grad.column_mut(j).scaled_add(a, &gj);
    }
    Ok((cost, grad))
}

/// Pair-by-pair reference for the two-view deviance cost and both gradients.
pub fn pairwise_oracle_specific(
    x: &Array2<f64>,
    y: &Array2<f64>,
    masks: &PairMasks,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if masks.shape() != (x.ncols(), y.ncols()) {
        return Err(Error::dim("pairwise_oracle_specific", "mask rows", x.ncols(), masks.shape().0));
    }
    column_sq_norms(x, "X")?;
    column_sq_norms(y, "Y")?;
    let mut cost = 0.0;
    let mut gx = Array2::zeros(x.raw_dim());
    let mut gy = Array2::zeros(y.raw_dim());
    for (i, j) in masks.considered() {
        let (m, w) = (masks.m[[i, j]], masks.w[[i, j]]);
        let (cos, dxi) = cosine_grad_wrt_first(x.column(i), y.column(j));
        let (_, dyj) = cosine_grad_wrt_first(y.column(j), x.column(i));
        let z = -alpha * (cos - beta) * m;
        cost += w * softplus(z);
        let a = -alpha * w * m * sigmoid(z);
        gx.column_mut(i).scaled_add(a, &dxi);
        gy.column_mut(j).scaled_add(a, &dyj);
    }
    Ok((cost, gx, gy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_examples() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let s = connect(&x, None, &Connection::Cosine).unwrap();
        assert_eq!(s.values, array![[1.0, 0.0], [0.0, 1.0]]);
        let e = connect(&x, None, &Connection::Euclidean).unwrap();
        assert_eq!(e.values[[0, 1]], -2.0);
        let a = connect(&x, None, &Connection::AbsDiff).unwrap();
        assert_eq!(a.values[[0, 1]], -2.0);
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let x = array![[0.3], [-2.0], [5.5]];
        let s = cosine_matrix(&x, &x).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let x = array![[0.3, 1.0], [-2.0, 0.1], [5.5, -0.7]];
        let y = array![[1.2], [0.4], [-0.9]];
        let s = cosine_matrix(&x, &y).unwrap();
        let s2 = cosine_matrix(&(&x * 3.0), &(&y * 5.0)).unwrap();
        for (a, b) in s.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_column_is_reported() {
        let x = array![[1.0, 0.0, 2.0], [1.0, 0.0, 1.0]];
        match cosine_matrix(&x, &x) {
            Err(Error::ZeroNormColumn { column, .. }) => assert_eq!(column, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn concat_needs_2d_weights() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(connect(&x, None, &Connection::Concat(vec![1.0; 3])).is_err());
        let s = connect(&x, None, &Connection::Concat(vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        // x_i[0] + y_j[1]
        assert_eq!(s.values, array![[4.0, 5.0], [5.0, 6.0]]);
    }

    #[test]
    fn masks_for_three_labels() {
        let masks = PairMasks::general(&[1, 1, 2], 2.0).unwrap();
        assert_eq!(masks.m, array![[0.0, 1.0, -2.0], [0.0, 0.0, -2.0], [0.0, 0.0, 0.0]]);
        assert_eq!((masks.n1, masks.n2), (1, 2));
        assert_eq!(masks.w[[0, 1]], 1.0);
        assert_eq!(masks.w[[0, 2]], 0.5);
        assert_eq!(masks.p[[1, 2]], -0.5);
    }

    #[test]
    fn masks_pair_counts() {
        let masks = PairMasks::general(&[1, 1, 2, 2], 1.0).unwrap();
        assert_eq!((masks.n1, masks.n2), (2, 4));
        assert!(matches!(
            PairMasks::general(&[7, 7, 7], 2.0),
            Err(Error::DegenerateBatch { positives: 3, negatives: 0 })
        ));
        assert!(PairMasks::general(&[1, 2], 0.5).is_err());
        assert!(PairMasks::general(&[1], 1.0).is_err());
    }

    #[test]
    fn view_specific_masks_are_full() {
        let masks = PairMasks::view_specific(&["a", "b"], &["a", "b", "c"], 2.0).unwrap();
        assert_eq!(masks.shape(), (2, 3));
        assert_eq!(masks.considered().count(), 6);
        assert_eq!((masks.n1, masks.n2), (2, 4));
        assert!(masks.view_specific);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn deviance_anchor_values() {
        let masks = PairMasks::general(&[1, 1, 2], 2.0).unwrap();
        let mut s = Array2::zeros((3, 3));
        s[[0, 1]] = 0.5;
        // negatives at S = beta as well, contributing W * ln 2 each
        s[[0, 2]] = 0.5;
        s[[1, 2]] = 0.5;
        let j = deviance_cost(&s, &masks, 2.0, 0.5).unwrap();
        assert!((j - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deviance_is_monotone_per_pair() {
        let pos = PairMasks::general(&[1, 1, 2], 2.0).unwrap();
        let cost_at = |value: f64, (i, j): (usize, usize)| {
            let mut s = Array2::zeros((3, 3));
            s[[i, j]] = value;
            deviance_cost(&s, &pos, 2.0, 0.5).unwrap()
        };
        let grid: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
        for w in grid.windows(2) {
            assert!(cost_at(w[1], (0, 1)) < cost_at(w[0], (0, 1)));
            assert!(cost_at(w[1], (0, 2)) > cost_at(w[0], (0, 2)));
        }
    }

    #[test]
    fn fisher_example() {
        let masks = PairMasks::general(&[1, 1, 2, 2], 1.0).unwrap();
        let mut s = Array2::zeros((4, 4));
        for (i, j) in masks.considered().collect::<Vec<_>>() {
            s[[i, j]] = if masks.m[[i, j]] > 0.0 { 0.9 } else { 0.1 };
        }
        let j = fisher_cost(&s, &masks).unwrap();
        // sum P∘S = 0.9 - 0.1 = 0.8; mean = 2.2 / 6; denominator = 0.853333...
        let mean = 2.2 / 6.0;
        let denom = 2.0 * (0.9f64 - mean).powi(2) + 4.0 * (0.1f64 - mean).powi(2);
        assert!((denom - 0.8533333333333334).abs() < 1e-12);
        assert!((j - (-0.64 / denom)).abs() < 1e-12);
        assert!((j + 0.75).abs() < 1e-12);
        let scaled = fisher_cost(&(&s * 7.0), &masks).unwrap();
        assert!((scaled - j).abs() < 1e-12);
        assert!(matches!(fisher_cost(&Array2::from_elem((4, 4), 0.3), &masks), Err(Error::DegenerateVariance)));
    }

    #[test]
    fn single_pair_general_batch() {
        let x = array![[1.0, 0.2], [0.5, 0.9], [-0.3, 0.4]];
        let masks = PairMasks::general_lenient(&[3, 3], 2.0).unwrap();
        assert_eq!((masks.n1, masks.n2), (1, 0));
        assert!(PairMasks::general(&[3, 3], 2.0).is_err());
        let s = cosine_matrix(&x, &x).unwrap();
        let cost = deviance_cost(&s, &masks, 2.0, 0.5).unwrap();
        let (oracle_cost, oracle_grad) = pairwise_oracle(&x, &masks, 2.0, 0.5).unwrap();
        let expected = softplus(-2.0 * (s[[0, 1]] - 0.5));
        assert!((cost - expected).abs() < 1e-15);
        assert!((oracle_cost - expected).abs() < 1e-15);
        let grad = deviance_grad_general(&x, &s, &masks, 2.0, 0.5).unwrap();
        for (a, b) in grad.iter().zip(oracle_grad.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_mask_gives_zero_specific_gradient() {
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let y = array![[0.3, 0.2, 1.0], [1.0, -0.4, 0.0]];
        let e = Array2::zeros((2, 3));
        let (gx, gy) = cosine_backward_specific(&x, &y, &e).unwrap();
        assert!(gx.iter().chain(gy.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_reduces_to_scalar_deviance() {
        let x = array![[1.0, 0.2], [0.5, 0.9]];
        let masks = PairMasks::view_specific_lenient(&[0], &[0], 1.0).unwrap();
        let s = cosine_matrix(&x.slice(ndarray::s![.., 0..1]).to_owned(), &x.slice(ndarray::s![.., 1..2]).to_owned()).unwrap();
        let j = deviance_cost(&s, &masks, 2.0, 0.5).unwrap();
        let cos = s[[0, 0]];
        assert!((j - (1.0 + (-2.0 * (cos - 0.5)).exp()).ln()).abs() < 1e-15);
    }
}
