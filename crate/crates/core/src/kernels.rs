//! Attention primitives shared by every head kind: parameter-free layer
//! normalization, masked softmax, and dense / local / strided causal attention.
//!
//! Logits are scaled by `1/sqrt(d)` and the causal mask includes the diagonal,
//! so query `i` may attend to keys `j <= i`.

use crate::error::{ensure, Error, Result};
use crate::tensor::{axpy, dot, Scalar, Tensor};

/// Counts multiply-accumulate operations performed by the attention kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
}

impl OpCounter {
    pub fn add(&mut self, macs: usize) {
        self.macs += macs as u64;
    }
}

/// Normalizes every row to zero mean and unit variance, so that each row ends
/// up with Euclidean norm `sqrt(d)`. No gain or bias is applied.
pub fn layer_normalize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(x.rank() == 2, "layer_normalize expects a matrix");
    let d = x.cols();
    ensure!(d >= 2, "layer_normalize needs d >= 2, got {d}");
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (mean, var) = row_moments(x.row(i));
        let floor = T::epsilon() * T::epsilon() * mean * mean;
        if !(var > floor) || var <= T::min_positive_value() {
            return Err(Error::Degenerate(format!(
                "row {i} has zero variance (variance underflow)"
            )));
        }
        let inv = var.sqrt().recip();
        for v in out.row_mut(i) {
            *v = (*v - mean) * inv;
        }
    }
    Ok(out)
}

/// Layer normalization with a variance floor `eps`, for use inside the model
/// where constant rows are possible. Returns the normalized rows together
/// with the per-row reciprocal standard deviation needed for backprop.
pub fn layer_normalize_eps<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let (mean, var) = row_moments(x.row(i));
        let inv = (var + eps).sqrt().recip();
        for v in out.row_mut(i) {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    (mean, var)
}

/// Numerically stable softmax over a slice, in place.
pub(crate) fn softmax_in_place<T: Scalar>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in logits.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax of `logits` restricted to entries where `mask` is true.
/// Masked entries come out as exactly zero.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<bool>) -> Result<Tensor<T>> {
    ensure!(logits.rank() == 2, "masked_softmax expects a matrix");
    ensure!(
        logits.shape() == mask.shape(),
        "logits {:?} and mask {:?} differ in shape",
        logits.shape(),
        mask.shape()
    );
    let mut out = logits.clone();
    for i in 0..logits.rows() {
        let keep = mask.row(i);
        if !keep.iter().any(|&b| b) {
            return Err(Error::EmptySupport { row: i });
        }
        let row = out.row_mut(i);
        for (v, &k) in row.iter_mut().zip(keep) {
            if !k {
                *v = T::neg_infinity();
            }
        }
        softmax_in_place(row);
        for (v, &k) in row.iter_mut().zip(keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Per-query list of attendable key positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsitySet {
    rows: Vec<Vec<usize>>,
}

impl SparsitySet {
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        Self { rows }
    }

    /// Full causal support `{0, ..., i}`.
    pub fn causal(n: usize) -> Self {
        Self::from_rows((0..n).map(|i| (0..=i).collect()).collect())
    }

    /// The last `window` positions up to and including `i`.
    pub fn local(n: usize, window: usize) -> Result<Self> {
        ensure!(window >= 1, "local window must be >= 1");
        Ok(Self::from_rows(
            (0..n)
                .map(|i| ((i + 1).saturating_sub(window)..=i).collect())
                .collect(),
        ))
    }

    /// Positions `j <= i` with `(i - j) mod stride == 0`.
    pub fn strided(n: usize, stride: usize) -> Result<Self> {
        ensure!(stride >= 1, "stride must be >= 1");
        Ok(Self::from_rows(
            (0..n)
                .map(|i| (i % stride..=i).step_by(stride).collect())
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn is_causal(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().all(|&j| j <= i))
    }

    /// Dense boolean mask of shape `[n, n]`.
    pub fn to_mask(&self) -> Tensor<bool> {
        let n = self.rows.len();
        let mut mask = Tensor::filled(vec![n, n], false);
        for (i, r) in self.rows.iter().enumerate() {
            for &j in r {
                mask.set(i, j, true);
            }
        }
        mask
    }
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    ensure!(
        q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
        "attention inputs must be matrices"
    );
    ensure!(
        q.shape() == k.shape() && q.rows() == v.rows(),
        "attention shape mismatch: q {:?}, k {:?}, v {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    Ok(())
}

fn logit_scale<T: Scalar>(d: usize) -> T {
    T::from_f64(1.0 / (d as f64).sqrt())
}

/// Attention through an explicit dense mask: builds the full `[n, n]` logit
/// matrix, applies [`masked_softmax`], then mixes value rows. Only unmasked
/// entries are computed and counted.
pub fn masked_attention_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<bool>,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let (n, d) = (q.rows(), q.cols());
    ensure!(mask.shape() == [n, n], "mask must be [{n}, {n}]");
    if n == 0 {
        return Ok(Tensor::zeros(vec![0, v.cols()]));
    }
    let scale = logit_scale::<T>(d);
    let mut logits = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if *mask.get(i, j) {
                logits.set(i, j, dot(q.row(i), k.row(j)) * scale);
                ops.add(d);
            }
        }
    }
    let weights = masked_softmax(&logits, mask)?;
    let mut out = Tensor::zeros(vec![n, v.cols()]);
    for i in 0..n {
        for j in 0..n {
            if *mask.get(i, j) {
                let w = *weights.get(i, j);
                axpy(w, v.row(j), out.row_mut(i));
                ops.add(v.cols());
            }
        }
    }
    Ok(out)
}

pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<bool>,
) -> Result<Tensor<T>> {
    masked_attention_counted(q, k, v, mask, &mut OpCounter::default())
}

/// Dense causal attention, the reference every sparse variant is checked
/// against.
pub fn dense_causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    dense_causal_attention_counted(q, k, v, &mut OpCounter::default())
}

pub fn dense_causal_attention_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let mask = SparsitySet::causal(q.rows()).to_mask();
    masked_attention_counted(q, k, v, &mask, ops)
}

/// Attention over an explicit per-row support, without materializing the
/// `[n, n]` matrices.
pub fn sparse_attention_counted<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    support: &SparsitySet,
    ops: &mut OpCounter,
) -> Result<Tensor<T>> {
    check_qkv(q, k, v)?;
    let (n, d) = (q.rows(), q.cols());
    ensure!(support.len() == n, "support has {} rows, expected {n}", support.len());
    let scale = logit_scale::<T>(d);
    let mut out = Tensor::zeros(vec![n, v.cols()]);
    let mut weights = Vec::new();
    for i in 0..n {
        let keys = support.row(i);
        if keys.is_empty() {
            return Err(Error::EmptySupport { row: i });
        }
        ensure!(keys.iter().all(|&j| j < n), "support row {i} out of range");
        weights.clear();
        weights.extend(keys.iter().map(|&j| dot(q.row(i), k.row(j)) * scale));
        softmax_in_place(&mut weights);
        let orow = out.row_mut(i);
        for (&j, &w) in keys.iter().zip(&weights) {
            axpy(w, v.row(j), orow);
        }
        ops.add(keys.len() * (d + v.cols()));
    }
    Ok(out)
}

pub fn sparse_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    support: &SparsitySet,
) -> Result<Tensor<T>> {
    sparse_attention_counted(q, k, v, support, &mut OpCounter::default())
}

/// Causal attention over the last `window` positions (self included).
pub fn local_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let support = SparsitySet::local(q.rows(), window)?;
    sparse_attention(q, k, v, &support)
}

/// Causal attention over positions a multiple of `stride` behind the query.
pub fn strided_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let support = SparsitySet::strided(q.rows(), stride)?;
    sparse_attention(q, k, v, &support)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layer_normalize_two_elements() {
        let x = Tensor::new(vec![1, 2], vec![3.0f64, 4.0]).unwrap();
        let y = layer_normalize(&x).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_normalize_rejects_constant_row() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 0.7, 0.7, 0.7]).unwrap();
        assert!(matches!(layer_normalize(&x), Err(Error::Degenerate(_))));
        let zeros = Tensor::<f32>::zeros(vec![1, 4]);
        assert!(matches!(layer_normalize(&zeros), Err(Error::Degenerate(_))));
    }

    #[test]
    fn layer_normalize_needs_two_columns() {
        let x = Tensor::new(vec![1, 1], vec![3.0f64]).unwrap();
        assert!(matches!(layer_normalize(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn layer_normalize_random_rows_have_norm_sqrt_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f32> = random(8, 16, &mut rng).cast();
        let y = layer_normalize(&x).unwrap();
        for i in 0..8 {
            let row = y.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let mean = row.iter().sum::<f32>() / 16.0;
            assert!((norm - 4.0).abs() < 1e-5, "row {i} norm {norm}");
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let l = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        let m = Tensor::filled(vec![1, 2], true);
        assert_eq!(masked_softmax(&l, &m).unwrap().data(), &[0.5, 0.5]);

        let l = Tensor::new(vec![1, 2], vec![5.0f64, 3.0]).unwrap();
        let m = Tensor::new(vec![1, 2], vec![true, false]).unwrap();
        assert_eq!(masked_softmax(&l, &m).unwrap().data(), &[1.0, 0.0]);

        let l = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let m = Tensor::filled(vec![1, 3], true);
        let p = masked_softmax(&l, &m).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, want) in [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).enumerate() {
            assert!((p.data()[j] - want).abs() < 1e-15);
        }
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_an_error() {
        let l = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![true, false, false, false]).unwrap();
        assert!(matches!(masked_softmax(&l, &m), Err(Error::EmptySupport { row: 1 })));
    }

    #[test]
    fn masked_softmax_survives_huge_logits() {
        let l = Tensor::new(vec![1, 3], vec![1000.0f64, 999.0, -1e300]).unwrap();
        let m = Tensor::filled(vec![1, 3], true);
        let p = masked_softmax(&l, &m).unwrap();
        assert!(p.is_finite());
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_single_row_copies_value() {
        let q = Tensor::new(vec![1, 2], vec![0.3f64, -2.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![5.0f64, 6.0]).unwrap();
        let out = dense_causal_attention(&q, &q, &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn dense_hand_computed_pair() {
        let q = Tensor::new(vec![2, 1], vec![1.0f64, 1.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![2.0f64, 4.0]).unwrap();
        let out = dense_causal_attention(&q, &q, &v).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-15);
        assert!((out.data()[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn dense_zero_values_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(6, 4, &mut rng);
        let k = random(6, 4, &mut rng);
        let v = Tensor::zeros(vec![6, 4]);
        let out = dense_causal_attention(&q, &k, &v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dense_empty_and_mismatched_inputs() {
        let e = Tensor::<f64>::zeros(vec![0, 3]);
        assert_eq!(dense_causal_attention(&e, &e, &e).unwrap().shape(), &[0, 3]);
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 4]);
        assert!(matches!(dense_causal_attention(&a, &b, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn local_window_one_is_identity_on_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (random(7, 3, &mut rng), random(7, 3, &mut rng), random(7, 3, &mut rng));
        let out = local_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(out.data(), v.data());
        assert!(matches!(local_attention(&q, &k, &v, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn local_window_covering_sequence_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(9, 4, &mut rng), random(9, 4, &mut rng), random(9, 4, &mut rng));
        assert_eq!(SparsitySet::local(9, 9).unwrap(), SparsitySet::causal(9));
        let dense = dense_causal_attention(&q, &k, &v).unwrap();
        let local = local_attention(&q, &k, &v, 20).unwrap();
        assert!(dense.max_abs_diff(&local) < 1e-12);
    }

    #[test]
    fn local_support_of_last_row() {
        let s = SparsitySet::local(4, 2).unwrap();
        assert_eq!(s.row(3), &[2, 3]);
        assert_eq!(s.row(0), &[0]);
    }

    #[test]
    fn strided_support() {
        let s = SparsitySet::strided(5, 2).unwrap();
        assert_eq!(s.row(4), &[0, 2, 4]);
        assert_eq!(s.row(3), &[1, 3]);
        assert_eq!(SparsitySet::strided(6, 1).unwrap(), SparsitySet::causal(6));
        assert!(SparsitySet::strided(3, 0).is_err());
    }

    #[test]
    fn strided_matches_masked_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random(6, 3, &mut rng), random(6, 3, &mut rng), random(6, 3, &mut rng));
        let mask = SparsitySet::strided(6, 3).unwrap().to_mask();
        let oracle = masked_attention(&q, &k, &v, &mask).unwrap();
        let out = strided_attention(&q, &k, &v, 3).unwrap();
        assert!(oracle.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn dense_counter_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d) = (13, 5);
        let (q, k, v) = (random(n, d, &mut rng), random(n, d, &mut rng), random(n, d, &mut rng));
        let mut ops = OpCounter::default();
        dense_causal_attention_counted(&q, &k, &v, &mut ops).unwrap();
        assert_eq!(ops.macs, (n * (n + 1) / 2 * d * 2) as u64);
        let mut sparse_ops = OpCounter::default();
        sparse_attention_counted(&q, &k, &v, &SparsitySet::causal(n), &mut sparse_ops).unwrap();
        assert_eq!(sparse_ops, ops);
    }
}
