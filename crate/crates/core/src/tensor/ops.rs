//! Primitive kernels: shape rules, forward evaluation, and vector-Jacobian
//! products. All kernels are pure functions of their input slices (dropout
//! draws its mask from its own seed), which is what lets checkpoint regions
//! replay bit-exactly.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TensorError;

/// Clamp applied to probabilities inside binary cross-entropy logs.
pub(crate) const BCE_EPS: f64 = 1e-12;
/// Lower bound on the norm product in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `a · b`, or `a · bᵀ` with `transpose_b`.
    MatMul { transpose_b: bool },
    /// Elementwise sum; a 1-D `b` whose length is `a`'s trailing dimension is
    /// broadcast over rows.
    Add,
    MulScalar(f64),
    Relu,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
    /// Mean of all entries, as a scalar.
    Mean,
    /// Maximum over scalar inputs. The gradient goes to the lowest-index
    /// argmax only.
    MaxOverModels,
    /// Row-wise cosine of two `n×p` inputs giving `n` values, or a single
    /// cosine over the flattened tensors.
    CosineSimilarity { flatten: bool },
    /// Mean binary cross-entropy of probabilities against targets.
    BinaryCrossEntropy,
    /// Mean softmax cross-entropy of `n×K` logits against class indices.
    SoftmaxCrossEntropy { labels: Arc<[usize]> },
    /// Inverted dropout; the mask is a pure function of `seed`.
    Dropout { rate: f64, seed: u64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Mean => "mean",
            OpKind::MaxOverModels => "max_over_models",
            OpKind::CosineSimilarity { .. } => "cosine_similarity",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::Dropout { .. } => "dropout",
        }
    }
}

pub(crate) struct Input<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

fn mismatch(op: &OpKind, detail: String) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        detail,
    }
}

fn matrix_dims(op: &OpKind, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        _ => Err(mismatch(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn arity(op: &OpKind, inputs: &[Input], want: usize) -> Result<(), TensorError> {
    if inputs.len() != want {
        return Err(mismatch(
            op,
            format!("expected {want} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Validates input shapes and returns the output shape.
pub(crate) fn infer_shape(op: &OpKind, inputs: &[Input]) -> Result<Vec<usize>, TensorError> {
    match op {
        OpKind::MatMul { transpose_b } => {
            arity(op, inputs, 2)?;
            let (m, k) = matrix_dims(op, inputs[0].shape)?;
            let (br, bc) = matrix_dims(op, inputs[1].shape)?;
            let (bk, n) = if *transpose_b { (bc, br) } else { (br, bc) };
            if k != bk {
                return Err(mismatch(
                    op,
                    format!("{:?} by {:?}", inputs[0].shape, inputs[1].shape),
                ));
            }
            Ok(vec![m, n])
        }
        OpKind::Add => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0].shape, inputs[1].shape);
            if a == b || (b.len() == 1 && a.last() == b.first()) {
                Ok(a.to_vec())
            } else {
                Err(mismatch(op, format!("{a:?} + {b:?}")))
            }
        }
        OpKind::MulScalar(_) | OpKind::Relu | OpKind::Sigmoid | OpKind::Softmax => {
            arity(op, inputs, 1)?;
            if matches!(op, OpKind::Softmax) {
                matrix_dims(op, inputs[0].shape)?;
            }
            Ok(inputs[0].shape.to_vec())
        }
        OpKind::Dropout { rate, .. } => {
            arity(op, inputs, 1)?;
            if !(0.0..1.0).contains(rate) {
                return Err(TensorError::DropoutRate(*rate));
            }
            Ok(inputs[0].shape.to_vec())
        }
        OpKind::Mean => {
            arity(op, inputs, 1)?;
            Ok(vec![1])
        }
        OpKind::MaxOverModels => {
            if inputs.is_empty() {
                return Err(TensorError::Arity {
                    op: op.name(),
                    min: 1,
                    got: 0,
                });
            }
            if let Some(bad) = inputs.iter().find(|i| i.data.len() != 1) {
                return Err(mismatch(op, format!("non-scalar input {:?}", bad.shape)));
            }
            Ok(vec![1])
        }
        OpKind::CosineSimilarity { flatten } => {
            arity(op, inputs, 2)?;
            if inputs[0].shape != inputs[1].shape {
                return Err(mismatch(
                    op,
                    format!("{:?} vs {:?}", inputs[0].shape, inputs[1].shape),
                ));
            }
            if *flatten {
                Ok(vec![1])
            } else {
                let (n, _) = matrix_dims(op, inputs[0].shape)?;
                Ok(vec![n])
            }
        }
        OpKind::BinaryCrossEntropy => {
            arity(op, inputs, 2)?;
            if inputs[0].shape != inputs[1].shape {
                return Err(mismatch(
                    op,
                    format!("pred {:?} vs target {:?}", inputs[0].shape, inputs[1].shape),
                ));
            }
            Ok(vec![1])
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            arity(op, inputs, 1)?;
            let (n, k) = matrix_dims(op, inputs[0].shape)?;
            if labels.len() != n {
                return Err(mismatch(op, format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(mismatch(op, format!("label {bad} out of range for {k} classes")));
            }
            Ok(vec![1])
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keep-mask scale factors for dropout: `1/(1-rate)` for kept entries, `0`
/// for dropped ones.
pub(crate) fn dropout_mask(rate: f64, seed: u64, len: usize) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
        .collect()
}

fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
fn matmul_bt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_at_into(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

fn row_view(shape: &[usize], flatten: bool, len: usize) -> (usize, usize) {
    if flatten || shape.len() == 1 {
        (1, len)
    } else {
        (shape[0], len / shape[0])
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (orow, row) in out.chunks_mut(cols).zip(data.chunks(cols)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// Forward evaluation. Returns the output values and an auxiliary index
/// (the argmax for `MaxOverModels`, zero otherwise).
pub(crate) fn forward(op: &OpKind, inputs: &[Input], out_shape: &[usize]) -> (Vec<f64>, usize) {
    let out_len: usize = out_shape.iter().product();
    match op {
        OpKind::MatMul { transpose_b } => {
            let (m, k) = matrix_dims(op, inputs[0].shape).expect("validated");
            let n = out_shape[1];
            let mut out = vec![0.0; out_len];
            if *transpose_b {
                matmul_bt_into(&mut out, inputs[0].data, inputs[1].data, m, k, n);
            } else {
                matmul_into(&mut out, inputs[0].data, inputs[1].data, m, k, n);
            }
            (out, 0)
        }
        OpKind::Add => {
            let (a, b) = (inputs[0].data, inputs[1].data);
            let out = if a.len() == b.len() {
                a.iter().zip(b).map(|(x, y)| x + y).collect()
            } else {
                a.iter()
                    .zip(b.iter().cycle())
                    .map(|(x, y)| x + y)
                    .collect()
            };
            (out, 0)
        }
        OpKind::MulScalar(s) => (inputs[0].data.iter().map(|x| x * s).collect(), 0),
        OpKind::Relu => (inputs[0].data.iter().map(|&x| x.max(0.0)).collect(), 0),
        OpKind::Sigmoid => (inputs[0].data.iter().map(|&x| sigmoid(x)).collect(), 0),
        OpKind::Softmax => {
            let (_, c) = matrix_dims(op, inputs[0].shape).expect("validated");
            (softmax_rows(inputs[0].data, c), 0)
        }
        OpKind::Mean => {
            let d = inputs[0].data;
            (vec![d.iter().sum::<f64>() / d.len() as f64], 0)
        }
        OpKind::MaxOverModels => {
            let mut best = 0;
            for (i, inp) in inputs.iter().enumerate() {
                if inp.data[0] > inputs[best].data[0] {
                    best = i;
                }
            }
            (vec![inputs[best].data[0]], best)
        }
        OpKind::CosineSimilarity { flatten } => {
            let (a, b) = (inputs[0].data, inputs[1].data);
            let (rows, cols) = row_view(inputs[0].shape, *flatten, a.len());
            let out = (0..rows)
                .map(|r| {
                    let ar = &a[r * cols..(r + 1) * cols];
                    let br = &b[r * cols..(r + 1) * cols];
                    cosine(ar, br).0
                })
                .collect();
            (out, 0)
        }
        OpKind::BinaryCrossEntropy => {
            let (p, t) = (inputs[0].data, inputs[1].data);
            let total: f64 = p
                .iter()
                .zip(t)
                .map(|(&p, &t)| {
                    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            (vec![total / p.len() as f64], 0)
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let (n, k) = matrix_dims(op, inputs[0].shape).expect("validated");
            let z = inputs[0].data;
            let total: f64 = (0..n)
                .map(|i| {
                    let row = &z[i * k..(i + 1) * k];
                    log_sum_exp(row) - row[labels[i]]
                })
                .sum();
            (vec![total / n as f64], 0)
        }
        OpKind::Dropout { rate, seed } => {
            let mask = dropout_mask(*rate, *seed, out_len);
            (
                inputs[0].data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
                0,
            )
        }
    }
}

/// Cosine with the norm-product guard; also returns (dot, |a|, |b|, denominator).
fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = (na * nb).max(COSINE_EPS);
    (dot / denom, dot, na, nb, denom)
}

/// Vector-Jacobian product. `needs[i]` says whether input `i` wants a
/// gradient; the returned vector holds one entry per input.
pub(crate) fn backward(
    op: &OpKind,
    inputs: &[Input],
    output: &[f64],
    aux: usize,
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        OpKind::MatMul { transpose_b } => {
            let (m, k) = matrix_dims(op, inputs[0].shape).expect("validated");
            let n = grad.len() / m;
            let (a, b) = (inputs[0].data, inputs[1].data);
            if needs[0] {
                let mut da = vec![0.0; a.len()];
                if *transpose_b {
                    // C = A Bᵀ, B: n×k  =>  dA = G B
                    matmul_into(&mut da, grad, b, m, n, k);
                } else {
                    // C = A B, B: k×n  =>  dA = G Bᵀ
                    matmul_bt_into(&mut da, grad, b, m, n, k);
                }
                out[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![0.0; b.len()];
                if *transpose_b {
                    // dB = Gᵀ A  (n×k)
                    matmul_at_into(&mut db, grad, a, m, n, k);
                } else {
                    // dB = Aᵀ G  (k×n)
                    matmul_at_into(&mut db, a, grad, m, k, n);
                }
                out[1] = Some(db);
            }
        }
        OpKind::Add => {
            if needs[0] {
                out[0] = Some(grad.to_vec());
            }
            if needs[1] {
                let blen = inputs[1].data.len();
                if blen == grad.len() {
                    out[1] = Some(grad.to_vec());
                } else {
                    let mut db = vec![0.0; blen];
                    for row in grad.chunks(blen) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    out[1] = Some(db);
                }
            }
        }
        OpKind::MulScalar(s) => {
            out[0] = Some(grad.iter().map(|g| g * s).collect());
        }
        OpKind::Relu => {
            out[0] = Some(
                inputs[0]
                    .data
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            );
        }
        OpKind::Sigmoid => {
            out[0] = Some(output.iter().zip(grad).map(|(y, g)| g * y * (1.0 - y)).collect());
        }
        OpKind::Softmax => {
            let (_, c) = matrix_dims(op, inputs[0].shape).expect("validated");
            let mut dx = vec![0.0; output.len()];
            for ((drow, yrow), grow) in dx.chunks_mut(c).zip(output.chunks(c)).zip(grad.chunks(c)) {
                let inner: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = y * (g - inner);
                }
            }
            out[0] = Some(dx);
        }
        OpKind::Mean => {
            let n = inputs[0].data.len();
            out[0] = Some(vec![grad[0] / n as f64; n]);
        }
        OpKind::MaxOverModels => {
            if needs[aux] {
                out[aux] = Some(vec![grad[0]]);
            }
        }
        OpKind::CosineSimilarity { flatten } => {
            let (a, b) = (inputs[0].data, inputs[1].data);
            let (rows, cols) = row_view(inputs[0].shape, *flatten, a.len());
            let mut da = vec![0.0; a.len()];
            let mut db = vec![0.0; b.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let (ar, br) = (&a[span.clone()], &b[span.clone()]);
                let (c, _dot, na, nb, denom) = cosine(ar, br);
                let g = grad[r];
                let guarded = na * nb < COSINE_EPS;
                // c = dot / denom; with denom = |a||b| the norm terms contribute
                // -c a/|a|^2 and -c b/|b|^2.
                for i in 0..cols {
                    let mut ga = br[i] / denom;
                    let mut gb = ar[i] / denom;
                    if !guarded {
                        if na > 0.0 {
                            ga -= c * ar[i] / (na * na);
                        }
                        if nb > 0.0 {
                            gb -= c * br[i] / (nb * nb);
                        }
                    }
                    da[span.start + i] = g * ga;
                    db[span.start + i] = g * gb;
                }
            }
            out[0] = Some(da);
            out[1] = Some(db);
        }
        OpKind::BinaryCrossEntropy => {
            let (p, t) = (inputs[0].data, inputs[1].data);
            let scale = grad[0] / p.len() as f64;
            if needs[0] {
                out[0] = Some(
                    p.iter()
                        .zip(t)
                        .map(|(&p, &t)| {
                            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                                0.0
                            } else {
                                scale * (-t / p + (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect(),
                );
            }
            if needs[1] {
                out[1] = Some(
                    p.iter()
                        .map(|&p| {
                            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            -scale * (p.ln() - (1.0 - p).ln())
                        })
                        .collect(),
                );
            }
        }
        OpKind::SoftmaxCrossEntropy { labels } => {
            let (n, k) = matrix_dims(op, inputs[0].shape).expect("validated");
            let mut dz = softmax_rows(inputs[0].data, k);
            let scale = grad[0] / n as f64;
            for (i, row) in dz.chunks_mut(k).enumerate() {
                row[labels[i]] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            out[0] = Some(dz);
        }
        OpKind::Dropout { rate, seed } => {
            let mask = dropout_mask(*rate, *seed, grad.len());
            out[0] = Some(grad.iter().zip(&mask).map(|(g, m)| g * m).collect());
        }
    }
    for (o, &need) in out.iter_mut().zip(needs) {
        if !need {
            *o = None;
        }
    }
    out
}
