//! Diversity metrics over slice members: prediction disagreement, linear
//! CKA of concept representations, exact linear SHAP attributions with their
//! similarity and top-k union size, and singular-vector similarity of
//! adapted weight matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{ConceptDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Prediction, RashomonSlice};
use crate::tensor::COSINE_EPS;
use crate::tensor::Tensor;

fn nonempty_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Argument {
            field: what.into(),
            detail: format!("length mismatch: {a} vs {b}"),
        });
    }
    if a == 0 {
        return Err(Error::Argument {
            field: what.into(),
            detail: "empty input".into(),
        });
    }
    Ok(())
}

/// Fraction of positions where the two label sequences differ.
pub fn hamming(a: &[usize], b: &[usize]) -> Result<f64> {
    nonempty_aligned(a.len(), b.len(), "predictions")?;
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    Ok(1.0 - hamming(preds, labels)?)
}

/// Fraction of concept bits matched after thresholding probabilities at 0.5
/// (a probability of exactly 0.5 counts as 1).
pub fn concept_accuracy(probs: &Tensor, concepts: &Tensor) -> Result<f64> {
    nonempty_aligned(probs.len(), concepts.len(), "concepts")?;
    let hits = probs
        .values()
        .iter()
        .zip(concepts.values())
        .filter(|(&p, &c)| (p >= 0.5) == (c >= 0.5))
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

fn centered_gram(z: &Tensor) -> Vec<f64> {
    let (n, d) = (z.rows(), z.cols());
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let _ = d;
    let row_mean: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // K is symmetric, so column means equal row means
            k[i * n + j] += grand - row_mean[i] - row_mean[j];
        }
    }
    k
}

/// Linear CKA: the cosine between the doubly-centered Gram matrices
/// `H Z Zᵀ H` of the two representations.
pub fn linear_cka(z1: &Tensor, z2: &Tensor) -> Result<f64> {
    if z1.shape().len() != 2 || z2.shape().len() != 2 || z1.rows() != z2.rows() {
        return Err(Error::Argument {
            field: "representations".into(),
            detail: format!("row mismatch: {:?} vs {:?}", z1.shape(), z2.shape()),
        });
    }
    if z1.rows() < 2 {
        return Err(Error::Argument {
            field: "representations".into(),
            detail: "need at least two samples".into(),
        });
    }
    let k1 = centered_gram(z1);
    let k2 = centered_gram(z2);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (n11, n22) = (dot(&k1, &k1), dot(&k2, &k2));
    let raw = |z: &Tensor| dot(z.values(), z.values());
    for (nk, z, which) in [(n11, z1, "first"), (n22, z2, "second")] {
        // a constant representation centers to zero up to rounding
        let scale = raw(z) * raw(z);
        if nk <= 1e-24 * scale || nk == 0.0 {
            return Err(Error::Degenerate {
                metric: "linear_cka",
                detail: format!("{which} representation has a zero centered Gram matrix"),
            });
        }
    }
    Ok((dot(&k1, &k2) / (n11 * n22).sqrt()).clamp(0.0, 1.0))
}

/// Exact Shapley values of `v` over `p` players by enumerating all
/// coalitions. `v` receives a membership mask.
pub fn shapley_enumerate(p: usize, v: impl Fn(&[bool]) -> f64) -> Vec<f64> {
    assert!(p <= 20, "coalition enumeration is exponential in p");
    let fact: Vec<f64> = (0..=p).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    })
    .collect();
    let values: Vec<f64> = (0..1usize << p)
        .map(|s| {
            let mask: Vec<bool> = (0..p).map(|j| s >> j & 1 == 1).collect();
            v(&mask)
        })
        .collect();
    let mut phi = vec![0.0; p];
    for (j, slot) in phi.iter_mut().enumerate() {
        for s in 0..1usize << p {
            if s >> j & 1 == 1 {
                continue;
            }
            let size = s.count_ones() as usize;
            let weight = fact[size] * fact[p - size - 1] / fact[p];
            *slot += weight * (values[s | 1 << j] - values[s]);
        }
    }
    phi
}

/// Exact SHAP values of class `k` of the linear map `w·x + b` relative to
/// background `mu`: `φ_j = w[k][j]·(x_j − μ_j)`.
pub fn shap_linear(w: &Tensor, x: &[f64], mu: &[f64], k: usize) -> Result<Vec<f64>> {
    let p = w.cols();
    if x.len() != p || mu.len() != p || k >= w.rows() {
        return Err(Error::Argument {
            field: "shap".into(),
            detail: format!(
                "classifier {:?}, sample {}, background {}, class {k}",
                w.shape(),
                x.len(),
                mu.len()
            ),
        });
    }
    Ok(w.row(k).iter().zip(x.iter().zip(mu)).map(|(wk, (xi, mi))| wk * (xi - mi)).collect())
}

/// Indices of the `k` largest entries, largest first, ties by lower index.
pub fn top_k(phi: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..phi.len()).collect();
    idx.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub model: usize,
    pub phi: Vec<f64>,
    pub top_k: Vec<usize>,
}

/// Global concept importance of one member from its predictions: the mean
/// absolute SHAP value at each sample's predicted class, with the mean
/// concept-probability vector as background.
pub fn attribution_from(model: usize, pred: &Prediction, w: &Tensor, k: usize) -> Result<AttributionVector> {
    let probs = &pred.concept_probs;
    let (n, p) = (probs.rows(), probs.cols());
    if n == 0 {
        return Err(Error::Argument {
            field: "eval set".into(),
            detail: "empty evaluation set".into(),
        });
    }
    let mut mu = vec![0.0; p];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(probs.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let classes = pred.classes();
    let mut phi = vec![0.0; p];
    for (i, &cls) in classes.iter().enumerate() {
        for (acc, s) in phi.iter_mut().zip(shap_linear(w, probs.row(i), &mu, cls)?) {
            *acc += s.abs();
        }
    }
    phi.iter_mut().for_each(|v| *v /= n as f64);
    let top = top_k(&phi, k);
    Ok(AttributionVector {
        model,
        phi,
        top_k: top,
    })
}

pub fn attribution_vector(slice: &RashomonSlice, m: usize, x: &Tensor, k: usize) -> Result<AttributionVector> {
    let pred = slice.predict_one(x, m)?;
    attribution_from(m, &pred, slice.param(slice.classifier(m).w), k)
}

/// An `M × M` matrix of pairwise values with its off-diagonal mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub metric: String,
    pub values: Vec<Vec<f64>>,
    /// Mean over pairs `m1 < m2`; absent with a single member.
    pub off_mean: Option<f64>,
}

impl SimilarityMatrix {
    /// Fills the upper triangle from `pair`, mirrors it, and sets the
    /// diagonal to `diag`.
    pub fn from_pairs(metric: &str, m: usize, diag: f64, mut pair: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = vec![vec![diag; m]; m];
        for i in 0..m {
            for j in i + 1..m {
                let v = pair(i, j)?;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        let off_mean = Self::off_diagonal_mean(&values);
        Ok(SimilarityMatrix {
            metric: metric.into(),
            values,
            off_mean,
        })
    }

    pub fn off_diagonal_mean(values: &[Vec<f64>]) -> Option<f64> {
        let m = values.len();
        if m < 2 {
            return None;
        }
        let mut sum = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                sum += values[i][j];
            }
        }
        Some(2.0 * sum / (m * (m - 1)) as f64)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

pub fn shap_similarity(vectors: &[AttributionVector]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_pairs("shap_similarity", vectors.len(), 1.0, |i, j| {
        cosine(&vectors[i].phi, &vectors[j].phi).ok_or_else(|| Error::Degenerate {
            metric: "shap_similarity",
            detail: format!("model {} or {} has an all-zero attribution vector", vectors[i].model, vectors[j].model),
        })
    })
}

/// Size of the union of the members' top-`k` concept sets.
pub fn union_size(vectors: &[AttributionVector], k: usize) -> usize {
    let mut all: Vec<usize> = vectors.iter().flat_map(|v| top_k(&v.phi, k)).collect();
    all.sort_unstable();
    all.dedup();
    all.len()
}

pub fn hamming_matrix(preds: &[Vec<usize>]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_pairs("hamming", preds.len(), 0.0, |i, j| hamming(&preds[i], &preds[j]))
}

pub fn cka_matrix(reps: &[&Tensor]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_pairs("concept_cka", reps.len(), 1.0, |i, j| linear_cka(reps[i], reps[j]))
}

/// Mean over samples of the cosine between two members' concept vectors.
pub fn concept_cosine_matrix(reps: &[&Tensor]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_pairs("concept_cosine", reps.len(), 1.0, |i, j| {
        let (a, b) = (reps[i], reps[j]);
        nonempty_aligned(a.len(), b.len(), "concepts")?;
        let n = a.rows();
        let total: f64 = (0..n)
            .map(|r| {
                let dot: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum();
                let na = a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb).max(COSINE_EPS)
            })
            .sum();
        Ok(total / n as f64)
    })
}

/// Singular values in descending order with the matching right singular
/// vectors (one per row).
pub fn right_singular_vectors(w: &Tensor) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.values());
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let vectors = order.iter().map(|&i| vt.row(i).iter().copied().collect()).collect();
    (values, vectors)
}

/// Relative gap under which two singular values count as repeated.
pub const DEGENERACY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigvecSimilarity {
    pub layer: usize,
    pub k: usize,
    pub matrix: SimilarityMatrix,
    /// Some member has repeated singular values among its leading `k + 1`,
    /// so its individual singular vectors are not uniquely defined.
    pub degenerate: bool,
}

/// Index-paired `|cos|` between the leading `k` right singular vectors of
/// each pair of matrices, averaged over the `k` pairs.
pub fn eigvec_similarity(weights: &[Tensor], k: usize, layer: usize) -> Result<EigvecSimilarity> {
    let mut bases = Vec::with_capacity(weights.len());
    let mut degenerate = false;
    for (m, w) in weights.iter().enumerate() {
        let (s, v) = right_singular_vectors(w);
        let top = s.first().copied().unwrap_or(0.0);
        let tol = top * w.rows().max(w.cols()) as f64 * f64::EPSILON;
        let rank = s.iter().filter(|&&x| x > tol).count();
        if k == 0 || k > rank {
            return Err(Error::Argument {
                field: "eigvec_k".into(),
                detail: format!("k = {k} exceeds rank {rank} of model {m} at layer {layer}"),
            });
        }
        let window = (k + 1).min(s.len());
        degenerate |= s[..window].windows(2).any(|p| p[0] - p[1] <= DEGENERACY_TOL * top);
        bases.push(v);
    }
    let matrix = SimilarityMatrix::from_pairs("eigvec_similarity", weights.len(), 1.0, |i, j| {
        let total: f64 = (0..k)
            .map(|q| {
                bases[i][q]
                    .iter()
                    .zip(&bases[j][q])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .abs()
            })
            .sum();
        Ok(total / k as f64)
    })?;
    Ok(EigvecSimilarity {
        layer,
        k,
        matrix,
        degenerate,
    })
}

/// The matrix a member applies at `layer`: the adapted weight where the
/// layer has an adapter, otherwise the member's backbone weight.
pub fn layer_weight(slice: &RashomonSlice, m: usize, layer: usize) -> Result<Tensor> {
    if slice.adapter(m, layer).is_some() {
        slice.effective_weight(m, layer)
    } else {
        Ok(slice.param(slice.backbone_layer(m, layer).w).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_digest: String,
    pub mode: String,
    pub split: Split,
    pub n_eval: usize,
    pub task_accuracy: Vec<f64>,
    pub concept_accuracy: Vec<f64>,
    pub hamming: SimilarityMatrix,
    pub concept_cka: SimilarityMatrix,
    pub concept_cosine: SimilarityMatrix,
    pub shap_similarity: SimilarityMatrix,
    pub top_k: usize,
    pub union_size: usize,
    pub eigvec: Vec<EigvecSimilarity>,
    pub attributions: Vec<AttributionVector>,
}

impl MetricsReport {
    pub fn mean_task_accuracy(&self) -> f64 {
        self.task_accuracy.iter().sum::<f64>() / self.task_accuracy.len() as f64
    }
}

/// Runs every metric on `split` of `data`.
pub fn evaluate(
    slice: &RashomonSlice,
    data: &ConceptDataset,
    split: Split,
    cfg: &EvalConfig,
    config_digest: &str,
) -> Result<MetricsReport> {
    let batch = data.split(split);
    let preds = slice.predict(&batch.x)?;
    let classes: Vec<Vec<usize>> = preds.iter().map(Prediction::classes).collect();
    let task_accuracy = classes
        .iter()
        .map(|c| accuracy(c, &batch.y))
        .collect::<Result<Vec<_>>>()?;
    let concept_accuracy = preds
        .iter()
        .map(|p| self::concept_accuracy(&p.concept_probs, &batch.c))
        .collect::<Result<Vec<_>>>()?;
    let reps: Vec<&Tensor> = preds.iter().map(|p| &p.concept_probs).collect();
    let attributions = preds
        .iter()
        .enumerate()
        .map(|(m, p)| attribution_from(m, p, slice.param(slice.classifier(m).w), cfg.top_k))
        .collect::<Result<Vec<_>>>()?;
    let mut eigvec = Vec::new();
    for layer in 0..slice.spec().hidden.len() {
        let (i, o) = slice.spec().layer_dims(layer);
        if cfg.eigvec_k > i.min(o) {
            continue;
        }
        let ws = (0..slice.m())
            .map(|m| layer_weight(slice, m, layer))
            .collect::<Result<Vec<_>>>()?;
        eigvec.push(eigvec_similarity(&ws, cfg.eigvec_k, layer)?);
    }
    Ok(MetricsReport {
        config_digest: config_digest.into(),
        mode: slice.spec().mode.name().into(),
        split,
        n_eval: batch.len(),
        task_accuracy,
        concept_accuracy,
        hamming: hamming_matrix(&classes)?,
        concept_cka: cka_matrix(&reps)?,
        concept_cosine: concept_cosine_matrix(&reps)?,
        shap_similarity: shap_similarity(&attributions)?,
        top_k: cfg.top_k,
        union_size: union_size(&attributions, cfg.top_k),
        eigvec,
        attributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&[1, 2, 3, 4], &[1, 2, 4, 4]).unwrap(), 0.25);
        assert_eq!(hamming(&[1, 2], &[1, 2]).unwrap(), 0.0);
        assert_eq!(hamming(&[1, 2], &[2, 1]).unwrap(), 1.0);
        assert!(hamming(&[], &[]).is_err());
        assert!(hamming(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn concept_accuracy_counts_bits() {
        let probs = t(&[&[0.9, 0.2], &[0.4, 0.7], &[0.6, 0.1]]);
        let truth = t(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        assert!((concept_accuracy(&probs, &truth).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn cka_hand_case() {
        let z1 = t(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let z2 = t(&[&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((linear_cka(&z1, &z2).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(linear_cka(&z1, &z1).unwrap(), 1.0);
    }

    #[test]
    fn cka_rejects_constant_representation() {
        let z1 = t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let z2 = t(&[&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(linear_cka(&z1, &z2), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn shap_hand_case() {
        let w = t(&[&[2.0, -1.0]]);
        assert_eq!(shap_linear(&w, &[1.0, 0.0], &[0.5, 0.5], 0).unwrap(), vec![1.0, 0.5]);
    }

    #[test]
    fn shap_similarity_and_union_by_hand() {
        let v = |m, phi: Vec<f64>| AttributionVector {
            model: m,
            top_k: top_k(&phi, 2),
            phi,
        };
        let vs = [v(0, vec![1.0, 1.0, 0.0]), v(1, vec![0.0, 1.0, 1.0])];
        let s = shap_similarity(&vs).unwrap();
        assert!((s.values[0][1] - 0.5).abs() < 1e-15);
        assert_eq!(vs[0].top_k, vec![0, 1]);
        assert_eq!(vs[1].top_k, vec![1, 2]);
        assert_eq!(union_size(&vs, 2), 3);
    }

    #[test]
    fn enumeration_matches_a_known_game() {
        // glove game: players 0 and 1 hold left gloves, player 2 a right glove
        let phi = shapley_enumerate(3, |s| if (s[0] || s[1]) && s[2] { 1.0 } else { 0.0 });
        assert!((phi[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((phi[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((phi[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    fn diag4() -> Tensor {
        let mut v = vec![0.0; 16];
        for (i, d) in [4.0, 3.0, 2.0, 1.0].into_iter().enumerate() {
            v[i * 5] = d;
        }
        Tensor::new(&[4, 4], v).unwrap()
    }

    #[test]
    fn eigvec_tilted_first_row() {
        let w1 = diag4();
        let mut w2 = diag4();
        w2.values_mut()[0] += 0.5;
        w2.values_mut()[1] += 0.5;
        let expect = [0.981_210_210_965_437_48, 0.981_210_210_965_437_48, 0.987_473_473_976_958_28, 0.990_605_105_482_718_74];
        for (k, e) in (1..=4).zip(expect) {
            let r = eigvec_similarity(&[w1.clone(), w2.clone()], k, 0).unwrap();
            assert!((r.matrix.values[0][1] - e).abs() < 1e-12, "k={k}: {}", r.matrix.values[0][1]);
            assert!(!r.degenerate);
        }
    }

    #[test]
    fn eigvec_reordered_spectrum() {
        let w1 = diag4();
        let mut w2 = diag4();
        w2.values_mut()[15] += 5.0;
        for k in 1..=4 {
            let r = eigvec_similarity(&[w1.clone(), w2.clone()], k, 0).unwrap();
            assert!(r.matrix.values[0][1].abs() < 1e-12);
        }
    }

    #[test]
    fn eigvec_flags_identity_and_rank() {
        let id = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(eigvec_similarity(&[id.clone(), id.clone()], 1, 0).unwrap().degenerate);
        let low = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(eigvec_similarity(&[low.clone(), low], 2, 0).is_err());
    }

    #[test]
    fn off_mean_recomputes() {
        let s = SimilarityMatrix::from_pairs("x", 3, 1.0, |i, j| Ok((i + j) as f64)).unwrap();
        assert_eq!(s.off_mean, Some((1.0 + 2.0 + 3.0) / 3.0));
        assert_eq!(SimilarityMatrix::from_pairs("x", 1, 1.0, |_, _| Ok(0.0)).unwrap().off_mean, None);
    }
}
