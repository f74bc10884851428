//! Joint training of a slice.
//!
//! The objective over members `m = 1..M` is
//! `max_m L_pr(m) + λ·(max_m L_c(m) − (α/M)·Σ_m L_div(m))`
//! with softmax cross-entropy for `L_pr`, mean binary cross-entropy over
//! concepts for `L_c` and `L_div(m) = 1 − mean_{m'≠m} sim(m, m')`. The hard
//! maxes send gradient only to the worst member (lowest index on ties).

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{AlphaUpdate, SimilarityMode, TrainConfig};
use crate::data::{Batch, ConceptDataset, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Mode, RashomonSlice};
use crate::rng;
use crate::tensor::{meter, Tape, Tensor, TensorError, Var};

const SHUFFLE: u64 = 20;
const STEP: u64 = 21;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Loss components of one evaluation of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_model_pr: Vec<f64>,
    pub per_model_c: Vec<f64>,
    /// Empty when fewer than two members take part.
    pub per_model_div: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub total: f64,
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl LossBreakdown {
    /// The objective evaluated in plain arithmetic, in the same operation
    /// order as the tape.
    pub fn formula(pr: &[f64], c: &[f64], div: &[f64], lambda: f64, alpha: f64) -> f64 {
        let mut inner = max_of(c);
        if !div.is_empty() {
            let sum = div[1..].iter().fold(div[0], |a, d| a + d);
            inner += sum * (-alpha / div.len() as f64);
        }
        max_of(pr) + inner * lambda
    }

    pub fn reconstruct(&self) -> f64 {
        Self::formula(
            &self.per_model_pr,
            &self.per_model_c,
            &self.per_model_div,
            self.lambda,
            self.alpha,
        )
    }
}

/// Per-member diversity losses on the tape. `reps` are `batch × d`
/// representations aligned by sample.
pub fn diversity_loss(t: &mut Tape, reps: &[Var], similarity: SimilarityMode) -> Result<Vec<Var>> {
    let m = reps.len();
    if m < 2 {
        return Err(Error::Argument {
            field: "models".into(),
            detail: "diversity needs at least two members".into(),
        });
    }
    let flatten = similarity == SimilarityMode::Flattened;
    let mut sims = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let c = t.cosine_similarity(reps[i], reps[j], flatten)?;
            let s = t.mean(c)?;
            sims[i][j] = Some(s);
            sims[j][i] = Some(s);
        }
    }
    let one = t.constant(Tensor::scalar(1.0))?;
    let mut out = Vec::with_capacity(m);
    for row in &sims {
        let mut acc: Option<Var> = None;
        for s in row.iter().flatten() {
            acc = Some(match acc {
                None => *s,
                Some(a) => t.add(a, *s)?,
            });
        }
        let mean = t.mul_scalar(acc.expect("m >= 2"), -1.0 / (m - 1) as f64)?;
        out.push(t.add(one, mean)?);
    }
    Ok(out)
}

/// Builds the objective from per-member scalar nodes. `div` may be empty.
pub fn total_loss(t: &mut Tape, pr: &[Var], c: &[Var], div: &[Var], lambda: f64, alpha: f64) -> Result<Var, TensorError> {
    let max_pr = t.max_over_models(pr)?;
    let mut inner = t.max_over_models(c)?;
    if !div.is_empty() {
        let mut sum = div[0];
        for &d in &div[1..] {
            sum = t.add(sum, d)?;
        }
        let scaled = t.mul_scalar(sum, -alpha / div.len() as f64)?;
        inner = t.add(inner, scaled)?;
    }
    let weighted = t.mul_scalar(inner, lambda)?;
    t.add(max_pr, weighted)
}

/// `σ(mean over tensors of mean |g|)` over the concept-head gradients.
pub fn update_alpha(head_grads: &[&[f64]]) -> Result<f64> {
    let nonempty: Vec<&&[f64]> = head_grads.iter().filter(|g| !g.is_empty()).collect();
    if nonempty.is_empty() {
        return Err(Error::Argument {
            field: "head_grads".into(),
            detail: "the concept-head parameter set is empty".into(),
        });
    }
    let grand = nonempty
        .iter()
        .map(|g| g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64)
        .sum::<f64>()
        / nonempty.len() as f64;
    Ok(1.0 / (1.0 + (-grand).exp()))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    indices: Vec<usize>,
}

impl Adam {
    /// Optimizer over the given parameter indices of `slice`.
    pub fn new(slice: &RashomonSlice, indices: Vec<usize>, lr: f64) -> Self {
        let first = indices.iter().map(|&i| vec![0.0; slice.param(i).len()]).collect();
        let second = indices.iter().map(|&i| vec![0.0; slice.param(i).len()]).collect();
        Adam {
            lr,
            step: 0,
            first,
            second,
            indices,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Applies one update; `grads[j]` belongs to `indices()[j]`.
    pub fn step(&mut self, slice: &mut RashomonSlice, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (j, &pi) in self.indices.iter().enumerate() {
            let g = grads[j].values();
            let (m, v) = (&mut self.first[j], &mut self.second[j]);
            let w = slice.param_mut(pi).values_mut();
            for e in 0..g.len() {
                m[e] = ADAM_BETA1 * m[e] + (1.0 - ADAM_BETA1) * g[e];
                v[e] = ADAM_BETA2 * v[e] + (1.0 - ADAM_BETA2) * g[e] * g[e];
                let mh = m[e] / c1;
                let vh = v[e] / c2;
                w[e] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Result of one forward and backward pass.
#[derive(Debug)]
pub struct StepGrads {
    pub breakdown: LossBreakdown,
    /// Gradient for every slice parameter; `None` for frozen ones.
    pub grads: Vec<Option<Tensor>>,
    /// Peak activation bytes held during backward, counted from the start
    /// of the step.
    pub backward_peak_bytes: u64,
}

fn per_member_seed(step_seed: u64, m: usize) -> u64 {
    rng::derive(step_seed, &[m as u64])
}

/// Forward and backward over `members` on one batch.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    slice: &RashomonSlice,
    batch: &Batch,
    members: &[usize],
    cfg: &TrainConfig,
    alpha: f64,
    step_seed: u64,
    checkpoint: bool,
) -> Result<StepGrads> {
    let step_scope = meter::enter_scope("step");
    let out = (|| -> Result<(LossBreakdown, Vec<Option<Tensor>>, u64)> {
        let mut t = Tape::new();
        let bound = slice.bind(&mut t)?;
        let (total, breakdown) = build_objective(&mut t, slice, &bound, batch, members, cfg, alpha, Some(step_seed), checkpoint)?;
        let bw = meter::enter_scope("backward");
        let result = t.backward(total);
        let report = meter::exit_scope(bw).expect("balanced scope");
        result?;
        let grads = bound
            .iter()
            .zip(slice.params())
            .map(|(&v, p)| if p.trainable { t.take_grad(v) } else { Ok(None) })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((breakdown, grads, report.entry_bytes + report.peak_bytes))
    })();
    let step_report = meter::exit_scope(step_scope).expect("balanced scope");
    let (breakdown, grads, abs_peak) = out?;
    Ok(StepGrads {
        breakdown,
        grads,
        backward_peak_bytes: abs_peak.saturating_sub(step_report.entry_bytes),
    })
}

/// Records the objective over `members` on `t`. With `step_seed` set the
/// members run in training mode (adapter dropout on).
#[allow(clippy::too_many_arguments)]
fn build_objective(
    t: &mut Tape,
    slice: &RashomonSlice,
    bound: &[Var],
    batch: &Batch,
    members: &[usize],
    cfg: &TrainConfig,
    alpha: f64,
    step_seed: Option<u64>,
    checkpoint: bool,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::Argument {
            field: "batch".into(),
            detail: "empty batch".into(),
        });
    }
    let x = t.constant(batch.x.clone())?;
    let target = t.constant(batch.c.clone())?;
    let labels: Arc<[usize]> = batch.y.clone().into();
    let mut pr = Vec::with_capacity(members.len());
    let mut c = Vec::with_capacity(members.len());
    let mut reps = Vec::with_capacity(members.len());
    for &m in members {
        let seed = per_member_seed(step_seed.unwrap_or(0), m);
        let o = slice.slice_forward(t, bound, x, m, step_seed.is_some(), seed, checkpoint)?;
        pr.push(t.softmax_cross_entropy(o.class_logits, labels.clone())?);
        c.push(t.binary_cross_entropy(o.concept_probs, target)?);
        reps.push(if slice.spec().mode == Mode::C2y {
            t.softmax(o.class_logits)?
        } else {
            o.concept_probs
        });
    }
    let div = if members.len() >= 2 && slice.spec().mode != Mode::RandomInit {
        diversity_loss(t, &reps, cfg.similarity)?
    } else {
        Vec::new()
    };
    let total = total_loss(t, &pr, &c, &div, cfg.lambda, alpha)?;
    let read = |t: &Tape, vs: &[Var]| vs.iter().map(|&v| t.scalar(v)).collect::<Result<Vec<_>, _>>();
    let breakdown = LossBreakdown {
        per_model_pr: read(t, &pr)?,
        per_model_c: read(t, &c)?,
        per_model_div: read(t, &div)?,
        alpha,
        lambda: cfg.lambda,
        total: t.scalar(total)?,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite total loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}

/// The objective on `batch` in inference mode.
pub fn evaluate_objective(
    slice: &RashomonSlice,
    batch: &Batch,
    members: &[usize],
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let bound = slice.bind_frozen(&mut t)?;
    Ok(build_objective(&mut t, slice, &bound, batch, members, cfg, alpha, None, false)?.1)
}

/// One optimizer step. Returns the breakdown before the update and the
/// concept-head gradients for the α statistic.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    slice: &mut RashomonSlice,
    opt: &mut Adam,
    batch: &Batch,
    members: &[usize],
    cfg: &TrainConfig,
    alpha: f64,
    step_seed: u64,
) -> Result<(StepGrads, Vec<Tensor>)> {
    let mut sg = loss_and_grads(slice, batch, members, cfg, alpha, step_seed, cfg.checkpointing)?;
    let grads: Vec<Tensor> = opt
        .indices()
        .iter()
        .map(|&i| sg.grads[i].take().expect("trainable parameter has a gradient"))
        .collect();
    let heads: Vec<usize> = slice.head_indices();
    let head_grads: Vec<Tensor> = opt
        .indices()
        .iter()
        .zip(&grads)
        .filter(|(i, _)| heads.contains(i))
        .map(|(_, g)| g.clone())
        .collect();
    opt.step(slice, &grads);
    Ok((sg, head_grads))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub members: Vec<usize>,
    pub alpha: f64,
    pub train_total_mean: f64,
    pub last_step: LossBreakdown,
    pub val: LossBreakdown,
    pub val_task_accuracy: Vec<f64>,
    pub val_concept_accuracy: Vec<f64>,
    pub peak_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub alpha_history: Vec<f64>,
    pub best_val_total: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn peak_bytes(&self) -> u64 {
        self.log.iter().map(|r| r.peak_bytes).max().unwrap_or(0)
    }
}

/// Initialization and training seed of each random_init member.
pub fn member_seed(slice: &RashomonSlice, seed: u64, m: usize) -> u64 {
    slice
        .spec()
        .member_seeds
        .get(m)
        .copied()
        .unwrap_or_else(|| rng::derive(seed, &[m as u64]))
}

/// Trains `slice` on the dataset's train split with early stopping on the
/// validation objective, restoring the best weights. In random_init mode
/// each member is trained separately from its own seed.
pub fn train(
    slice: &mut RashomonSlice,
    data: &ConceptDataset,
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<TrainState>> {
    if data.indices(Split::Train).is_empty() || data.indices(Split::Val).is_empty() {
        return Err(Error::Argument {
            field: "splits".into(),
            detail: "train and validation splits must be non-empty".into(),
        });
    }
    if slice.spec().mode != cfg.mode {
        return Err(Error::config(
            "train.mode",
            format!("slice was built for {} but config asks for {}", slice.spec().mode.name(), cfg.mode.name()),
        ));
    }
    if slice.spec().mode == Mode::RandomInit {
        let mut states = Vec::with_capacity(slice.m());
        for m in 0..slice.m() {
            let s = member_seed(slice, seed, m);
            let sink: Option<&mut dyn Write> = match log {
                Some(ref mut w) => Some(&mut **w),
                None => None,
            };
            states.push(train_members(slice, data, cfg, s, &[m], sink)?);
        }
        Ok(states)
    } else {
        let members: Vec<usize> = (0..slice.m()).collect();
        Ok(vec![train_members(slice, data, cfg, seed, &members, log)?])
    }
}

fn train_members(
    slice: &mut RashomonSlice,
    data: &ConceptDataset,
    cfg: &TrainConfig,
    seed: u64,
    members: &[usize],
    mut log: Option<&mut dyn Write>,
) -> Result<TrainState> {
    let trainable: Vec<usize> = {
        let mut idx: Vec<usize> = members
            .iter()
            .flat_map(|&m| slice.model_param_indices(m))
            .filter(|&i| slice.params()[i].trainable)
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    };
    let mut opt = Adam::new(slice, trainable, cfg.learning_rate);
    let mut alpha = match cfg.alpha {
        AlphaUpdate::PerEpoch => 0.5,
        AlphaUpdate::Fixed(v) => v,
    };
    let val = data.split(Split::Val);
    let mut state = TrainState {
        best_val_total: f64::INFINITY,
        alpha_history: vec![alpha],
        ..TrainState::default()
    };
    let mut best = slice.snapshot();
    let mut order = data.indices(Split::Train).to_vec();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng::stream(seed, &[SHUFFLE, epoch as u64]));
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        let mut peak = 0u64;
        let mut last = None;
        let mut last_heads = Vec::new();
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.rows(idx);
            let step_seed = rng::derive(seed, &[STEP, epoch as u64, bi as u64]);
            let (sg, heads) = train_step(slice, &mut opt, &batch, members, cfg, alpha, step_seed)?;
            total_sum += sg.breakdown.total;
            steps += 1;
            peak = peak.max(sg.backward_peak_bytes);
            last = Some(sg.breakdown);
            last_heads = heads;
        }

        let val_b = evaluate_objective(slice, &val, members, cfg, alpha)?;
        let mut task = Vec::with_capacity(members.len());
        let mut concept = Vec::with_capacity(members.len());
        for &m in members {
            let pred = slice.predict_one(&val.x, m)?;
            task.push(metrics::accuracy(&pred.classes(), &val.y)?);
            concept.push(metrics::concept_accuracy(&pred.concept_probs, &val.c)?);
        }
        let record = EpochRecord {
            epoch,
            members: members.to_vec(),
            alpha,
            train_total_mean: total_sum / steps as f64,
            last_step: last.expect("at least one batch"),
            val: val_b.clone(),
            val_task_accuracy: task,
            val_concept_accuracy: concept,
            peak_bytes: peak,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(Error::io("training log"))?;
        }
        state.log.push(record);
        state.epoch = epoch;

        if val_b.total < state.best_val_total {
            state.best_val_total = val_b.total;
            state.best_epoch = epoch;
            state.epochs_since_improvement = 0;
            best = slice.snapshot();
        } else {
            state.epochs_since_improvement += 1;
        }

        if cfg.alpha == AlphaUpdate::PerEpoch {
            let views: Vec<&[f64]> = last_heads.iter().map(Tensor::values).collect();
            alpha = update_alpha(&views)?;
        }
        state.alpha_history.push(alpha);

        if state.epochs_since_improvement >= cfg.patience {
            state.stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    slice.set_values(&best);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_member_diversity_by_hand() {
        let mut t = Tape::new();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let reps: Vec<Var> = [[1.0, 0.0], [0.0, 1.0], [h, h]]
            .iter()
            .map(|r| t.constant(Tensor::new(&[1, 2], r.to_vec()).unwrap()).unwrap())
            .collect();
        let d = diversity_loss(&mut t, &reps, SimilarityMode::PerSample).unwrap();
        let v: Vec<f64> = d.iter().map(|&x| t.scalar(x).unwrap()).collect();
        // 1 - (0 + √2/2)/2 for the axis vectors, 1 - √2/2 for the diagonal
        assert!((v[0] - 0.646_446_609_406_726_27).abs() < 1e-15);
        assert!((v[1] - 0.646_446_609_406_726_27).abs() < 1e-15);
        assert!((v[2] - 0.292_893_218_813_452_43).abs() < 1e-15);
    }

    #[test]
    fn identical_and_orthogonal_members() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 2], vec![0.3, 0.9, 0.5, 0.1]).unwrap()).unwrap();
        let d = diversity_loss(&mut t, &[a, a, a], SimilarityMode::PerSample).unwrap();
        for v in d {
            assert!(t.scalar(v).unwrap().abs() < 1e-15);
        }
        let x = t.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let y = t.constant(Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap()).unwrap();
        let d = diversity_loss(&mut t, &[x, y], SimilarityMode::PerSample).unwrap();
        assert_eq!(t.scalar(d[0]).unwrap(), 1.0);
        assert_eq!(t.scalar(d[1]).unwrap(), 1.0);
        assert!(diversity_loss(&mut t, &[x], SimilarityMode::PerSample).is_err());
    }

    #[test]
    fn objective_worked_example() {
        let mut t = Tape::new();
        let mut leaf = |v: f64| t.constant(Tensor::scalar(v)).unwrap();
        let pr = [leaf(0.2), leaf(0.5)];
        let c = [leaf(0.1), leaf(0.3)];
        let div = [leaf(0.4), leaf(0.6)];
        let total = total_loss(&mut t, &pr, &c, &div, 1.0, 0.5).unwrap();
        assert!((t.scalar(total).unwrap() - 0.55).abs() < 1e-15);
        assert!((LossBreakdown::formula(&[0.2, 0.5], &[0.1, 0.3], &[0.4, 0.6], 1.0, 0.5) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn alpha_statistic() {
        assert_eq!(update_alpha(&[&[0.0, 0.0], &[0.0]]).unwrap(), 0.5);
        let a = update_alpha(&[&[0.4, -0.4], &[0.4]]).unwrap();
        assert!((a - 0.598_687_660_112_452).abs() < 1e-12);
        assert!(update_alpha(&[]).is_err());
    }
}
