//! Reverse-mode tape with model-axis checkpoint regions.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order. A checkpoint region is a contiguous run of nodes; once
//! its body returns, every intermediate value inside it is freed and only
//! the declared inputs and the region outputs stay resident. During backward
//! the region is replayed from its recorded ops just before its last node is
//! differentiated, its outputs are re-checked bit-for-bit, and the
//! intermediates are freed again once the region's first node is done.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::meter::MemClass;
use super::ops::{self, Input, OpKind};
use super::{Buffer, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

struct Node {
    kind: Option<OpKind>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Option<Buffer>,
    aux: usize,
    requires_grad: bool,
    grad: Option<Buffer>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.kind.is_none()
    }
}

struct Region {
    start: usize,
    end: usize,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    seed: u64,
    dropped: bool,
}

/// Public view of a recorded checkpoint region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionRecord {
    pub id: usize,
    pub inputs: Vec<Var>,
    pub outputs: Vec<Var>,
    pub seed: u64,
    pub node_count: usize,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    regions: Vec<Region>,
    active_region: Option<usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            regions: Vec::new(),
            active_region: None,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            tape: self.id,
            idx: idx as u32,
        }
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index())
    }

    fn check_live(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Records a leaf. The tensor keeps its memory class, so parameter copies
    /// stay off the activation ledger.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        self.check_live()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        let Tensor { shape, buf } = value;
        self.nodes.push(Node {
            kind: None,
            inputs: Vec::new(),
            shape,
            value: Some(buf),
            aux: 0,
            requires_grad,
            grad: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    fn resident(&self, idx: usize) -> Result<Input<'_>, TensorError> {
        let n = &self.nodes[idx];
        let buf = n.value.as_ref().ok_or(TensorError::NotResident(idx))?;
        Ok(Input {
            shape: &n.shape,
            data: buf.as_slice(),
        })
    }

    /// Applies one primitive and records it.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        self.check_live()?;
        let idxs = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(r) = self.active_region {
            let region = &self.regions[r];
            if let Some(&bad) = idxs
                .iter()
                .find(|&&i| i < region.start && !region.inputs.contains(&i))
            {
                return Err(TensorError::UndeclaredCapture(bad));
            }
        }
        let views = idxs
            .iter()
            .map(|&i| self.resident(i))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = ops::infer_shape(&kind, &views)?;
        let (data, aux) = ops::forward(&kind, &views, &shape);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        drop(views);
        self.nodes.push(Node {
            kind: Some(kind),
            inputs: idxs,
            shape,
            value: Some(Buffer::new(data, MemClass::Activation)),
            aux,
            requires_grad,
            grad: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MatMul { transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MatMul { transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MulScalar(s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Softmax, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn max_over_models(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MaxOverModels, xs)
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var, flatten: bool) -> Result<Var, TensorError> {
        self.forward_op(OpKind::CosineSimilarity { flatten }, &[a, b])
    }

    pub fn binary_cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::BinaryCrossEntropy, &[pred, target])
    }

    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<[usize]>,
    ) -> Result<Var, TensorError> {
        self.forward_op(OpKind::SoftmaxCrossEntropy { labels }, &[logits])
    }

    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Dropout { rate, seed }, &[a])
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].shape)
    }

    pub fn values(&self, v: Var) -> Result<&[f64], TensorError> {
        let i = self.check(v)?;
        Ok(self.resident(i)?.data)
    }

    /// Copy of a node's value (charged as an activation).
    pub fn value(&self, v: Var) -> Result<Tensor, TensorError> {
        let i = self.check(v)?;
        let inp = self.resident(i)?;
        Tensor::new(inp.shape, inp.data.to_vec())
    }

    pub fn scalar(&self, v: Var) -> Result<f64, TensorError> {
        let d = self.values(v)?;
        if d.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[v.index()].shape.clone()));
        }
        Ok(d[0])
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool, TensorError> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>, TensorError> {
        let i = self.check(v)?;
        Ok(self.nodes[i].grad.as_ref().map(Buffer::as_slice))
    }

    /// Moves a leaf gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Result<Option<Tensor>, TensorError> {
        let i = self.check(v)?;
        let shape = self.nodes[i].shape.clone();
        Ok(self.nodes[i]
            .grad
            .take()
            .map(|b| Tensor::from_buffer(shape, b)))
    }

    /// Whether the value of `v` is currently held in memory.
    pub fn is_resident(&self, v: Var) -> Result<bool, TensorError> {
        let i = self.check(v)?;
        Ok(self.nodes[i].value.is_some())
    }

    pub fn regions(&self) -> Vec<RegionRecord> {
        self.regions
            .iter()
            .enumerate()
            .map(|(id, r)| RegionRecord {
                id,
                inputs: r.inputs.iter().map(|&i| self.var(i)).collect(),
                outputs: r.outputs.iter().map(|&i| self.var(i)).collect(),
                seed: r.seed,
                node_count: r.end - r.start,
            })
            .collect()
    }

    /// Smallest distance of any recorded relu input to its kink, or of any
    /// max-over-models winner to the runner-up. Finite-difference checks are
    /// only meaningful when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for n in &self.nodes {
            match n.kind {
                Some(OpKind::Relu) => {
                    if let Some(b) = self.nodes[n.inputs[0]].value.as_ref() {
                        for v in b.as_slice() {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                Some(OpKind::MaxOverModels) if n.inputs.len() > 1 => {
                    let mut vals: Vec<f64> = n
                        .inputs
                        .iter()
                        .filter_map(|&i| self.nodes[i].value.as_ref().map(|b| b.as_slice()[0]))
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals.len() > 1 {
                        margin = margin.min(vals[0] - vals[1]);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Runs `body` as a checkpoint region.
    ///
    /// The body may only read the declared `inputs` and nodes it creates
    /// itself; any other capture is rejected. Every op inside must be a pure
    /// function of its inputs, with randomness derived from `seed`.
    pub fn checkpoint<E, F>(&mut self, inputs: &[Var], seed: u64, body: F) -> Result<Vec<Var>, E>
    where
        E: From<TensorError>,
        F: FnOnce(&mut Tape, &[Var], u64) -> Result<Vec<Var>, E>,
    {
        self.check_live()?;
        if self.active_region.is_some() {
            return Err(TensorError::NestedRegion.into());
        }
        let input_idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let id = self.regions.len();
        let start = self.nodes.len();
        self.regions.push(Region {
            start,
            end: start,
            inputs: input_idx,
            outputs: Vec::new(),
            seed,
            dropped: false,
        });
        self.active_region = Some(id);
        let result = body(self, inputs, seed);
        self.active_region = None;
        let end = self.nodes.len();
        self.regions[id].end = end;
        let outputs = result?;
        let mut out_idx = Vec::with_capacity(outputs.len());
        for &o in &outputs {
            let i = self.check(o)?;
            if i < start {
                return Err(TensorError::RegionOutput(i).into());
            }
            out_idx.push(i);
        }
        self.regions[id].outputs = out_idx;
        self.drop_region_intermediates(id);
        self.regions[id].dropped = true;
        Ok(outputs)
    }

    fn drop_region_intermediates(&mut self, id: usize) {
        let (start, end) = (self.regions[id].start, self.regions[id].end);
        for j in start..end {
            if self.nodes[j].is_leaf() || self.regions[id].outputs.contains(&j) {
                continue;
            }
            self.nodes[j].value = None;
        }
    }

    /// Recomputes a region's intermediates from its recorded ops and checks
    /// the outputs against the retained values.
    fn replay_region(&mut self, id: usize) -> Result<(), TensorError> {
        let (start, end) = (self.regions[id].start, self.regions[id].end);
        for j in start..end {
            let Some(kind) = self.nodes[j].kind.as_ref() else {
                continue;
            };
            let views = self.nodes[j]
                .inputs
                .iter()
                .map(|&i| self.resident(i))
                .collect::<Result<Vec<_>, _>>()?;
            let (data, _) = ops::forward(kind, &views, &self.nodes[j].shape);
            drop(views);
            match &self.nodes[j].value {
                Some(kept) => {
                    let same = kept
                        .as_slice()
                        .iter()
                        .zip(&data)
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(TensorError::ReplayMismatch { region: id });
                    }
                }
                None => self.nodes[j].value = Some(Buffer::new(data, MemClass::Activation)),
            }
        }
        Ok(())
    }

    /// Populates gradients of every `requires_grad` leaf with respect to the
    /// scalar `loss`. Leaves the loss does not depend on get zeros. The tape
    /// cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check_live()?;
        let li = self.check(loss)?;
        if self.nodes[li].shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[li].shape.clone()));
        }
        self.consumed = true;

        let mut region_end = vec![None; self.nodes.len()];
        let mut region_start = vec![None; self.nodes.len()];
        for (id, r) in self.regions.iter().enumerate() {
            if r.dropped && r.end > r.start {
                region_end[r.end - 1] = Some(id);
                region_start[r.start] = Some(id);
            }
        }

        let mut grads: Vec<Option<Buffer>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Buffer::new(vec![1.0], MemClass::Activation));
        }

        for i in (0..=li).rev() {
            if let Some(id) = region_end[i] {
                self.replay_region(id)?;
            }
            if let Some(g) = grads[i].take() {
                let node = &self.nodes[i];
                if node.is_leaf() {
                    let class = node.value.as_ref().map_or(MemClass::Parameter, Buffer::class);
                    let g = if class == g.class() {
                        g
                    } else {
                        Buffer::new(g.as_slice().to_vec(), class)
                    };
                    self.nodes[i].grad = Some(g);
                } else {
                    let kind = node.kind.as_ref().expect("non-leaf");
                    let views = node
                        .inputs
                        .iter()
                        .map(|&k| self.resident(k))
                        .collect::<Result<Vec<_>, _>>()?;
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|&k| self.nodes[k].requires_grad)
                        .collect();
                    let out = node.value.as_ref().ok_or(TensorError::NotResident(i))?;
                    let input_grads =
                        ops::backward(kind, &views, out.as_slice(), node.aux, g.as_slice(), &needs);
                    drop(views);
                    let inputs = self.nodes[i].inputs.clone();
                    for (k, ig) in inputs.into_iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match &mut grads[k] {
                            Some(acc) => {
                                for (a, b) in acc.as_mut_slice().iter_mut().zip(&ig) {
                                    *a += b;
                                }
                            }
                            slot @ None => {
                                let class = if self.nodes[k].is_leaf() {
                                    self.nodes[k]
                                        .value
                                        .as_ref()
                                        .map_or(MemClass::Parameter, Buffer::class)
                                } else {
                                    MemClass::Activation
                                };
                                *slot = Some(Buffer::new(ig, class));
                            }
                        }
                    }
                }
            }
            if let Some(id) = region_start[i] {
                self.drop_region_intermediates(id);
            }
        }

        for n in self.nodes.iter_mut() {
            if n.is_leaf() && n.requires_grad && n.grad.is_none() {
                let len = n.shape.iter().product();
                let class = n.value.as_ref().map_or(MemClass::Parameter, Buffer::class);
                n.grad = Some(Buffer::new(vec![0.0; len], class));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::meter;

    #[test]
    fn square_has_grad_six_at_three() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        // x·x as a 1×1 by 1×1 product
        let y = t.matmul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0)).unwrap();
        let z = t.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = t.mul_scalar(x, 4.0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[4.0]);
        assert_eq!(t.grad(z).unwrap().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_twice_is_consumed() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let y = t.mul_scalar(x, 2.0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.backward(y), Err(TensorError::TapeConsumed));
        assert_eq!(t.mul_scalar(x, 1.0), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0)).unwrap();
        let _ = b.param(Tensor::scalar(1.0)).unwrap();
        assert_eq!(b.relu(x), Err(TensorError::ForeignVar));
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut t = Tape::new();
        let bad = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        assert!(matches!(t.leaf(bad, true), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn max_routes_to_argmax_only() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(1.0)).unwrap();
        let b = t.param(Tensor::scalar(3.0)).unwrap();
        let c = t.param(Tensor::scalar(3.0)).unwrap();
        let m = t.max_over_models(&[a, b, c]).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).unwrap().unwrap(), &[0.0]);
        assert_eq!(t.grad(b).unwrap().unwrap(), &[1.0]);
        assert_eq!(t.grad(c).unwrap().unwrap(), &[0.0]);
    }

    fn two_layer(t: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var, TensorError> {
        let h = t.matmul_t(x, w1)?;
        let h = t.relu(h)?;
        let h = t.dropout(h, 0.1, 7)?;
        let o = t.matmul_t(h, w2)?;
        t.sigmoid(o)
    }

    fn leaves(t: &mut Tape) -> (Var, Var, Var) {
        let x = t
            .constant(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]).unwrap())
            .unwrap();
        let w1 = t
            .param(
                Tensor::new(&[4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            )
            .unwrap();
        let w2 = t
            .param(Tensor::new(&[2, 4], (0..8).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap())
            .unwrap();
        (x, w1, w2)
    }

    #[test]
    fn checkpointed_region_matches_plain_run() {
        let mut plain = Tape::new();
        let (x, w1, w2) = leaves(&mut plain);
        let o = two_layer(&mut plain, x, w1, w2).unwrap();
        let plain_out = plain.value(o).unwrap();
        let l = plain.mean(o).unwrap();
        plain.backward(l).unwrap();

        let mut ck = Tape::new();
        let (cx, cw1, cw2) = leaves(&mut ck);
        let outs = ck
            .checkpoint::<TensorError, _>(&[cx, cw1, cw2], 7, |t, ins, _| {
                Ok(vec![two_layer(t, ins[0], ins[1], ins[2])?])
            })
            .unwrap();
        assert!(ck.value(outs[0]).unwrap().bit_eq(&plain_out));
        let l2 = ck.mean(outs[0]).unwrap();
        ck.backward(l2).unwrap();
        for (v, cv) in [(w1, cw1), (w2, cw2)] {
            let a = plain.grad(v).unwrap().unwrap();
            let b = ck.grad(cv).unwrap().unwrap();
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn region_frees_intermediates_and_records_seed() {
        let mut t = Tape::new();
        let (x, w1, w2) = leaves(&mut t);
        let before = t.len();
        let outs = t
            .checkpoint::<TensorError, _>(&[x, w1, w2], 7, |t, ins, _| {
                Ok(vec![two_layer(t, ins[0], ins[1], ins[2])?])
            })
            .unwrap();
        for i in before..t.len() - 1 {
            assert!(!t.is_resident(t.var(i)).unwrap());
        }
        assert!(t.is_resident(outs[0]).unwrap());
        let rec = &t.regions()[0];
        assert_eq!(rec.seed, 7);
        assert_eq!(rec.inputs, vec![x, w1, w2]);
    }

    #[test]
    fn undeclared_capture_rejected() {
        let mut t = Tape::new();
        let (x, w1, w2) = leaves(&mut t);
        let err = t
            .checkpoint::<TensorError, _>(&[x, w1], 0, |t, ins, _| {
                Ok(vec![two_layer(t, ins[0], ins[1], w2)?])
            })
            .unwrap_err();
        assert_eq!(err, TensorError::UndeclaredCapture(w2.index()));
    }

    #[test]
    fn nested_region_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let err = t
            .checkpoint::<TensorError, _>(&[x], 0, |t, ins, _| {
                t.checkpoint::<TensorError, _>(ins, 1, |t, ins, _| Ok(vec![t.relu(ins[0])?]))
            })
            .unwrap_err();
        assert_eq!(err, TensorError::NestedRegion);
    }

    #[test]
    fn backward_unwinds_activation_meter() {
        let start = meter::snapshot().current_live_bytes;
        {
            let mut t = Tape::new();
            let (x, w1, w2) = leaves(&mut t);
            let outs = t
                .checkpoint::<TensorError, _>(&[x, w1, w2], 3, |t, ins, _| {
                    Ok(vec![two_layer(t, ins[0], ins[1], ins[2])?])
                })
                .unwrap();
            let l = t.mean(outs[0]).unwrap();
            t.backward(l).unwrap();
        }
        assert_eq!(meter::snapshot().current_live_bytes, start);
    }
}
