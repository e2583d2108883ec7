//! Reverse-mode autodiff over a per-example tape.
//!
//! A `Tape` records one forward pass as a flat list of nodes; `backward` walks
//! it in reverse and accumulates gradients for every `ParamSet` leaf it
//! touched. Tapes are cheap, single-threaded values: batch parallelism builds
//! one tape per example and sums the per-example gradients afterwards.
//!
//! Values are column vectors `(n,1)`, matrices `(n,m)` and scalars `(1,1)`;
//! softmaxes subtract the max before exponentiating.

use crate::tensor::Tensor;

/// Handle to a trainable tensor inside a [`ParamSet`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors. Registration order is the canonical
/// order for checkpoints and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new(), names: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .zip(self.names.iter())
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator aligned with a `ParamSet`.
#[derive(Clone, Debug)]
pub struct Grads {
    pub by_param: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads {
            by_param: params.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.by_param.iter_mut() {
            for v in t.as_mut_slice() {
                *v *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.by_param
            .iter()
            .map(|t| t.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

// Some payload fields only drive forward evaluation at construction time and
// are not re-read by backward; they stay for shape/provenance.
#[allow(dead_code)]
#[derive(Debug)]
enum Op {
    /// Trainable leaf; its value lives in the `ParamSet`.
    Leaf(ParamId),
    /// Constant input (no gradient).
    Value,
    /// Row `row` of a matrix node, as a column vector.
    Row { table: NodeId, row: usize },
    /// m (r×c) · v (c×1)
    MatVec { m: NodeId, v: NodeId },
    /// mᵀ (c×r) · v (r×1)
    MatTVec { m: NodeId, v: NodeId },
    /// Column-stack of same-length vectors.
    StackCols { cols: Vec<NodeId> },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// 1 - v, elementwise.
    OneMinus { v: NodeId },
    Scale { v: NodeId, c: f64 },
    AddConst { v: NodeId, c: f64 },
    Tanh { v: NodeId },
    Sigmoid { v: NodeId },
    Softmax { v: NodeId },
    LogSoftmax { v: NodeId },
    /// Softmax restricted to `mask`; disallowed entries get probability 0.
    MaskedSoftmax { v: NodeId, mask: Vec<bool> },
    /// Renormalize a nonnegative vector over `mask`: y = mask∘v / Σ mask∘v.
    MaskProbs { v: NodeId, mask: Vec<bool> },
    Dot { a: NodeId, b: NodeId },
    Pick { v: NodeId, idx: usize },
    /// Elementwise natural log, floored at 1e-300.
    Ln { v: NodeId },
    Sum { v: NodeId },
    /// Elementwise sum of same-shape nodes.
    AddN { vs: Vec<NodeId> },
    /// Elementwise product with a constant mask (dropout).
    MulMask { v: NodeId, mask: Vec<f64> },
    StopGrad { v: NodeId },
    /// gate·a + (1-gate)·b with a scalar gate.
    Mixture { gate: NodeId, a: NodeId, b: NodeId },
    /// v · s[idx] for a scalar read out of vector node `s`.
    ScaleEntry { v: NodeId, s: NodeId, idx: usize },
    /// Copy distribution over the vocabulary: for utterance i with weight
    /// utt_w[i] and within-utterance weights tok_ws[i], add
    /// utt_w[i]·tok_ws[i][j] onto vocab slot ids[i][j].
    CopyDist { utt_w: NodeId, tok_ws: Vec<NodeId>, ids: Vec<Vec<u32>>, vocab: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    leaf_cache: Vec<Option<NodeId>>,
}

const LN_FLOOR: f64 = 1e-300;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::with_capacity(1024), leaf_cache: vec![None; params.len()] }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Leaf(pid) => self.params.get(pid),
            _ => &self.nodes[id.0].value,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node for a parameter (cached, so repeated use shares one node).
    pub fn leaf(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.leaf_cache[id.0] {
            return n;
        }
        let n = self.push(Op::Leaf(id), Tensor::zeros(0, 0));
        self.leaf_cache[id.0] = Some(n);
        n
    }

    /// Constant tensor (no gradient).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Value, t)
    }

    pub fn scalar_const(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    pub fn row(&mut self, table: NodeId, row: usize) -> NodeId {
        let t = self.value(table);
        let v = Tensor::vector(t.row_slice(row).to_vec());
        self.push(Op::Row { table, row }, v)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let out = self.value(m).matvec(self.value(v));
        self.push(Op::MatVec { m, v }, out)
    }

    pub fn mat_t_vec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let out = self.value(m).mat_t_vec(self.value(v));
        self.push(Op::MatTVec { m, v }, out)
    }

    pub fn stack_cols(&mut self, cols: Vec<NodeId>) -> NodeId {
        assert!(!cols.is_empty(), "stack_cols needs at least one column");
        let n = self.value(cols[0]).rows();
        let mut data = vec![0.0; n * cols.len()];
        for (j, &c) in cols.iter().enumerate() {
            let cv = self.value(c);
            assert_eq!(cv.rows(), n, "stack_cols length mismatch");
            for i in 0..n {
                data[i * cols.len() + j] = cv.as_slice()[i];
            }
        }
        let t = Tensor::from_vec(n, cols.len(), data);
        self.push(Op::StackCols { cols }, t)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).as_slice().to_vec();
        data.extend_from_slice(self.value(b).as_slice());
        let t = Tensor::vector(data);
        self.push(Op::Concat { a, b }, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Add { a, b }, t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mul { a, b }, t)
    }

    pub fn one_minus(&mut self, v: NodeId) -> NodeId {
        let t = self.map_unary(v, |x| 1.0 - x);
        self.push(Op::OneMinus { v }, t)
    }

    pub fn scale(&mut self, v: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(v, |x| x * c);
        self.push(Op::Scale { v, c }, t)
    }

    pub fn add_const(&mut self, v: NodeId, c: f64) -> NodeId {
        let t = self.map_unary(v, |x| x + c);
        self.push(Op::AddConst { v, c }, t)
    }

    pub fn tanh(&mut self, v: NodeId) -> NodeId {
        let t = self.map_unary(v, f64::tanh);
        self.push(Op::Tanh { v }, t)
    }

    pub fn sigmoid(&mut self, v: NodeId) -> NodeId {
        let t = self.map_unary(v, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid { v }, t)
    }

    pub fn softmax(&mut self, v: NodeId) -> NodeId {
        let t = Tensor::vector(crate::tensor::softmax(self.value(v).as_slice()));
        self.push(Op::Softmax { v }, t)
    }

    pub fn log_softmax(&mut self, v: NodeId) -> NodeId {
        let xs = self.value(v).as_slice();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xs.iter().map(|x| (x - m).exp()).sum();
        let lz = z.ln() + m;
        let t = Tensor::vector(xs.iter().map(|x| x - lz).collect());
        self.push(Op::LogSoftmax { v }, t)
    }

    pub fn masked_softmax(&mut self, v: NodeId, mask: Vec<bool>) -> NodeId {
        let xs = self.value(v).as_slice();
        assert_eq!(xs.len(), mask.len(), "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "masked_softmax with empty mask");
        let m = xs
            .iter()
            .zip(mask.iter())
            .filter(|(_, &ok)| ok)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs
            .iter()
            .zip(mask.iter())
            .map(|(x, &ok)| if ok { (x - m).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        let t = Tensor::vector(exps.iter().map(|e| e / z).collect());
        self.push(Op::MaskedSoftmax { v, mask }, t)
    }

    pub fn mask_probs(&mut self, v: NodeId, mask: Vec<bool>) -> NodeId {
        let xs = self.value(v).as_slice();
        assert_eq!(xs.len(), mask.len(), "mask length mismatch");
        let masked: Vec<f64> =
            xs.iter().zip(mask.iter()).map(|(x, &ok)| if ok { *x } else { 0.0 }).collect();
        let s: f64 = masked.iter().sum();
        assert!(s > 0.0, "mask_probs over all-zero mass");
        let t = Tensor::vector(masked.iter().map(|x| x / s).collect());
        self.push(Op::MaskProbs { v, mask }, t)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "dot shape mismatch");
        let s: f64 = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot { a, b }, Tensor::scalar(s))
    }

    pub fn pick(&mut self, v: NodeId, idx: usize) -> NodeId {
        let x = self.value(v).as_slice()[idx];
        self.push(Op::Pick { v, idx }, Tensor::scalar(x))
    }

    pub fn ln(&mut self, v: NodeId) -> NodeId {
        let t = self.map_unary(v, |x| x.max(LN_FLOOR).ln());
        self.push(Op::Ln { v }, t)
    }

    pub fn sum(&mut self, v: NodeId) -> NodeId {
        let s: f64 = self.value(v).as_slice().iter().sum();
        self.push(Op::Sum { v }, Tensor::scalar(s))
    }

    pub fn add_n(&mut self, vs: Vec<NodeId>) -> NodeId {
        assert!(!vs.is_empty(), "add_n needs at least one node");
        let first = self.value(vs[0]);
        let (r, c) = first.shape();
        let mut data = vec![0.0; r * c];
        for &v in &vs {
            let t = self.value(v);
            assert_eq!(t.shape(), (r, c), "add_n shape mismatch");
            for (d, x) in data.iter_mut().zip(t.as_slice()) {
                *d += x;
            }
        }
        self.push(Op::AddN { vs }, Tensor::from_vec(r, c, data))
    }

    pub fn mul_mask(&mut self, v: NodeId, mask: Vec<f64>) -> NodeId {
        let xs = self.value(v).as_slice();
        assert_eq!(xs.len(), mask.len(), "mul_mask length mismatch");
        let t = Tensor::from_vec(
            self.value(v).rows(),
            self.value(v).cols(),
            xs.iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
        );
        self.push(Op::MulMask { v, mask }, t)
    }

    pub fn stop_grad(&mut self, v: NodeId) -> NodeId {
        let t = self.value(v).clone();
        self.push(Op::StopGrad { v }, t)
    }

    pub fn mixture(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let g = self.value(gate).item();
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mixture shape mismatch");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| g * x + (1.0 - g) * y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mixture { gate, a, b }, t)
    }

    pub fn scale_entry(&mut self, v: NodeId, s: NodeId, idx: usize) -> NodeId {
        let c = self.value(s).as_slice()[idx];
        let t = self.map_unary(v, |x| x * c);
        self.push(Op::ScaleEntry { v, s, idx }, t)
    }

    pub fn copy_dist(
        &mut self,
        utt_w: NodeId,
        tok_ws: Vec<NodeId>,
        ids: Vec<Vec<u32>>,
        vocab: usize,
    ) -> NodeId {
        assert_eq!(tok_ws.len(), ids.len(), "copy_dist arity mismatch");
        let mut data = vec![0.0; vocab];
        let uw = self.value(utt_w).as_slice().to_vec();
        for (i, (&tw, row)) in tok_ws.iter().zip(ids.iter()).enumerate() {
            let ws = self.value(tw).as_slice();
            assert_eq!(ws.len(), row.len(), "copy_dist token arity mismatch");
            for (w, &id) in ws.iter().zip(row.iter()) {
                data[id as usize] += uw[i] * w;
            }
        }
        self.push(Op::CopyDist { utt_w, tok_ws, ids, vocab }, Tensor::vector(data))
    }

    /// Convenience: W·x + b from parameter ids.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let wl = self.leaf(w);
        let bl = self.leaf(b);
        let wx = self.matvec(wl, x);
        self.add(wx, bl)
    }

    fn map_unary(&self, v: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(v);
        Tensor::from_vec(t.rows(), t.cols(), t.as_slice().iter().map(|x| f(*x)).collect())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Backpropagate from scalar node `loss`; returns gradients summed per
    /// parameter for every parameter this tape touched.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf(_) | Op::Value => {
                    grads[idx] = Some(g); // keep for extraction
                }
                Op::Row { table, row } => {
                    let t = self.value(*table);
                    let acc = self.grad_slot(&mut grads, *table, t.shape());
                    let cols = t.cols();
                    for (j, x) in g.as_slice().iter().enumerate() {
                        acc.as_mut_slice()[row * cols + j] += x;
                    }
                }
                Op::MatVec { m, v } => {
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    {
                        let gm = self.grad_slot(&mut grads, *m, mv.shape());
                        for r in 0..mv.rows() {
                            let gr = g.as_slice()[r];
                            let row = &mut gm.as_mut_slice()[r * mv.cols()..(r + 1) * mv.cols()];
                            for (o, x) in row.iter_mut().zip(vv.as_slice()) {
                                *o += gr * x;
                            }
                        }
                    }
                    let gv = self.grad_slot(&mut grads, *v, vv.shape());
                    for r in 0..mv.rows() {
                        let gr = g.as_slice()[r];
                        let row = mv.row_slice(r);
                        for (o, x) in gv.as_mut_slice().iter_mut().zip(row) {
                            *o += gr * x;
                        }
                    }
                }
                Op::MatTVec { m, v } => {
                    // out = mᵀ v; ∂m[r,c] += v[r]·g[c]; ∂v[r] += Σ_c m[r,c]·g[c]
                    let (mv, vv) = (self.value(*m), self.value(*v));
                    {
                        let gm = self.grad_slot(&mut grads, *m, mv.shape());
                        for r in 0..mv.rows() {
                            let vr = vv.as_slice()[r];
                            let row = &mut gm.as_mut_slice()[r * mv.cols()..(r + 1) * mv.cols()];
                            for (o, gc) in row.iter_mut().zip(g.as_slice()) {
                                *o += vr * gc;
                            }
                        }
                    }
                    let gv = self.grad_slot(&mut grads, *v, vv.shape());
                    for r in 0..mv.rows() {
                        let row = mv.row_slice(r);
                        let mut acc = 0.0;
                        for (x, gc) in row.iter().zip(g.as_slice()) {
                            acc += x * gc;
                        }
                        gv.as_mut_slice()[r] += acc;
                    }
                }
                Op::StackCols { cols } => {
                    let k = cols.len();
                    for (j, &c) in cols.iter().enumerate() {
                        let shape = self.value(c).shape();
                        let gc = self.grad_slot(&mut grads, c, shape);
                        for i in 0..shape.0 {
                            gc.as_mut_slice()[i] += g.as_slice()[i * k + j];
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    {
                        let ga = self.grad_slot(&mut grads, *a, self.value(*a).shape());
                        for (o, x) in ga.as_mut_slice().iter_mut().zip(&g.as_slice()[..na]) {
                            *o += x;
                        }
                    }
                    let gb = self.grad_slot(&mut grads, *b, self.value(*b).shape());
                    for (o, x) in gb.as_mut_slice().iter_mut().zip(&g.as_slice()[na..]) {
                        *o += x;
                    }
                }
                Op::Add { a, b } => {
                    self.bump(&mut grads, *a, g.as_slice(), |x, _| x);
                    self.bump(&mut grads, *b, g.as_slice(), |x, _| x);
                }
                Op::Mul { a, b } => {
                    let vb = self.value(*b).as_slice().to_vec();
                    let va = self.value(*a).as_slice().to_vec();
                    self.bump_zip(&mut grads, *a, g.as_slice(), &vb, |gx, y| gx * y);
                    self.bump_zip(&mut grads, *b, g.as_slice(), &va, |gx, y| gx * y);
                }
                Op::OneMinus { v } => self.bump(&mut grads, *v, g.as_slice(), |x, _| -x),
                Op::Scale { v, c } => {
                    let c = *c;
                    self.bump(&mut grads, *v, g.as_slice(), move |x, _| x * c)
                }
                Op::AddConst { v, .. } => self.bump(&mut grads, *v, g.as_slice(), |x, _| x),
                Op::Tanh { v } => {
                    let y = self.nodes[idx].value.as_slice().to_vec();
                    self.bump_zip(&mut grads, *v, g.as_slice(), &y, |gx, t| gx * (1.0 - t * t));
                }
                Op::Sigmoid { v } => {
                    let y = self.nodes[idx].value.as_slice().to_vec();
                    self.bump_zip(&mut grads, *v, g.as_slice(), &y, |gx, s| gx * s * (1.0 - s));
                }
                Op::Softmax { v } | Op::MaskedSoftmax { v, .. } => {
                    // ∂x_i = y_i (g_i - Σ_j g_j y_j)
                    let y = self.nodes[idx].value.as_slice();
                    let dot: f64 = y.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                    let gv = self.grad_slot(&mut grads, *v, self.value(*v).shape());
                    for ((o, yi), gi) in gv.as_mut_slice().iter_mut().zip(y).zip(g.as_slice()) {
                        *o += yi * (gi - dot);
                    }
                }
                Op::LogSoftmax { v } => {
                    // ∂x_i = g_i - softmax(x)_i Σ_j g_j
                    let y = self.nodes[idx].value.as_slice();
                    let gs: f64 = g.as_slice().iter().sum();
                    let gv = self.grad_slot(&mut grads, *v, self.value(*v).shape());
                    for ((o, ly), gi) in gv.as_mut_slice().iter_mut().zip(y).zip(g.as_slice()) {
                        *o += gi - ly.exp() * gs;
                    }
                }
                Op::MaskProbs { v, mask } => {
                    let xs = self.value(*v).as_slice();
                    let s: f64 = xs
                        .iter()
                        .zip(mask.iter())
                        .filter(|(_, &ok)| ok)
                        .map(|(x, _)| *x)
                        .sum();
                    let y = self.nodes[idx].value.as_slice();
                    let dot: f64 = y.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
                    let gv = self.grad_slot(&mut grads, *v, self.value(*v).shape());
                    for i in 0..xs.len() {
                        if mask[i] {
                            gv.as_mut_slice()[i] += (g.as_slice()[i] - dot) / s;
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let gs = g.item();
                    let vb = self.value(*b).as_slice().to_vec();
                    let va = self.value(*a).as_slice().to_vec();
                    self.bump_zip_scalar(&mut grads, *a, gs, &vb);
                    self.bump_zip_scalar(&mut grads, *b, gs, &va);
                }
                Op::Pick { v, idx: i } => {
                    let gv = self.grad_slot(&mut grads, *v, self.value(*v).shape());
                    gv.as_mut_slice()[*i] += g.item();
                }
                Op::Ln { v } => {
                    let x = self.value(*v).as_slice().to_vec();
                    self.bump_zip(&mut grads, *v, g.as_slice(), &x, |gx, xi| {
                        gx / xi.max(LN_FLOOR)
                    });
                }
                Op::Sum { v } => {
                    let gs = g.item();
                    self.bump(&mut grads, *v, &vec![gs; self.value(*v).len()], |x, _| x);
                }
                Op::AddN { vs } => {
                    for &v in vs {
                        self.bump(&mut grads, v, g.as_slice(), |x, _| x);
                    }
                }
                Op::MulMask { v, mask } => {
                    let m = mask.clone();
                    self.bump_zip(&mut grads, *v, g.as_slice(), &m, |gx, mi| gx * mi);
                }
                Op::StopGrad { .. } => {}
                Op::Mixture { gate, a, b } => {
                    let gv = self.value(*gate).item();
                    let va = self.value(*a).as_slice().to_vec();
                    let vb = self.value(*b).as_slice().to_vec();
                    self.bump(&mut grads, *a, g.as_slice(), move |x, _| x * gv);
                    self.bump(&mut grads, *b, g.as_slice(), move |x, _| x * (1.0 - gv));
                    let dgate: f64 = g
                        .as_slice()
                        .iter()
                        .zip(va.iter().zip(vb.iter()))
                        .map(|(gx, (x, y))| gx * (x - y))
                        .sum();
                    let gg = self.grad_slot(&mut grads, *gate, (1, 1));
                    gg.as_mut_slice()[0] += dgate;
                }
                Op::ScaleEntry { v, s, idx: i } => {
                    let c = self.value(*s).as_slice()[*i];
                    let vv = self.value(*v).as_slice().to_vec();
                    self.bump(&mut grads, *v, g.as_slice(), move |x, _| x * c);
                    let ds: f64 = g.as_slice().iter().zip(vv.iter()).map(|(gx, x)| gx * x).sum();
                    let gs = self.grad_slot(&mut grads, *s, self.value(*s).shape());
                    gs.as_mut_slice()[*i] += ds;
                }
                Op::CopyDist { utt_w, tok_ws, ids, .. } => {
                    let uw = self.value(*utt_w).as_slice().to_vec();
                    for (i, (&tw, row)) in tok_ws.iter().zip(ids.iter()).enumerate() {
                        let ws = self.value(tw).as_slice().to_vec();
                        let mut du = 0.0;
                        {
                            let gt = self.grad_slot(&mut grads, tw, self.value(tw).shape());
                            for (j, &id) in row.iter().enumerate() {
                                let gx = g.as_slice()[id as usize];
                                gt.as_mut_slice()[j] += uw[i] * gx;
                                du += ws[j] * gx;
                            }
                        }
                        let gu = self.grad_slot(&mut grads, *utt_w, self.value(*utt_w).shape());
                        gu.as_mut_slice()[i] += du;
                    }
                }
            }
        }

        let mut out = Grads::zeros_like(self.params);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(pid) = node.op {
                if let Some(g) = &grads[idx] {
                    out.by_param[pid.0].add_scaled(g, 1.0);
                }
            }
        }
        out
    }

    #[allow(clippy::mut_from_ref)]
    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor>],
        id: NodeId,
        shape: (usize, usize),
    ) -> &'g mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    fn bump(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        let shape = self.value(id).shape();
        let acc = self.grad_slot(grads, id, shape);
        for (i, (o, x)) in acc.as_mut_slice().iter_mut().zip(g.iter()).enumerate() {
            *o += f(*x, i);
        }
    }

    fn bump_zip(
        &self,
        grads: &mut [Option<Tensor>],
        id: NodeId,
        g: &[f64],
        other: &[f64],
        f: impl Fn(f64, f64) -> f64,
    ) {
        let shape = self.value(id).shape();
        let acc = self.grad_slot(grads, id, shape);
        for ((o, gx), y) in acc.as_mut_slice().iter_mut().zip(g.iter()).zip(other.iter()) {
            *o += f(*gx, *y);
        }
    }

    fn bump_zip_scalar(&self, grads: &mut [Option<Tensor>], id: NodeId, gs: f64, other: &[f64]) {
        let shape = self.value(id).shape();
        let acc = self.grad_slot(grads, id, shape);
        for (o, y) in acc.as_mut_slice().iter_mut().zip(other.iter()) {
            *o += gs * y;
        }
    }
}

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_scalars: usize,
}

/// Compare analytic gradients (from `build`, which constructs a tape and
/// returns its loss node) against central finite differences of the same
/// loss. Relative error uses `max(|analytic|, |fd|, 1e-3)` as denominator, so
/// gradients smaller than 1e-3 are effectively compared absolutely.
pub fn gradient_check(
    params: &mut ParamSet,
    eps: f64,
    build: &dyn Fn(&ParamSet, &mut Tape) -> NodeId,
) -> FdReport {
    let (analytic, _loss0) = {
        let mut tape = Tape::new(params);
        let p = params.clone();
        let loss = build(&p, &mut tape);
        let l0 = tape.value(loss).item();
        (tape.backward(loss), l0)
    };

    let eval = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new(ps);
        let loss = build(ps, &mut tape);
        tape.value(loss).item()
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut n = 0usize;
    for pi in 0..params.len() {
        let pid = ParamId(pi);
        for k in 0..params.get(pid).len() {
            let orig = params.get(pid).as_slice()[k];
            params.get_mut(pid).as_mut_slice()[k] = orig + eps;
            let up = eval(params);
            params.get_mut(pid).as_mut_slice()[k] = orig - eps;
            let dn = eval(params);
            params.get_mut(pid).as_mut_slice()[k] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let an = analytic.by_param[pi].as_slice()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", params.name(pid), k);
            }
            n += 1;
        }
    }
    FdReport { max_rel_err: max_rel, worst_param: worst, n_scalars: n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params(rng: &mut ChaCha8Rng) -> (ParamSet, ParamId, ParamId, ParamId, ParamId) {
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::uniform(3, 4, 0.5, rng));
        let b = ps.register("b", Tensor::uniform(3, 1, 0.5, rng));
        let m = ps.register("m", Tensor::uniform(3, 4, 0.5, rng));
        let e = ps.register("emb", Tensor::uniform(5, 4, 0.5, rng));
        (ps, w, b, m, e)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut ps, w, b, m, e) = toy_params(&mut rng);
        let build = move |_: &ParamSet, tape: &mut Tape| {
            let emb = tape.leaf(e);
            let x0 = tape.row(emb, 2);
            let x1 = tape.row(emb, 4);
            let h0 = tape.affine(w, b, x0);
            let h0 = tape.tanh(h0);
            let h1 = tape.affine(w, b, x1);
            let h1 = tape.sigmoid(h1);
            let prod = tape.mul(h0, h1);
            let ml = tape.leaf(m);
            let scores = tape.mat_t_vec(ml, prod);
            let probs = tape.softmax(scores);
            let ctx = tape.matvec(ml, probs);
            let gate_in = tape.sum(ctx);
            let gate = tape.sigmoid(gate_in);
            let p0 = tape.pick(probs, 0);
            let p1 = tape.pick(probs, 1);
            let mix = tape.mixture(gate, p0, p1);
            let lp = tape.ln(mix);
            tape.scale(lp, -1.0)
        };
        let rep = gradient_check(&mut ps, 1e-5, &build);
        assert!(rep.max_rel_err < 1e-6, "max rel err {} at {}", rep.max_rel_err, rep.worst_param);
    }

    #[test]
    fn copy_dist_and_masked_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let q = ps.register("q", Tensor::uniform(3, 1, 0.8, &mut rng));
        let m1 = ps.register("m1", Tensor::uniform(3, 2, 0.8, &mut rng));
        let m2 = ps.register("m2", Tensor::uniform(3, 3, 0.8, &mut rng));
        let ids = vec![vec![0u32, 2], vec![1, 2, 3]];
        let build = move |_: &ParamSet, tape: &mut Tape| {
            let qn = tape.leaf(q);
            let ma = tape.leaf(m1);
            let mb = tape.leaf(m2);
            let sa = tape.mat_t_vec(ma, qn);
            let sb = tape.mat_t_vec(mb, qn);
            let ca = tape.sum(sa);
            let cb = tape.sum(sb);
            let both = tape.concat(ca, cb);
            let uw = tape.softmax(both);
            let wa = tape.softmax(sa);
            let wb = tape.masked_softmax(sb, vec![true, false, true]);
            let pc = tape.copy_dist(uw, vec![wa, wb], ids.clone(), 5);
            let pm = tape.mask_probs(pc, vec![true, true, true, false, false]);
            let p = tape.pick(pm, 2);
            let lp = tape.ln(p);
            tape.scale(lp, -1.0)
        };
        let rep = gradient_check(&mut ps, 1e-5, &build);
        assert!(rep.max_rel_err < 1e-6, "max rel err {} at {}", rep.max_rel_err, rep.worst_param);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let w = ps.register("w", Tensor::uniform(4, 1, 0.5, &mut rng));
        let mut tape = Tape::new(&ps);
        let wl = tape.leaf(w);
        let frozen = tape.stop_grad(wl);
        let s = tape.dot(frozen, wl);
        let grads = tape.backward(s);
        // d(stop(w)·w)/dw = stop(w) only
        assert_eq!(grads.by_param[0].as_slice(), ps.get(w).as_slice());
    }
}
