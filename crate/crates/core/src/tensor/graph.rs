//! Reverse-mode autodiff over an append-only op record.
//!
//! Nodes are appended during the forward pass, so the record is topologically
//! ordered by construction; backward is a single reverse sweep that visits
//! each op exactly once and accumulates (never overwrites) input gradients.

use super::gemm;
use super::{numel, strides, SharedTensor, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Input snapshots handed to a custom backward rule.
pub struct CustomSaved {
    /// (shape, data) of each input at the time the op ran.
    pub inputs: Vec<(Vec<usize>, Vec<f32>)>,
    /// Shape of the op's output.
    pub output_shape: Vec<usize>,
}

type CustomBackwardFn = dyn Fn(&CustomSaved, &[f32]) -> Vec<Vec<f32>>;

enum Op {
    Leaf {
        param: Option<SharedTensor>,
    },
    Add {
        a: Value,
        b: Value,
    },
    /// `b`'s shape equals the trailing axes of `a`'s; broadcast over the rest.
    AddBroadcast {
        a: Value,
        b: Value,
    },
    Sub {
        a: Value,
        b: Value,
    },
    Mul {
        a: Value,
        b: Value,
    },
    Scale {
        a: Value,
        c: f32,
    },
    Relu {
        a: Value,
    },
    Gelu {
        a: Value,
    },
    MatMul {
        a: Value,
        b: Value,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Permute {
        a: Value,
        perm: Vec<usize>,
    },
    Reshape {
        a: Value,
    },
    Gather {
        table: Value,
        indices: Vec<usize>,
    },
    SelectAxis1 {
        a: Value,
        index: usize,
    },
    Softmax {
        a: Value,
    },
    LayerNorm {
        a: Value,
        gain: Value,
        bias: Value,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Mse {
        a: Value,
        b: Value,
    },
    SoftCrossEntropy {
        s: Value,
        t: Value,
    },
    HardCrossEntropy {
        logits: Value,
        labels: Vec<usize>,
    },
    Sum {
        a: Value,
    },
    Mean {
        a: Value,
    },
    Custom {
        inputs: Vec<Value>,
        saved: CustomSaved,
        backward: Rc<CustomBackwardFn>,
    },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

const LAYERNORM_EPS: f32 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn data(&self, v: Value) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Value) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient computed by the last `backward`, if the node was on the path.
    pub fn grad(&self, v: Value) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- leaves ------------------------------------------------------

    /// Non-trainable input node.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Value> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "constant: shape {:?} vs {} elements",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape, data, false, Op::Leaf { param: None }))
    }

    pub fn scalar(&mut self, v: f32) -> Value {
        self.push(vec![1], vec![v], false, Op::Leaf { param: None })
    }

    /// Leaf copied from a tensor; tracks gradient if the tensor does, but the
    /// gradient stays in the graph (use [`Graph::param`] to sink it back).
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf { param: None },
        )
    }

    /// Parameter leaf: after `backward`, the node's gradient is accumulated
    /// into the shared tensor's grad buffer.
    pub fn param(&mut self, p: &SharedTensor) -> Value {
        let t = p.borrow();
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        drop(t);
        self.push(
            shape,
            data,
            needs,
            Op::Leaf {
                param: Some(Rc::clone(p)),
            },
        )
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        a: Value,
        b: Value,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{name}: shapes {sa:?} vs {sb:?}")));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa.to_vec(), data, needs, op))
    }

    /// `a + b` where `b`'s shape matches the trailing axes of `a`'s shape
    /// (broadcast over the leading batch axes only).
    pub fn add_broadcast(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb {
            return Err(Error::dim(format!(
                "add_broadcast: {sb:?} is not a trailing suffix of {sa:?}"
            )));
        }
        let blen = numel(sb);
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.data(b)[i % blen])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa.to_vec(), data, needs, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, a: Value, c: f32) -> Value {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Relu { a })
    }

    /// GeLU via the tanh approximation.
    pub fn gelu(&mut self, a: Value) -> Value {
        let data: Vec<f32> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Gelu { a })
    }

    // ---- linear algebra / shape --------------------------------------

    /// Matrix product over the last two axes. `b` is either 2-D (shared
    /// across `a`'s leading batch axes) or carries identical leading axes.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!(
                "matmul: operands must be at least 2-D, got {sa:?} x {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!(
                "matmul: inner dimensions disagree, {sa:?} x {sb:?}"
            )));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = if lead_b.is_empty() {
            false
        } else if lead_b == lead_a {
            true
        } else {
            return Err(Error::dim(format!(
                "matmul: leading axes {lead_a:?} vs {lead_b:?}"
            )));
        };
        let batch = numel(lead_a);

        let mut out = vec![0.0f32; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                let a_slab = &ad[i * m * k..(i + 1) * m * k];
                let b_slab = if b_batched {
                    &bd[i * k * n..(i + 1) * k * n]
                } else {
                    bd
                };
                gemm::gemm_acc(m, k, n, a_slab, b_slab, &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            out_shape,
            out,
            needs,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
        ))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Value, perm: &[usize]) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        if perm.len() != sa.len() {
            return Err(Error::dim(format!(
                "permute: perm {perm:?} rank vs shape {sa:?}"
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= sa.len() || seen[p] {
                return Err(Error::dim(format!("permute: invalid perm {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(self.data(a), &sa, perm);
        let needs = self.needs(a);
        Ok(self.push(
            out_shape,
            data,
            needs,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        if numel(&shape) != self.data(a).len() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, data, needs, Op::Reshape { a }))
    }

    /// Row lookup into a 2-D table; output is `[indices.len(), table_cols]`.
    pub fn gather(&mut self, table: Value, indices: &[usize]) -> Result<Value> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::dim(format!("gather: table must be 2-D, got {st:?}")));
        }
        let (rows, cols) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!(
                "gather: index {bad} out of range for table with {rows} rows"
            )));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&td[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![indices.len(), cols],
            data,
            needs,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Picks one index along axis 1: `[d0, d1, rest..] -> [d0, rest..]`.
    pub fn select_axis1(&mut self, a: Value, index: usize) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || index >= sa[1] {
            return Err(Error::dim(format!(
                "select_axis1: index {index} invalid for shape {sa:?}"
            )));
        }
        let inner: usize = sa[2..].iter().product();
        let d1 = sa[1];
        let ad = self.data(a);
        let mut data = Vec::with_capacity(sa[0] * inner);
        for b in 0..sa[0] {
            let off = (b * d1 + index) * inner;
            data.extend_from_slice(&ad[off..off + inner]);
        }
        let mut out_shape = vec![sa[0]];
        out_shape.extend_from_slice(&sa[2..]);
        let needs = self.needs(a);
        Ok(self.push(out_shape, data, needs, Op::SelectAxis1 { a, index }))
    }

    // ---- normalization -----------------------------------------------

    /// Softmax over the last axis; rows sum to 1.
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let cols = *sa.last().ok_or_else(|| Error::dim("softmax: 0-rank"))?;
        if cols == 0 {
            return Err(Error::dim("softmax: zero-size last axis"));
        }
        let ad = self.data(a);
        let mut data = vec![0.0f32; ad.len()];
        for r in 0..ad.len() / cols {
            let row = &ad[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_row(row, out);
        }
        let needs = self.needs(a);
        Ok(self.push(sa, data, needs, Op::Softmax { a }))
    }

    /// Layer normalization over the last axis with learnable gain and bias
    /// (both shaped `[last_axis]`). Epsilon is fixed at 1e-5.
    pub fn layernorm(&mut self, a: Value, gain: Value, bias: Value) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let cols = *sa.last().ok_or_else(|| Error::dim("layernorm: 0-rank"))?;
        if cols == 0 {
            return Err(Error::dim("layernorm: zero-size last axis"));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::dim(format!(
                "layernorm: gain/bias must be [{cols}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let ad = self.data(a);
        let rows = ad.len() / cols;
        let mut xhat = vec![0.0f32; ad.len()];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&x| x as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&x| {
                    let d = x as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let istd = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
            inv_std[r] = istd as f32;
            for c in 0..cols {
                xhat[r * cols + c] = ((row[c] as f64 - mean) * istd) as f32;
            }
        }
        let gd = self.data(gain);
        let bd = self.data(bias);
        let data: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| xh * gd[i % cols] + bd[i % cols])
            .collect();
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            sa,
            data,
            needs,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- reductions / losses -----------------------------------------

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("mse: shapes {sa:?} vs {sb:?}")));
        }
        let acc: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum();
        let v = (acc / self.data(a).len() as f64) as f32;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![v], needs, Op::Mse { a, b }))
    }

    /// Soft cross-entropy between student and teacher logits over the last
    /// axis, averaged over the leading rows:
    /// `-(1/R) sum_rows sum_c softmax(t) * log_softmax(s)`.
    pub fn soft_cross_entropy(&mut self, s: Value, t: Value) -> Result<Value> {
        let (ss, st) = (self.shape(s), self.shape(t));
        if ss != st {
            return Err(Error::dim(format!(
                "soft_cross_entropy: shapes {ss:?} vs {st:?}"
            )));
        }
        let cols = *ss.last().ok_or_else(|| Error::dim("soft_cross_entropy: 0-rank"))?;
        if cols == 0 {
            return Err(Error::dim("soft_cross_entropy: zero-size last axis"));
        }
        let sd = self.data(s);
        let td = self.data(t);
        let rows = sd.len() / cols;
        let mut acc = 0.0f64;
        let mut p = vec![0.0f32; cols];
        let mut logq = vec![0.0f32; cols];
        for r in 0..rows {
            softmax_row(&td[r * cols..(r + 1) * cols], &mut p);
            log_softmax_row(&sd[r * cols..(r + 1) * cols], &mut logq);
            for c in 0..cols {
                acc -= (p[c] as f64) * (logq[c] as f64);
            }
        }
        let v = (acc / rows as f64) as f32;
        let needs = self.needs(s) || self.needs(t);
        Ok(self.push(vec![1], vec![v], needs, Op::SoftCrossEntropy { s, t }))
    }

    /// Cross-entropy of logits against integer class labels, averaged over
    /// rows.
    pub fn hard_cross_entropy(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let sl = self.shape(logits).to_vec();
        let cols = *sl.last().ok_or_else(|| Error::dim("hard_cross_entropy: 0-rank"))?;
        if cols == 0 {
            return Err(Error::dim("hard_cross_entropy: zero-size last axis"));
        }
        let rows = self.data(logits).len() / cols;
        if labels.len() != rows {
            return Err(Error::dim(format!(
                "hard_cross_entropy: {rows} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::input(format!(
                "hard_cross_entropy: label {bad} out of range for {cols} classes"
            )));
        }
        let ld = self.data(logits);
        let mut logq = vec![0.0f32; cols];
        let mut acc = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            log_softmax_row(&ld[r * cols..(r + 1) * cols], &mut logq);
            acc -= logq[label] as f64;
        }
        let v = (acc / rows as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![v],
            needs,
            Op::HardCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let v = self.data(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.data(a).len();
        let v = (self.data(a).iter().map(|&x| x as f64).sum::<f64>() / n as f64) as f32;
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::Mean { a })
    }

    // ---- custom-gradient hook ------------------------------------------

    /// Runs `forward` on the inputs' current values and registers
    /// `backward_override` as the op's gradient rule in place of the true
    /// derivative. The override maps (saved inputs, output gradient) to one
    /// gradient per input, each shaped like its input.
    pub fn custom_grad<F>(
        &mut self,
        inputs: &[Value],
        forward: F,
        backward_override: impl Fn(&CustomSaved, &[f32]) -> Vec<Vec<f32>> + 'static,
    ) -> Result<Value>
    where
        F: FnOnce(&[(&[usize], &[f32])]) -> Result<(Vec<usize>, Vec<f32>)>,
    {
        let views: Vec<(&[usize], &[f32])> =
            inputs.iter().map(|&v| (self.shape(v), self.data(v))).collect();
        let (out_shape, out_data) = forward(&views)?;
        if numel(&out_shape) != out_data.len() {
            return Err(Error::dim(format!(
                "custom_grad: forward returned shape {:?} with {} elements",
                out_shape,
                out_data.len()
            )));
        }
        let saved = CustomSaved {
            inputs: inputs
                .iter()
                .map(|&v| (self.shape(v).to_vec(), self.data(v).to_vec()))
                .collect(),
            output_shape: out_shape.clone(),
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out_shape,
            out_data,
            needs,
            Op::Custom {
                inputs: inputs.to_vec(),
                saved,
                backward: Rc::new(backward_override),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of parameter leaves are
    /// accumulated into their shared tensors.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = &node.op {
                if let Some(g) = &grads[id] {
                    let mut t = p.borrow_mut();
                    if t.requires_grad() {
                        t.accumulate_grad(g);
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], target: Value, contrib: impl FnOnce(&mut [f32])) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].data.len()]);
        contrib(buf);
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::AddBroadcast { a, b } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                let blen = self.nodes[b.0].data.len();
                self.acc(grads, *b, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % blen] += gi;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc(grads, *a, |ga| axpy(ga, g, c));
            }
            Op::Relu { a } => {
                let ad = &self.nodes[a.0].data;
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let ad = &self.nodes[a.0].data;
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_bwd(ad[i]);
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                self.acc(grads, *a, |ga| {
                    for i in 0..batch {
                        let g_slab = &g[i * m * n..(i + 1) * m * n];
                        let b_slab = if *b_batched {
                            &bd[i * k * n..(i + 1) * k * n]
                        } else {
                            &bd[..]
                        };
                        gemm::gemm_a_bt_acc(
                            m,
                            n,
                            k,
                            g_slab,
                            b_slab,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..batch {
                        let g_slab = &g[i * m * n..(i + 1) * m * n];
                        let a_slab = &ad[i * m * k..(i + 1) * m * k];
                        let gb_slab = if *b_batched {
                            &mut gb[i * k * n..(i + 1) * k * n]
                        } else {
                            &mut gb[..]
                        };
                        gemm::gemm_at_b_acc(k, m, n, a_slab, g_slab, gb_slab);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let inverse = invert_perm(perm);
                let out_shape = &node.shape;
                self.acc(grads, *a, |ga| {
                    let back = permute_data(g, out_shape, &inverse);
                    axpy(ga, &back, 1.0);
                });
            }
            Op::Reshape { a } => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
            }
            Op::Gather { table, indices } => {
                let cols = self.nodes[table.0].shape[1];
                self.acc(grads, *table, |gt| {
                    for (row, &idx) in indices.iter().enumerate() {
                        let src = &g[row * cols..(row + 1) * cols];
                        let dst = &mut gt[idx * cols..(idx + 1) * cols];
                        axpy(dst, src, 1.0);
                    }
                });
            }
            Op::SelectAxis1 { a, index } => {
                let sa = &self.nodes[a.0].shape;
                let inner: usize = sa[2..].iter().product();
                let d1 = sa[1];
                let index = *index;
                self.acc(grads, *a, |ga| {
                    for b in 0..sa[0] {
                        let dst = &mut ga[(b * d1 + index) * inner..][..inner];
                        axpy(dst, &g[b * inner..(b + 1) * inner], 1.0);
                    }
                });
            }
            Op::Softmax { a } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                self.acc(grads, *a, |ga| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f32 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = *node.shape.last().unwrap();
                let rows = xhat.len() / cols;
                let gd = &self.nodes[gain.0].data;
                self.acc(grads, *bias, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.acc(grads, *a, |ga| {
                    for r in 0..rows {
                        let xr = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = 0.0f32;
                        let mut mean_dxhat_x = 0.0f32;
                        for c in 0..cols {
                            let dxh = gr[c] * gd[c];
                            mean_dxhat += dxh;
                            mean_dxhat_x += dxh * xr[c];
                        }
                        mean_dxhat /= cols as f32;
                        mean_dxhat_x /= cols as f32;
                        for c in 0..cols {
                            let dxh = gr[c] * gd[c];
                            ga[r * cols + c] +=
                                inv_std[r] * (dxh - mean_dxhat - xr[c] * mean_dxhat_x);
                        }
                    }
                });
            }
            Op::Mse { a, b } => {
                let g0 = g[0];
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                let scale = 2.0 * g0 / ad.len() as f32;
                self.acc(grads, *a, |ga| {
                    for i in 0..ad.len() {
                        ga[i] += scale * (ad[i] - bd[i]);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..ad.len() {
                        gb[i] -= scale * (ad[i] - bd[i]);
                    }
                });
            }
            Op::SoftCrossEntropy { s, t } => {
                let g0 = g[0];
                let cols = *self.nodes[s.0].shape.last().unwrap();
                let sd = &self.nodes[s.0].data;
                let td = &self.nodes[t.0].data;
                let rows = sd.len() / cols;
                let w = g0 / rows as f32;
                self.acc(grads, *s, |gs| {
                    let mut p = vec![0.0f32; cols];
                    let mut qs = vec![0.0f32; cols];
                    for r in 0..rows {
                        softmax_row(&td[r * cols..(r + 1) * cols], &mut p);
                        softmax_row(&sd[r * cols..(r + 1) * cols], &mut qs);
                        for c in 0..cols {
                            gs[r * cols + c] += w * (qs[c] - p[c]);
                        }
                    }
                });
                self.acc(grads, *t, |gt| {
                    let mut p = vec![0.0f32; cols];
                    let mut logq = vec![0.0f32; cols];
                    for r in 0..rows {
                        softmax_row(&td[r * cols..(r + 1) * cols], &mut p);
                        log_softmax_row(&sd[r * cols..(r + 1) * cols], &mut logq);
                        let dot: f32 = p.iter().zip(&logq).map(|(pi, qi)| pi * qi).sum();
                        for c in 0..cols {
                            gt[r * cols + c] += w * p[c] * (dot - logq[c]);
                        }
                    }
                });
            }
            Op::HardCrossEntropy { logits, labels } => {
                let g0 = g[0];
                let cols = *self.nodes[logits.0].shape.last().unwrap();
                let ld = &self.nodes[logits.0].data;
                let rows = labels.len();
                let w = g0 / rows as f32;
                self.acc(grads, *logits, |gl| {
                    let mut q = vec![0.0f32; cols];
                    for (r, &label) in labels.iter().enumerate() {
                        softmax_row(&ld[r * cols..(r + 1) * cols], &mut q);
                        for c in 0..cols {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * cols + c] += w * (q[c] - onehot);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                self.acc(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g0;
                    }
                });
            }
            Op::Mean { a } => {
                let g0 = g[0];
                let n = self.nodes[a.0].data.len() as f32;
                self.acc(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g0 / n;
                    }
                });
            }
            Op::Custom {
                inputs,
                saved,
                backward,
            } => {
                let input_grads = backward(saved, g);
                debug_assert_eq!(input_grads.len(), inputs.len());
                for (inp, ig) in inputs.iter().zip(&input_grads) {
                    debug_assert_eq!(ig.len(), self.nodes[inp.0].data.len());
                    self.acc(grads, *inp, |gi| axpy(gi, ig, 1.0));
                }
            }
        }
    }
}

fn axpy(dst: &mut [f32], src: &[f32], c: f32) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Materializes `permute(input, perm)` where output axis `d` reads input
/// axis `perm[d]`.
fn permute_data(data: &[f32], in_shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0f32; data.len()];
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        let mut in_idx = 0usize;
        for d in 0..perm.len() {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            in_idx += coord * in_strides[perm[d]];
        }
        *slot = data[in_idx];
    }
    out
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for &x in row {
        sum += (x - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_z;
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
