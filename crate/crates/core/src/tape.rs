//! Reverse-mode gradient tape.
//!
//! Operations append nodes holding their output value plus whatever the
//! backward rule needs; `backward` walks the tape once in reverse and
//! returns one gradient per node. Nodes only ever reference earlier
//! nodes, so a single reverse sweep finalizes every gradient.

use crate::error::{Error, Result};
use crate::loss::{ce_forward, check_labels, kl_forward, logits_dims, scaled_softmax};
use crate::tensor::{
    conv2d, conv2d_backward, matmul, matmul_at, matmul_bt, maxpool2, ConvDims, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    /// (m,k) @ (k,n)
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// (m,n) + bias(n), broadcast over rows.
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, dims: ConvDims },
    /// argmax holds the flat input index feeding each output cell.
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    Flatten { input: NodeId },
    /// probs are the saved softmax rows; grad is (p − onehot)/n.
    CrossEntropy { logits: NodeId, probs: Vec<f64>, labels: Vec<usize> },
    /// Teacher probabilities are constants; grad is (ps − pt)/(n·t).
    DistillKl { student: NodeId, student_probs: Vec<f64>, teacher_probs: Vec<f64>, t: f64 },
    /// Weighted sum of scalar nodes.
    ScaledSum { terms: Vec<(f64, NodeId)> },
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, ka], [kb, n]) if ka == kb => (*m, *ka, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "(m,k) @ (k,n)".into(),
                    got: format!("{sa:?} @ {sb:?}"),
                })
            }
        };
        let c = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        let (m, n) = match (sx, sb) {
            ([m, n], [nb]) if n == nb => (*m, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "(m,n) + (n)".into(),
                    got: format!("{sx:?} + {sb:?}"),
                })
            }
        };
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        let dims = match (si.as_slice(), sw.as_slice()) {
            ([n, ic, h, w], [oc, icw, kh, kw]) if ic == icw => ConvDims {
                batch: *n,
                in_ch: *ic,
                out_ch: *oc,
                h: *h,
                w: *w,
                kh: *kh,
                kw: *kw,
                pad,
            },
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "(n,ic,h,w) conv (oc,ic,kh,kw)".into(),
                    got: format!("{si:?} conv {sw:?}"),
                })
            }
        };
        if self.value(bias).numel() != dims.out_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("bias of {} channels", dims.out_ch),
                got: format!("{:?}", self.value(bias).shape()),
            });
        }
        let out = conv2d(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &dims,
        );
        let value = Tensor::new(vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, dims }))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        let (n, c, h, w) = match s.as_slice() {
            [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*n, *c, *h, *w),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "(n,c,h,w) with even h,w".into(),
                    got: format!("{s:?}"),
                })
            }
        };
        let (out, argmax) = maxpool2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.is_empty() {
            return Err(Error::ShapeMismatch { expected: "rank ≥ 1".into(), got: "[]".into() });
        }
        let rows = s[0];
        let cols: usize = s[1..].iter().product();
        let value = Tensor::new(vec![rows, cols], self.value(input).data().to_vec())?;
        Ok(self.push(value, Op::Flatten { input }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = logits_dims(self.value(logits))?;
        check_labels(labels, n, k)?;
        let (loss, probs) = ce_forward(self.value(logits).data(), labels, n, k);
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss"));
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }))
    }

    pub fn distill_kl(&mut self, student: NodeId, teacher_logits: &Tensor, t: f64) -> Result<NodeId> {
        let (n, k) = logits_dims(self.value(student))?;
        if self.value(student).shape() != teacher_logits.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.value(student).shape()),
                got: format!("{:?}", teacher_logits.shape()),
            });
        }
        if t <= 0.0 {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
        }
        let teacher_probs = scaled_softmax(teacher_logits.data(), n, k, t);
        let (loss, student_probs) = kl_forward(self.value(student).data(), &teacher_probs, n, k, t);
        if !loss.is_finite() {
            return Err(Error::NonFinite("distillation loss"));
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::DistillKl { student, student_probs, teacher_probs, t }))
    }

    pub fn scaled_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::EmptySet("scaled_sum terms".into()));
        }
        let mut total = 0.0;
        for &(w, id) in terms {
            let v = self.value(id);
            if v.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    expected: "scalar term".into(),
                    got: format!("{:?}", v.shape()),
                });
            }
            total += w * v.data()[0];
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("scaled_sum"));
        }
        let value = Tensor::scalar(total);
        Ok(self.push(value, Op::ScaledSum { terms: terms.to_vec() }))
    }

    /// Gradient of the scalar at `root` with respect to every node.
    /// Entries for nodes the root does not depend on are zero tensors.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        if self.value(root).numel() != 1 {
            return Err(Error::ShapeMismatch {
                expected: "scalar root".into(),
                got: format!("{:?}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
        grads[root.0][0] = 1.0;
        for id in (0..=root.0).rev() {
            // Take the buffer while scattering into input buffers, then
            // put it back so every node's gradient is returned.
            let g = std::mem::take(&mut grads[id]);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let da = matmul_bt(&g, self.value(*b).data(), *m, *n, *k);
                    let db = matmul_at(self.value(*a).data(), &g, *m, *k, *n);
                    axpy(&mut grads[a.0], &da);
                    axpy(&mut grads[b.0], &db);
                }
                Op::AddBias { x, bias } => {
                    axpy(&mut grads[x.0], &g);
                    let n = self.value(*bias).numel();
                    let gb = &mut grads[bias.0];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let gx = &mut grads[x.0];
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, dims } => {
                    let (di, dw, db) =
                        conv2d_backward(self.value(*input).data(), self.value(*weight).data(), &g, dims);
                    axpy(&mut grads[input.0], &di);
                    axpy(&mut grads[weight.0], &dw);
                    axpy(&mut grads[bias.0], &db);
                }
                Op::MaxPool2 { input, argmax } => {
                    let gi = &mut grads[input.0];
                    for (j, &src) in argmax.iter().enumerate() {
                        gi[src] += g[j];
                    }
                }
                Op::Flatten { input } => {
                    axpy(&mut grads[input.0], &g);
                }
                Op::CrossEntropy { logits, probs, labels } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let gl = &mut grads[logits.0];
                    for i in 0..n {
                        for j in 0..k {
                            let ind = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (probs[i * k + j] - ind);
                        }
                    }
                }
                Op::DistillKl { student, student_probs, teacher_probs, t } => {
                    let n = self.value(*student).rows();
                    let scale = g[0] / (n as f64 * t);
                    let gs = &mut grads[student.0];
                    for i in 0..gs.len() {
                        gs[i] += scale * (student_probs[i] - teacher_probs[i]);
                    }
                }
                Op::ScaledSum { terms } => {
                    for &(w, tid) in terms {
                        grads[tid.0][0] += w * g[0];
                    }
                }
            }
            grads[id] = g;
        }
        self.nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| Tensor::new(node.value.shape().to_vec(), g))
            .collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
