//! Dynamically recorded tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to replay the chain rule. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only consume earlier nodes.

use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvDims};
use super::tensor::{inverse_perm, permute_data, validate_perm};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Statistics normalization layers need in evaluation mode.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        layout: MatMulLayout,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Sum(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    ExpandAxis {
        x: usize,
        axis: usize,
        len: usize,
    },
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        dims: ConvDims,
    },
    BatchNorm(Box<NormSaved>),
    LayerNorm(Box<NormSaved>),
    BceWithLogits {
        x: usize,
        target: Vec<f64>,
    },
    RowCosine {
        a: usize,
        b: usize,
        floor: f64,
    },
}

#[derive(Debug)]
struct NormSaved {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether the statistics came from the batch itself (and so depend on x).
    batch_stats: bool,
}

#[derive(Clone, Copy, Debug)]
struct MatMulLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    transpose_b: bool,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward episode.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradient accumulated on a leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Back-propagates from a single-element `root`, accumulating into every
    /// leaf that requires a gradient. Intermediate gradients are released as
    /// soon as they have been propagated.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.id].value.numel() != 1 {
            return Err(TensorError::NotScalar(
                nodes[root.id].value.shape().to_vec(),
            ));
        }
        if !nodes[root.id].requires_grad {
            return Ok(());
        }
        nodes[root.id].grad = Some(vec![1.0]);
        for i in (0..=root.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = nodes[i].grad.take() else {
                continue;
            };
            let contributions = local_grads(&nodes, i, &g);
            for (j, c) in contributions {
                let node = &mut nodes[j];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }
}

/// Chain-rule contributions of node `i` to its inputs, given upstream `g`.
fn local_grads(nodes: &[Node], i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |j: usize| nodes[j].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![
                (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::AddBias { x, bias } => {
            let n = nodes[*bias].value.numel();
            let mut gb = vec![0.0; n];
            for row in g.chunks_exact(n) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![(*x, g.to_vec()), (*bias, gb)]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::MatMul { a, b, layout } => {
            let l = *layout;
            let (va, vb) = (val(*a), val(*b));
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            let (sa, sb, sc) = (l.m * l.k, l.k * l.n, l.m * l.n);
            for t in 0..l.batch {
                let ao = if l.a_batched { t * sa } else { 0 };
                let bo = if l.b_batched { t * sb } else { 0 };
                let gc = &g[t * sc..(t + 1) * sc];
                let a_t = &va[ao..ao + sa];
                let b_t = &vb[bo..bo + sb];
                if l.transpose_b {
                    // c = a·bᵀ, b is [n,k]
                    kernels::gemm_nn(gc, b_t, &mut ga[ao..ao + sa], l.m, l.n, l.k);
                    kernels::gemm_tn(gc, a_t, &mut gb[bo..bo + sb], l.m, l.n, l.k);
                } else {
                    kernels::gemm_nt(gc, b_t, &mut ga[ao..ao + sa], l.m, l.n, l.k);
                    kernels::gemm_tn(a_t, gc, &mut gb[bo..bo + sb], l.m, l.k, l.n);
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Permute { x, perm } => {
            let inv = inverse_perm(perm);
            let shape = nodes[i].value.shape();
            vec![(*x, permute_data(g, shape, &inv))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Softmax { x: src, axis } => {
            let (o, l, n) = kernels::axis_split(nodes[i].value.shape(), *axis);
            vec![(*src, kernels::softmax_backward(out, g, o, l, n))]
        }
        Op::Sigmoid(x) => vec![(
            *x,
            g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
        )],
        Op::Gelu(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(g, &v)| g * kernels::gelu_grad(v))
                .collect(),
        )],
        Op::Relu(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Softplus(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x))
                .map(|(g, &v)| g * kernels::sigmoid(v))
                .collect(),
        )],
        Op::Exp(x) => vec![(*x, g.iter().zip(out).map(|(g, y)| g * y).collect())],
        Op::Sum(x) => vec![(*x, vec![g[0]; nodes[*x].value.numel()])],
        Op::SumAxis { x, axis } => {
            let (o, l, n) = kernels::axis_split(nodes[*x].value.shape(), *axis);
            let mut gx = vec![0.0; o * l * n];
            for oi in 0..o {
                for r in 0..l {
                    gx[(oi * l + r) * n..(oi * l + r + 1) * n]
                        .copy_from_slice(&g[oi * n..(oi + 1) * n]);
                }
            }
            vec![(*x, gx)]
        }
        Op::ExpandAxis { x, axis, len } => {
            let shape = nodes[*x].value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis..].iter().product();
            let mut gx = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for r in 0..*len {
                    let src = &g[(o * len + r) * inner..(o * len + r + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            vec![(*x, gx)]
        }
        Op::Gather { x, index } => {
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for (&ix, gv) in index.iter().zip(g) {
                gx[ix] += gv;
            }
            vec![(*x, gx)]
        }
        Op::Conv1d { x, w, bias, dims } => {
            let (gx, gw, gb) = kernels::conv1d_backward(val(*x), val(*w), g, *dims);
            let mut v = vec![(*x, gx), (*w, gw)];
            if let Some(b) = bias {
                v.push((*b, gb));
            }
            v
        }
        Op::BatchNorm(s) => batch_norm_backward(nodes, s, g),
        Op::LayerNorm(s) => layer_norm_backward(nodes, s, g),
        Op::BceWithLogits { x, target } => {
            let n = target.len() as f64;
            let gx = val(*x)
                .iter()
                .zip(target)
                .map(|(&v, &t)| g[0] * (kernels::sigmoid(v) - t) / n)
                .collect();
            vec![(*x, gx)]
        }
        Op::RowCosine { a, b, floor } => {
            let (va, vb) = (val(*a), val(*b));
            let m = *nodes[*a].value.shape().last().unwrap();
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            for (r, &gr) in g.iter().enumerate() {
                let ar = &va[r * m..(r + 1) * m];
                let br = &vb[r * m..(r + 1) * m];
                let na = kernels::dot(ar, ar).sqrt();
                let nb = kernels::dot(br, br).sqrt();
                let (da, db) = (na.max(*floor), nb.max(*floor));
                let c = kernels::dot(ar, br) / (da * db);
                // a floored norm is a constant, so its derivative term vanishes
                let ka = if na > *floor { c / (na * na) } else { 0.0 };
                let kb = if nb > *floor { c / (nb * nb) } else { 0.0 };
                for t in 0..m {
                    ga[r * m + t] = gr * (br[t] / (da * db) - ka * ar[t]);
                    gb[r * m + t] = gr * (ar[t] / (da * db) - kb * br[t]);
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
    }
}

fn batch_norm_backward(nodes: &[Node], s: &NormSaved, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let shape = nodes[s.x].value.shape();
    let (b, c, n) = (shape[0], shape[1], shape[2]);
    let gamma = nodes[s.gamma].value.data();
    let m = (b * n) as f64;
    let mut gg = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * n;
            for t in 0..n {
                gbeta[ci] += g[off + t];
                gg[ci] += g[off + t] * s.xhat[off + t];
            }
        }
    }
    let mut gx = vec![0.0; g.len()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * n;
            let k = gamma[ci] * s.inv_std[ci];
            for t in 0..n {
                gx[off + t] = if s.batch_stats {
                    k * (g[off + t] - gbeta[ci] / m - s.xhat[off + t] * gg[ci] / m)
                } else {
                    k * g[off + t]
                };
            }
        }
    }
    vec![(s.x, gx), (s.gamma, gg), (s.beta, gbeta)]
}

fn layer_norm_backward(nodes: &[Node], s: &NormSaved, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let d = *nodes[s.x].value.shape().last().unwrap();
    let gamma = nodes[s.gamma].value.data();
    let mut gg = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    let mut gx = vec![0.0; g.len()];
    for (r, (grow, xrow)) in g.chunks_exact(d).zip(s.xhat.chunks_exact(d)).enumerate() {
        let mut sum_gy = 0.0;
        let mut sum_gy_x = 0.0;
        for t in 0..d {
            gbeta[t] += grow[t];
            gg[t] += grow[t] * xrow[t];
            let gy = grow[t] * gamma[t];
            sum_gy += gy;
            sum_gy_x += gy * xrow[t];
        }
        let inv = s.inv_std[r];
        let df = d as f64;
        for t in 0..d {
            let gy = grow[t] * gamma[t];
            gx[r * d + t] = inv * (gy - sum_gy / df - xrow[t] * sum_gy_x / df);
        }
    }
    vec![(s.x, gx), (s.gamma, gg), (s.beta, gbeta)]
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(axis: usize, ndim: usize) -> Result<()> {
    if axis >= ndim {
        return Err(TensorError::InvalidAxis { axis, ndim });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.requires(inputs);
        self.tape.push(value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape(name, &a, &b)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.record(value, op, &[self.id, other.id]))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.record(value, op, &[self.id])
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            let n = *x.shape().last().unwrap_or(&1);
            if b.ndim() != 1 || b.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(a, c)| *a += c);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.record(
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// Batched matrix product `self[..., m, k] · other[..., k, n]`.
    ///
    /// Leading axes must agree, or one side must be a plain matrix that is
    /// shared across the other's batch.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// Batched `self[..., m, k] · other[..., n, k]ᵀ`.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'t>, transpose_b: bool) -> Result<Var<'t>> {
        let (value, layout) = {
            let (a, b) = (self.value(), other.value());
            let mismatch = || TensorError::ShapeMismatch {
                op: if transpose_b { "matmul_t" } else { "matmul" },
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.ndim() < 2 || b.ndim() < 2 {
                return Err(mismatch());
            }
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = if transpose_b {
                (sb[sb.len() - 1], sb[sb.len() - 2])
            } else {
                (sb[sb.len() - 2], sb[sb.len() - 1])
            };
            if k != kb {
                return Err(mismatch());
            }
            let (lead_a, lead_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let (lead, a_batched, b_batched) = if lead_a == lead_b {
                (lead_a.to_vec(), !lead_a.is_empty(), !lead_b.is_empty())
            } else if lead_b.is_empty() {
                (lead_a.to_vec(), true, false)
            } else if lead_a.is_empty() {
                (lead_b.to_vec(), false, true)
            } else {
                return Err(mismatch());
            };
            let batch: usize = lead.iter().product();
            let layout = MatMulLayout {
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
                transpose_b,
            };
            let mut out = vec![0.0; batch * m * n];
            let (ad, bd) = (a.data(), b.data());
            for t in 0..batch {
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                let c = &mut out[t * m * n..(t + 1) * m * n];
                if transpose_b {
                    kernels::gemm_nt(&ad[ao..ao + m * k], &bd[bo..bo + k * n], c, m, k, n);
                } else {
                    kernels::gemm_nn(&ad[ao..ao + m * k], &bd[bo..bo + k * n], c, m, k, n);
                }
            }
            let mut shape = lead;
            shape.extend([m, n]);
            (Tensor::new(shape, out)?, layout)
        };
        Ok(self.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                layout,
            },
            &[self.id, other.id],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            validate_perm(perm, x.ndim())?;
            x.permute(perm)?
        };
        Ok(self.record(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        check_axis(a.max(b), nd)?;
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(self.id), &[self.id]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            check_axis(axis, x.ndim())?;
            let (o, l, n) = kernels::axis_split(x.shape(), axis);
            Tensor::new(
                x.shape().to_vec(),
                kernels::softmax_forward(x.data(), o, l, n),
            )?
        };
        Ok(self.record(value, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(kernels::gelu, Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(kernels::softplus, Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            check_axis(axis, x.ndim())?;
            let (o, l, n) = kernels::axis_split(x.shape(), axis);
            let mut out = vec![0.0; o * n];
            let d = x.data();
            for oi in 0..o {
                let dst = &mut out[oi * n..(oi + 1) * n];
                for r in 0..l {
                    let src = &d[(oi * l + r) * n..(oi * l + r + 1) * n];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        Ok(self.record(value, Op::SumAxis { x: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = {
            let x = self.value();
            check_axis(axis, x.ndim())?;
            x.shape()[axis]
        };
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Inserts a new axis of extent `len` at `axis`, repeating the input.
    pub fn expand_axis(&self, axis: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            check_axis(axis, x.ndim() + 1)?;
            if len == 0 {
                return Err(TensorError::InvalidArgument("expand to zero extent".into()));
            }
            let outer: usize = x.shape()[..axis].iter().product();
            let inner: usize = x.shape()[axis..].iter().product();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = &x.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    out.extend_from_slice(src);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.insert(axis, len);
            Tensor::new(shape, out)?
        };
        Ok(self.record(
            value,
            Op::ExpandAxis {
                x: self.id,
                axis,
                len,
            },
            &[self.id],
        ))
    }

    /// Selects elements by flat index into a 1-D tensor.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if index.is_empty() {
                return Err(TensorError::InvalidArgument(
                    "gather with no indices".into(),
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
                return Err(TensorError::InvalidArgument(format!(
                    "gather index {bad} out of range for {} elements",
                    x.numel()
                )));
            }
            let data = index.iter().map(|&i| x.data()[i]).collect();
            Tensor::new(vec![index.len()], data)?
        };
        Ok(self.record(
            value,
            Op::Gather {
                x: self.id,
                index: index.to_vec(),
            },
            &[self.id],
        ))
    }

    /// `self[B,C_in,N] ⋆ weight[C_out,C_in,k] + bias`, zero padded.
    pub fn conv1d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        padding: usize,
    ) -> Result<Var<'t>> {
        let (value, dims) = {
            let (x, w) = (self.value(), weight.value());
            let mismatch = || TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            };
            if x.ndim() != 3 || w.ndim() != 3 || x.shape()[1] != w.shape()[1] {
                return Err(mismatch());
            }
            let dims = ConvDims {
                batch: x.shape()[0],
                c_in: x.shape()[1],
                c_out: w.shape()[0],
                len_in: x.shape()[2],
                kernel: w.shape()[2],
                padding,
            };
            if dims.len_in + 2 * padding < dims.kernel {
                return Err(mismatch());
            }
            let b = bias.map(|b| b.value());
            if let Some(b) = &b {
                if b.numel() != dims.c_out {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv1d bias",
                        lhs: w.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
            }
            let out =
                kernels::conv1d_forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), dims);
            (
                Tensor::new(vec![dims.batch, dims.c_out, dims.len_out()], out)?,
                dims,
            )
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.record(
            value,
            Op::Conv1d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                dims,
            },
            &inputs,
        ))
    }

    /// Batch normalization of `self[B,C,N]` over the batch and token axes.
    ///
    /// In [`NormMode::Train`] the batch statistics are returned so the caller
    /// can update its running estimates.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let (value, saved, stats) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            if x.ndim() != 3 || gm.numel() != x.shape()[1] || bt.numel() != x.shape()[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gm.shape().to_vec(),
                });
            }
            let (b, c, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let d = x.data();
            let (mean, var, stats) = match mode {
                NormMode::Train => {
                    let count = b * n;
                    if count < 2 {
                        return Err(TensorError::DegenerateBatch { count });
                    }
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ci in 0..c {
                        let vals =
                            (0..b).flat_map(|bi| &d[(bi * c + ci) * n..(bi * c + ci + 1) * n]);
                        let mu = vals.clone().sum::<f64>() / count as f64;
                        let ss: f64 = vals.map(|v| (v - mu) * (v - mu)).sum();
                        mean[ci] = mu;
                        var[ci] = ss / count as f64;
                    }
                    let unbiased = var
                        .iter()
                        .map(|v| v * count as f64 / (count - 1) as f64)
                        .collect();
                    let stats = BatchStats {
                        mean: mean.clone(),
                        var: unbiased,
                    };
                    (mean, var, Some(stats))
                }
                NormMode::Eval {
                    running_mean,
                    running_var,
                } => {
                    if running_mean.len() != c || running_var.len() != c {
                        return Err(TensorError::InvalidArgument(format!(
                            "running statistics for {} channels, input has {c}",
                            running_mean.len()
                        )));
                    }
                    (running_mean.to_vec(), running_var.to_vec(), None)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; d.len()];
            let mut out = vec![0.0; d.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * n;
                    for t in 0..n {
                        let h = (d[off + t] - mean[ci]) * inv_std[ci];
                        xhat[off + t] = h;
                        out[off + t] = gm.data()[ci] * h + bt.data()[ci];
                    }
                }
            }
            let saved = NormSaved {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            };
            (Tensor::new(x.shape().to_vec(), out)?, saved, stats)
        };
        let var = self.record(
            value,
            Op::BatchNorm(Box::new(saved)),
            &[self.id, gamma.id, beta.id],
        );
        Ok((var, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (value, saved) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let d = *x.shape().last().unwrap_or(&1);
            if gm.numel() != d || bt.numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gm.shape().to_vec(),
                });
            }
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.numel() / d);
            for (r, row) in x.data().chunks_exact(d).enumerate() {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for t in 0..d {
                    let h = (row[t] - mu) * inv;
                    xhat[r * d + t] = h;
                    out[r * d + t] = gm.data()[t] * h + bt.data()[t];
                }
            }
            let saved = NormSaved {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats: true,
            };
            (Tensor::new(x.shape().to_vec(), out)?, saved)
        };
        Ok(self.record(
            value,
            Op::LayerNorm(Box::new(saved)),
            &[self.id, gamma.id, beta.id],
        ))
    }

    /// Mean binary cross-entropy of `σ(self)` against `target`, evaluated
    /// from the logits in the numerically stable form.
    pub fn bce_with_logits(&self, target: &[f64]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.numel() != target.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "bce_with_logits",
                    lhs: x.shape().to_vec(),
                    rhs: vec![target.len()],
                });
            }
            let total: f64 = x
                .data()
                .iter()
                .zip(target)
                .map(|(&v, &t)| v.max(0.0) - v * t + (-v.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / target.len() as f64)
        };
        Ok(self.record(
            value,
            Op::BceWithLogits {
                x: self.id,
                target: target.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Cosine similarity between matching rows (last axis) of two tensors.
    /// Norms below `floor` are clamped to `floor`.
    pub fn row_cosine(&self, other: Var<'t>, floor: f64) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("row_cosine", &a, &b)?;
            let cos: Vec<f64> = a
                .rows()
                .zip(b.rows())
                .map(|(ar, br)| {
                    let na = kernels::dot(ar, ar).sqrt().max(floor);
                    let nb = kernels::dot(br, br).sqrt().max(floor);
                    kernels::dot(ar, br) / (na * nb)
                })
                .collect();
            let rows = cos.len();
            Tensor::new(vec![rows], cos)?
        };
        Ok(self.record(
            value,
            Op::RowCosine {
                a: self.id,
                b: other.id,
                floor,
            },
            &[self.id, other.id],
        ))
    }
}
