use rand::Rng;

use super::kernels::{self, ConvGeom, Padding};
use super::{validate_shape, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operators accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Sigmoid,
    Scale(f64),
}

/// Discriminant of a recorded op, for structural assertions on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Sigmoid,
    Scale,
    MatMul,
    Conv2d,
    DepthwiseConv2d,
    Softmax,
    LayerNorm,
    Concat,
    Reshape,
    Transpose,
    Slice,
    Sum,
    Mean,
    AddTrailing,
    MulTrailing,
    ExpandLeading,
    Dropout,
    Custom(&'static str),
}

/// Backward rule of a custom op: `(input values, output value, output grad)`
/// to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
        cout: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        extents: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
        full: usize,
        outer: usize,
        inner: usize,
    },
    Reduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    ExpandLeading {
        x: Var,
        copies: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
    op: Op,
}

/// What one [`Tape::backward`] call did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Records iterated over, each exactly once.
    pub visited: usize,
    /// Records that received a gradient and pushed it to their inputs.
    pub propagated: usize,
}

/// Append-only record of a forward computation.
///
/// Every op validates its inputs, computes its value eagerly and stores what
/// its backward rule needs. Nodes are created in topological order by
/// construction, so [`Tape::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that collects gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        match &self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reduce { mean: false, .. } => OpKind::Sum,
            Op::Reduce { mean: true, .. } => OpKind::Mean,
            Op::AddTrailing(..) => OpKind::AddTrailing,
            Op::MulTrailing(..) => OpKind::MulTrailing,
            Op::ExpandLeading { .. } => OpKind::ExpandLeading,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Custom { name, .. } => OpKind::Custom(name),
        }
    }

    /// Input handles of the op that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddTrailing(a, b)
            | Op::MulTrailing(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x) | Op::Gelu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::Reshape(x) => {
                vec![*x]
            }
            Op::Softmax { x, .. }
            | Op::Transpose { x, .. }
            | Op::Slice { x, .. }
            | Op::Reduce { x, .. }
            | Op::ExpandLeading { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = matches!(op, Elementwise::Add | Elementwise::Sub | Elementwise::Mul);
        match (binary, b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => Ok(self.unary(op, a)),
            (true, None) => Err(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{op:?} needs two operands"),
            }),
            (false, Some(_)) => Err(TensorError::Invalid {
                op: "elementwise",
                msg: format!("{op:?} takes one operand"),
            }),
        }
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match op {
            Elementwise::Add => ("add", |x, y| x + y),
            Elementwise::Sub => ("sub", |x, y| x - y),
            Elementwise::Mul => ("mul", |x, y| x * y),
            _ => unreachable!(),
        };
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rec = match op {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, &[a, b], rec))
    }

    fn unary(&mut self, op: Elementwise, a: Var) -> Var {
        let va = self.value(a);
        let f: Box<dyn Fn(f64) -> f64> = match op {
            Elementwise::Relu => Box::new(|x: f64| x.max(0.0)),
            Elementwise::Gelu => Box::new(gelu),
            Elementwise::Sigmoid => Box::new(sigmoid),
            Elementwise::Scale(s) => Box::new(move |x| x * s),
            _ => unreachable!(),
        };
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| f(x)).collect(),
        };
        let rec = match op {
            Elementwise::Relu => Op::Relu(a),
            Elementwise::Gelu => Op::Gelu(a),
            Elementwise::Sigmoid => Op::Sigmoid(a),
            Elementwise::Scale(s) => Op::Scale(a, s),
            _ => unreachable!(),
        };
        self.push(value, &[a], rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Elementwise::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Elementwise::Scale(s), a)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a[..., M, K] · b[..., K, N]` with identical leading extents, or a
    /// 2-D `b[K, N]` shared across all leading positions of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = sb.len() == 2;
        if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if shared_b {
            // Fold the leading axes into rows.
            kernels::gemm(da, db, batch * m, k, n)
        } else {
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                out.extend(kernels::gemm(
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            out
        };
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            &[a, b],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    /// `x[..., K] · w[K, N]`, the token-wise linear map.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: sx,
                right: sw,
            });
        }
        if sx.len() >= 2 {
            return self.matmul(x, w);
        }
        let row = self.reshape(x, &[1, sx[0]])?;
        let out = self.matmul(row, w)?;
        self.reshape(out, &[sw[1]])
    }

    // ---- convolution -------------------------------------------------

    /// NHWC convolution, `x[B,H,W,Cin] ⊛ w[k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], stride, padding)?;
        let cout = sw[3];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let kk = geom.k * geom.k * geom.cin;
        let data = kernels::gemm(&cols, self.value(w).data(), geom.positions(), kk, cout);
        let value = Tensor::new(vec![geom.batch, geom.oh, geom.ow, cout], data)?;
        Ok(self.push(
            value,
            &[x, w],
            Op::Conv2d {
                x,
                w,
                geom,
                cols,
                cout,
            },
        ))
    }

    /// Per-channel NHWC convolution, `x[B,H,W,C] ⊛ w[k,k,C]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sw[0] != sw[1] || sw[2] != sx[3] {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                left: sx,
                right: sw,
            });
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], stride, padding)?;
        let data = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(vec![geom.batch, geom.oh, geom.ow, geom.cin], data)?;
        Ok(self.push(value, &[x, w], Op::Depthwise { x, w, geom }))
    }

    // ---- normalisation -----------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalises over the last axis, then applies `gamma`/`beta` of that extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape[shape.len() - 1];
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {p} outside [0, 1)"),
            });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, &[x], Op::Dropout { x, mask }))
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let base = self.shape(first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in inputs.iter().zip(&extents) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                extents,
                outer,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel = validate_shape(shape)?;
        let src = self.value(x);
        if numel != src.numel() {
            return Err(TensorError::ElementCount {
                op: "reshape",
                expected: src.numel(),
                got: numel,
            });
        }
        let value = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect::<Vec<_>>();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            &[x],
            Op::Transpose {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} invalid for extent {}", shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let len = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            &[x],
            Op::Slice {
                x,
                start,
                len,
                full,
                outer,
                inner,
            },
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(if mean { "mean" } else { "sum" }, axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            &[x],
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                mean,
            },
        ))
    }

    /// Sums out `axis` (dropping it; a rank-1 input reduces to `[1]`).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    fn trailing(&mut self, x: Var, b: Var, mul: bool) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(TensorError::ShapeMismatch {
                op: if mul { "mul_trailing" } else { "add_trailing" },
                left: sx,
                right: sb,
            });
        }
        let (dx, db) = (self.value(x).data(), self.value(b).data());
        let nb = db.len();
        let data = dx
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * db[i % nb] } else { v + db[i % nb] })
            .collect();
        let value = Tensor::new(sx, data)?;
        let op = if mul {
            Op::MulTrailing(x, b)
        } else {
            Op::AddTrailing(x, b)
        };
        Ok(self.push(value, &[x, b], op))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x` (biases, positions).
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        self.trailing(x, b, false)
    }

    /// `x * g` where `g`'s shape equals the trailing axes of `x` (per-channel scale).
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        self.trailing(x, g, true)
    }

    /// Repeats `x` to shape `lead ++ x.shape`.
    pub fn expand_leading(&mut self, x: Var, lead: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(src.shape());
        let copies = validate_shape(lead)?;
        let data = src.data().repeat(copies);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, &[x], Op::ExpandLeading { x, copies }))
    }

    /// Records an op whose value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        self.push(
            value,
            inputs,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; every gradient-requiring leaf ends up with a gradient, zero if
    /// the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardStats> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut stats = BackwardStats {
            visited: 0,
            propagated: 0,
        };
        for id in (0..=loss.0).rev() {
            stats.visited += 1;
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            stats.propagated += 1;
            for (input, gin) in self.local_grads(id, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gin);
                }
            }
        }
        for (id, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b),
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data: g,
                    })
                }
            }
        }
        Ok(stats)
    }

    /// Vector-Jacobian products of node `id` for output gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Gelu(x) => vec![(
                *x,
                g.iter().zip(val(*x)).map(|(g, &x)| g * gelu_grad(x)).collect(),
            )],
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect(),
            )],
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| v * s).collect())],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                if *shared_b {
                    let rows = batch * m;
                    vec![
                        (*a, kernels::gemm_nt(g, vb, rows, k, n)),
                        (*b, kernels::gemm_tn(va, g, rows, k, n)),
                    ]
                } else {
                    let mut ga = Vec::with_capacity(va.len());
                    let mut gb = Vec::with_capacity(vb.len());
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        ga.extend(kernels::gemm_nt(gi, bi, m, k, n));
                        gb.extend(kernels::gemm_tn(ai, gi, m, k, n));
                    }
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                cols,
                cout,
            } => {
                let kk = geom.k * geom.k * geom.cin;
                let p = geom.positions();
                let dw = kernels::gemm_tn(cols, g, p, kk, *cout);
                let dcols = kernels::gemm_nt(g, val(*w), p, kk, *cout);
                vec![(*x, kernels::col2im(&dcols, geom)), (*w, dw)]
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = kernels::depthwise_backward(val(*x), val(*w), g, geom);
                vec![(*x, dx), (*w, dw)]
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gx = 0.0;
                    let mut sum_gxx = 0.0;
                    for j in 0..d {
                        let gx = gr[j] * gam[j];
                        sum_gx += gx;
                        sum_gxx += gx * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let gx = gr[j] * gam[j];
                        dx[r * d + j] =
                            inv * (gx - sum_gx / d as f64 - xr[j] * sum_gxx / d as f64);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Concat {
                inputs,
                extents,
                outer,
                inner,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for (&v, &e) in inputs.iter().zip(extents) {
                    let mut gi = Vec::with_capacity(outer * e * inner);
                    for o in 0..*outer {
                        let from = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[from..from + e * inner]);
                    }
                    offset += e;
                    out.push((v, gi));
                }
                out
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Transpose { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*x, kernels::permute(g, node.value.shape(), &inverse))]
            }
            Op::Slice {
                x,
                start,
                len,
                full,
                outer,
                inner,
            } => {
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..*outer {
                    let to = (o * full + start) * inner;
                    dx[to..to + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                mean,
            } => {
                let s = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..*outer {
                    for _ in 0..*len {
                        dx.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * s));
                    }
                }
                vec![(*x, dx)]
            }
            Op::AddTrailing(x, b) => {
                let nb = val(*b).len();
                let mut db = vec![0.0; nb];
                for (i, v) in g.iter().enumerate() {
                    db[i % nb] += v;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulTrailing(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let ns = vs.len();
                let mut ds = vec![0.0; ns];
                let mut dx = vec![0.0; g.len()];
                for (i, v) in g.iter().enumerate() {
                    dx[i] = v * vs[i % ns];
                    ds[i % ns] += v * vx[i];
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::ExpandLeading { x, copies } => {
                let n = g.len() / copies;
                let mut dx = vec![0.0; n];
                for c in 0..*copies {
                    for (d, v) in dx.iter_mut().zip(&g[c * n..(c + 1) * n]) {
                        *d += v;
                    }
                }
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())]
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                backward(&vals, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|gi| (v, gi)))
                    .collect()
            }
        }
    }
}
