use super::{gemm, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive bias applied to attention scores at masked (PAD) key positions.
pub const ATTENTION_MASK_BIAS: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    #[default]
    GeluTanh,
    /// `x·Φ(x)` with the exact error function.
    GeluErf,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::GeluTanh => "gelu_tanh",
            Activation::GeluErf => "gelu_erf",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu_tanh" | "gelu" => Some(Activation::GeluTanh),
            "gelu_erf" => Some(Activation::GeluErf),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        let half = T::from_f64(0.5);
        match self {
            Activation::GeluTanh => {
                let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let inner = c * (x + T::from_f64(0.044715) * x * x * x);
                half * x * (T::one() + tanh_via_exp(inner))
            }
            Activation::GeluErf => {
                half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let half = T::from_f64(0.5);
        match self {
            Activation::GeluTanh => {
                let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
                let a = T::from_f64(0.044715);
                let t = tanh_via_exp(c * (x + a * x * x * x));
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
            }
            Activation::GeluErf => {
                let cdf =
                    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * half).exp()
                    * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// `tanh` through one `exp`, several times cheaper than the library call.
#[inline]
fn tanh_via_exp<T: Scalar>(y: T) -> T {
    let lim = T::from_f64(20.0);
    if y > lim {
        return T::one();
    }
    if y < -lim {
        return -T::one();
    }
    let e = (y + y).exp();
    (e - T::one()) / (e + T::one())
}

type CustomBackward<T> = Box<dyn Fn(&[T], &[T], &[T]) -> Vec<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Activation(Var, Activation),
    Tanh(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Reshape(Var),
    Custom(Var, CustomBackward<T>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed operations for one forward pass.
///
/// Values are computed eagerly as operations are recorded; [`Tape::backward`]
/// then walks the record once in reverse. A tape supports exactly one
/// backward pass. Only leaves keep their gradients afterwards.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `tensor` as a leaf; it is differentiable when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, rg, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Square(x))
    }

    /// Adds a vector along the last dimension (`x[..., d] + b[d]`).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(d.max(1)) {
            for (v, &c) in row.iter_mut().zip(bias) {
                *v += c;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, value, rg, Op::AddRow(x, b)))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let name = if b_transposed { "matmul_t" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(name, sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = if b_transposed {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != k2 {
            return Err(Error::dim(name, sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), self.value(b), b_transposed, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            },
        ))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` where `b` is stored n×k.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x·w + b` for `x` of shape n×in, `w` in×out and `b` of length out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Gathers rows of a 2-D table: `out[i] = table[ids[i]]`.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dim("rows", shape, &[ids.len()]));
        }
        let (n_rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Input(format!(
                "row index {bad} out of range for table with {n_rows} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Input("rows: empty index list".into()));
        }
        let src = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            rg,
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Shift-stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Input(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if !self.value(x).iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut value = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = value[idx(0)];
                for j in 1..len {
                    max = max.max(value[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (value[idx(j)] - max).exp();
                    value[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    value[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Input(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let src = self.value(x);
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).iter().map(|&v| act.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Activation(x, act))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::GeluTanh)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Tanh(x))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` hold `batch·seq` rows of width `heads·d_k`, heads laid
    /// out side by side. `key_pad[b·seq + j]` set means key `j` of sequence
    /// `b` is padding and receives [`ATTENTION_MASK_BIAS`]. Per head the
    /// output is `softmax(Q·Kᵀ/√d_k + bias)·V`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_pad: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        let total: usize = shape.iter().product();
        let width = *shape.last().unwrap_or(&0);
        let rows = total / width.max(1);
        if batch == 0 || heads == 0 || rows % batch != 0 || width % heads != 0 {
            return Err(Error::dim("attention", &shape, &[batch, heads]));
        }
        let seq = rows / batch;
        if let Some(mask) = key_pad {
            if mask.len() != rows {
                return Err(Error::dim("attention mask", &shape, &[mask.len()]));
            }
        }
        let dk = width / heads;
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let bias = T::from_f64(ATTENTION_MASK_BIAS);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); total];
        let ld = width as isize;
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dk;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                T::gemm_raw(
                    seq,
                    dk,
                    seq,
                    scale,
                    &qv[off..],
                    (ld, 1),
                    &kv[off..],
                    (1, ld),
                    T::zero(),
                    p,
                    (seq as isize, 1),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if let Some(mask) = key_pad {
                        for (j, s) in row.iter_mut().enumerate() {
                            if mask[b * seq + j] {
                                *s += bias;
                            }
                        }
                    }
                    softmax_in_place(row);
                }
                T::gemm_raw(
                    seq,
                    seq,
                    dk,
                    T::one(),
                    p,
                    (seq as isize, 1),
                    &vv[off..],
                    (ld, 1),
                    T::zero(),
                    &mut out[off..],
                    (ld, 1),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// Attention weights of an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.node(v).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (n×c). Rows whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| (t != ignore_index).then_some(t))
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target class {bad} out of range for {c} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let src = self.value(logits);
        if !src.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("cross_entropy"));
        }
        let mut probs = src.to_vec();
        let mut loss = 0.0f64;
        for (i, (row, t)) in probs.chunks_mut(c).zip(&targets).enumerate() {
            let lse = softmax_in_place(row);
            if let Some(t) = *t {
                // lse − x_t stays finite when p_t underflows
                loss += lse - src[i * c + t].to_f64();
            }
        }
        let value = vec![T::from_f64(loss / count as f64)];
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            value,
            rg,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Reshape(x)))
    }

    /// Element-wise op with a caller-supplied backward rule
    /// `backward(x, y, dy) -> dx`.
    pub fn custom(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        backward: impl Fn(&[T], &[T], &[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(x).iter().map(|&v| forward(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, rg, Op::Custom(x, Box::new(backward)))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every differentiable
    /// leaf has a gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new tape".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    continue;
                }
                let Some(g) = grads[i].take() else { continue };
                self.propagate(i, &g, &mut grads);
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !keep {
                *g = None;
            } else if g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of a differentiable leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.as_mut()?.get_mut(v.0)?.take()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                acc(*x, g.iter().zip(self.value(*x)).map(|(&g, &v)| two * g * v).collect());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.to_vec());
                let d = self.value(*b).len();
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    for (s, &v) in db.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*b, db);
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    // dA = G·Bᵀ  (G m×n, B k×n) or G·B when B is stored n×k
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, g, self.value(*b), !*b_transposed, &mut da, false);
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.value(*a);
                    if *b_transposed {
                        // B stored n×k: dB = Gᵀ·A
                        let mut db = vec![T::zero(); n * k];
                        gemm_tn(n, m, k, g, va, &mut db, false);
                        acc(*b, db);
                    } else {
                        // dB = Aᵀ·G
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(k, m, n, va, g, &mut db, false);
                        acc(*b, db);
                    }
                }
            }
            Op::Rows { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (s, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*table, dt);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..*len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xhat.len()];
                let inv_d = T::from_f64(1.0 / d as f64);
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let is = inv_std[r];
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        out[j] = is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Activation(x, act) => acc(
                *x,
                g.iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| g * act.derivative(v))
                    .collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter()
                    .zip(&node.value)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect(),
            ),
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let width = *node.shape.last().unwrap();
                let dk = width / heads;
                let scale = T::from_f64(1.0 / (dk as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dkk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut ds = vec![T::zero(); seq * seq];
                let ld = width as isize;
                let ls = seq as isize;
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * width + h * dk;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let go = &g[off..];
                        // dV = Pᵀ·dO
                        T::gemm_raw(seq, seq, dk, T::one(), p, (1, ls), go, (ld, 1), T::one(), &mut dv[off..], (ld, 1));
                        // dP = dO·Vᵀ
                        T::gemm_raw(seq, dk, seq, T::one(), go, (ld, 1), &vv[off..], (1, ld), T::zero(), &mut ds, (ls, 1));
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut ds[i * seq..(i + 1) * seq];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pp) in dr.iter_mut().zip(pr) {
                                *d = pp * (*d - dot);
                            }
                        }
                        // dQ = scale·dS·K ; dK = scale·dSᵀ·Q
                        T::gemm_raw(seq, seq, dk, scale, &ds, (ls, 1), &kv[off..], (ld, 1), T::one(), &mut dq[off..], (ld, 1));
                        T::gemm_raw(seq, seq, dk, scale, &ds, (1, ls), &qv[off..], (ld, 1), T::one(), &mut dkk[off..], (ld, 1));
                    }
                }
                acc(*q, dq);
                acc(*k, dkk);
                acc(*v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut dl[r * c..(r + 1) * c];
                        for (d, &p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *d = p * scale;
                        }
                        row[t] -= scale;
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Custom(x, back) => acc(*x, back(self.value(*x), &node.value, g)),
        }
    }
}

/// Normalizes `row` in place; returns its log-sum-exp.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> f64 {
    let max = row.iter().copied().fold(row[0], T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max.to_f64() + sum.to_f64().ln()
}
