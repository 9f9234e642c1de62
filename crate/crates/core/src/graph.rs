//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every op is evaluated as it is recorded, so the node list is topologically
//! ordered by construction. [`Graph::backward`] walks it in reverse and returns
//! gradients for the trainable parameters and requested variables only;
//! subgraphs with no trainable ancestor are never differentiated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `kernel / 2`, output `ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Input,
    Variable,
    Param {
        name: String,
        trainable: bool,
    },
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    L2Normalize(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param { .. } => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Gather(..) => "gather",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatRows(_) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Attaches a name used in error messages.
    pub fn label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    fn node_name(&self, v: Var) -> String {
        let n = &self.nodes[v.0];
        match &n.label {
            Some(l) => format!("{}#{} ({l})", n.op.kind(), v.0),
            None => match &n.op {
                Op::Param { name, .. } => format!("param#{} ({name})", v.0),
                op => format!("{}#{}", op.kind(), v.0),
            },
        }
    }

    fn next_name(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never differentiated.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// A named parameter. Gradients of parameters registered with the same
    /// name are summed; non-trainable parameters get no gradient entry.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        self.push(
            value.clone(),
            Op::Param {
                name: name.to_string(),
                trainable,
            },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                self.next_name("matmul"),
                format!(
                    "{} is {sa:?}, {} is {sb:?}",
                    self.node_name(a),
                    self.node_name(b)
                ),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(
                self.next_name("transpose"),
                format!("{} is {s:?}, expected rank 2", self.node_name(a)),
            ));
        }
        let out = transpose_data(self.value(a).data(), s[0], s[1]);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], out)?, Op::Transpose(a), rg))
    }

    /// Adds a `[n]` bias to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape(
                self.next_name("add_bias"),
                format!(
                    "{} is {sx:?}, bias {} is {sb:?}",
                    self.node_name(x),
                    self.node_name(b)
                ),
            ));
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (v, bv) in chunk.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [O, C, kh, kw]` and an
    /// optional per-channel bias `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let bad = |g: &Graph, detail: String| Err(Error::shape(g.next_name("conv2d"), detail));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return bad(
                self,
                format!(
                    "input {} is {sx:?}, weight {} is {sw:?}",
                    self.node_name(x),
                    self.node_name(w)
                ),
            );
        }
        if stride == 0 {
            return bad(self, "stride must be positive".into());
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return bad(
                    self,
                    format!(
                        "bias {} is {:?}, expected [{}]",
                        self.node_name(b),
                        self.shape(b),
                        sw[0]
                    ),
                );
            }
        }
        let (kh, kw) = (sw[2], sw[3]);
        let pad = match padding {
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return bad(self, "same padding needs an odd square kernel".into());
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return bad(self, format!("kernel {kh}x{kw} larger than input {sx:?}"));
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - kh) / stride + 1,
            out_w: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let o = sw[0];
        let mut out = vec![0.0; sx[0] * o * geom.out_h * geom.out_w];
        kernels::conv2d_forward(
            &geom,
            sx[0],
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let t = Tensor::new(vec![sx[0], o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// Max over a channel group and a `kernel`×`kernel` window with the given
    /// stride on `[B, C, H, W]`; `channel_group = 1` is plain spatial pooling.
    pub fn max_pool(
        &mut self,
        x: Var,
        channel_group: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4
            || channel_group == 0
            || !s[1].is_multiple_of(channel_group)
            || kernel == 0
            || stride == 0
        {
            return Err(Error::shape(
                self.next_name("max_pool"),
                format!(
                    "{} is {s:?}; channel group {channel_group}, kernel {kernel}, stride {stride}",
                    self.node_name(x)
                ),
            ));
        }
        let geom = PoolGeom::new(s[1], s[2], s[3], channel_group, kernel, stride);
        let mut out = vec![0.0; s[0] * geom.out_channels() * geom.out_h * geom.out_w];
        let argmax = kernels::max_pool_forward(&geom, s[0], self.value(x).data(), &mut out);
        let t = Tensor::new(vec![s[0], geom.out_channels(), geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    /// Max over adjacent channel pairs `(2k, 2k+1)`.
    pub fn maxout(&mut self, x: Var) -> Result<Var> {
        self.max_pool(x, 2, 1, 1)
    }

    /// 2×2 spatial max with stride 2 combined with channel-pair max.
    pub fn vmax_pool(&mut self, x: Var) -> Result<Var> {
        self.max_pool(x, 2, 2, 2)
    }

    /// Non-overlapping `kernel`×`kernel` average pooling on `[B, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape(
                self.next_name("avg_pool"),
                format!("{} is {s:?}, kernel {kernel}", self.node_name(x)),
            ));
        }
        let (oh, ow) = (s[2] / kernel, s[3] / kernel);
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        kernels::avg_pool_forward(
            s[0] * s[1],
            s[2],
            s[3],
            kernel,
            self.value(x).data(),
            &mut out,
        );
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            Op::AvgPool { x, kernel },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape).map_err(|e| {
            Error::shape(
                self.next_name("reshape"),
                format!("{}: {e}", self.node_name(x)),
            )
        })?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    fn rowwise(&self, x: Var, kind: &str) -> Result<usize> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(
                self.next_name(kind),
                format!("{} is {s:?}, expected [batch, ...]", self.node_name(x)),
            ));
        }
        Ok(*s.last().unwrap())
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.rowwise(x, "softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.rowwise(x, "log_softmax")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Natural log; every input value must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Numerical(format!(
                "log of non-positive value {bad} at {}",
                self.node_name(x)
            )));
        }
        let out = self.value(x).map(f64::ln);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Scales every last-dimension row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.rowwise(x, "l2_normalize")?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Numerical(format!(
                    "l2_normalize of a zero row at {}",
                    self.node_name(x)
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::L2Normalize(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, kind: &str) -> Result<Tensor> {
        if !same_shape(self.value(a), self.value(b)) {
            return Err(Error::shape(
                self.next_name(kind),
                format!(
                    "{} is {:?}, {} is {:?}",
                    self.node_name(a),
                    self.shape(a),
                    self.node_name(b),
                    self.shape(b)
                ),
            ));
        }
        Ok(self.value(a).clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.binary(a, b, "add")?;
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.binary(a, b, "sub")?;
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.binary(a, b, "mul")?;
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has same shape")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums each leading-dimension slice: `[B, ...] -> [B]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.rowwise(x, "sum_rows")?;
        let t = self.value(x);
        let sums: Vec<f64> = t.rows().map(|r| r.iter().sum()).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(sums), Op::SumRows(x), rg))
    }

    /// Picks column `idx[i]` of row `i` of a `[B, C]` tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape(
                self.next_name("gather"),
                format!("{} is {s:?}, {} indices", self.node_name(x), idx.len()),
            ));
        }
        let t = self.value(x);
        let picked = idx.iter().enumerate().map(|(r, &c)| t.row(r)[c]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(picked), Op::Gather(x, idx), rg))
    }

    /// Rows `idx` of `x` (along the leading dimension), in that order.
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape(
                self.next_name("select_rows"),
                format!("{} is {s:?}, indices {idx:?}", self.node_name(x)),
            ));
        }
        let t = self.value(x);
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let mut shape = s.clone();
        shape[0] = idx.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SelectRows(x, idx), rg))
    }

    /// Stacks tensors along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Empty("concat_rows with no parts".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    self.next_name("concat_rows"),
                    format!("{} is {s:?}, expected [_, {tail:?}]", self.node_name(p)),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Variable => {
                    out.vars.insert(Var(i), g);
                }
                Op::Param { name, trainable } => {
                    if *trainable {
                        match out.params.get_mut(name) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                out.params.insert(name.clone(), g);
                            }
                        }
                    }
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Variable | Op::Param { .. } => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let d = transpose_data(g.data(), s[0], s[1]);
                self.accumulate(grads, *a, Tensor::new(vec![s[1], s[0]], d).unwrap());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let o = tw.shape()[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; tx.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; tw.len()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![0.0; o]);
                kernels::conv2d_backward(
                    geom,
                    batch,
                    o,
                    tx.data(),
                    tw.data(),
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), dw).unwrap());
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *dv *= slope;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(self.shape(*x));
                let dd = d.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dd[idx] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::AvgPool { x, kernel } => {
                let s = self.shape(*x);
                let mut d = Tensor::zeros(s);
                kernels::avg_pool_backward(
                    s[0] * s[1],
                    s[2],
                    s[3],
                    *kernel,
                    g.data(),
                    d.data_mut(),
                );
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x).to_vec()).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = yv * (*dv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSoftmax(x) => {
                let n = *y.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv -= yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let mut d = g.clone();
                for (dv, xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    *dv /= xv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2Normalize(x) => {
                let n = *y.shape().last().unwrap();
                let mut d = g.clone();
                let xs = self.value(*x).data();
                for ((drow, yrow), xrow) in d
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(xs.chunks(n))
                {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = (*dv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (dv, bv) in d.data_mut().iter_mut().zip(self.value(*b).data()) {
                        *dv *= bv;
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let mut d = g.clone();
                    for (dv, av) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *dv *= av;
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item()));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::SumRows(x) => {
                let s = self.shape(*x);
                let w = self.value(*x).row_width();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv, w))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), data).unwrap());
            }
            Op::Gather(x, idx) => {
                let s = self.shape(*x);
                let mut d = Tensor::zeros(s);
                let n = s[1];
                for (r, (&c, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    d.data_mut()[r * n + c] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::SelectRows(x, idx) => {
                let mut d = Tensor::zeros(self.shape(*x));
                let w = d.row_width();
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * w..(k + 1) * w];
                    for (dv, sv) in d.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                        *dv += sv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let d = Tensor::new(
                            self.shape(p).to_vec(),
                            g.data()[offset..offset + len].to_vec(),
                        )
                        .unwrap();
                        self.accumulate(grads, p, d);
                    }
                    offset += len;
                }
            }
        }
    }
}

fn transpose_data(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
