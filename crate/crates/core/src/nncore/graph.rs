//! Define-by-run reverse-mode autodiff over dense tensors.
//!
//! Every op is evaluated eagerly when it is added, so nodes are stored in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashSet;

use super::{Grads, NnError, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Forward behaviour of the quantizer node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Snap to the nearest level in {-3,-1,1,3}.
    Hard,
    /// Forward `clamp(v, -4, 4)`: the function whose exact derivative is the
    /// straight-through gradient. Used for finite-difference checks.
    Surrogate,
}

/// Quantizer levels.
pub const LEVELS: [f64; 4] = [-3.0, -1.0, 1.0, 3.0];
/// Inputs with `|v|` above this get no straight-through gradient.
pub const STE_CLIP: f64 = 4.0;

/// Nearest level with thresholds −2, 0, 2; ties go to the larger level.
pub fn quantize_level<T: Scalar>(v: T) -> T {
    let v = v.as_f64();
    let q = if v < -2.0 {
        -3.0
    } else if v < 0.0 {
        -1.0
    } else if v < 2.0 {
        1.0
    } else {
        3.0
    };
    T::from_f64(q)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeo {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    // "image" side and "position" side of the im2col mapping
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

#[derive(Clone, Copy, Debug)]
struct PatchGeo {
    h: usize,
    w: usize,
    c: usize,
    p: usize,
}

impl PatchGeo {
    /// Flat image offset of element `j` of patch `k`.
    fn index(&self, k: usize, j: usize) -> usize {
        let cols = self.w / self.p;
        let (r, q) = (k / cols, k % cols);
        let c = j % self.c;
        let px = (j / self.c) % self.p;
        let py = j / (self.c * self.p);
        ((r * self.p + py) * self.w + q * self.p + px) * self.c + c
    }

    fn n_patches(&self) -> usize {
        (self.h / self.p) * (self.w / self.p)
    }

    fn patch_len(&self) -> usize {
        self.p * self.p * self.c
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul,
    Transpose,
    BiasAdd,
    Add,
    Sub,
    Mul,
    Scale(T),
    Tanh,
    Gelu,
    Relu,
    Softmax,
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { geo: ConvGeo, cols: Vec<T> },
    ConvTranspose2d { geo: ConvGeo },
    Reshape,
    Patchify(PatchGeo),
    Unpatchify(PatchGeo),
    SliceCols { start: usize },
    ConcatCols,
    Concat0,
    Quantize,
    ComplexGain(Vec<(T, T)>),
    Clamp { lo: T, hi: T },
    Mse,
    MaskedMse { mask: Vec<T>, factor: T },
    Sum,
    Mean,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::BiasAdd => "bias_add",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Reshape => "reshape",
            Op::Patchify(_) => "patchify",
            Op::Unpatchify(_) => "unpatchify",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Concat0 => "concat0",
            Op::Quantize => "quantize_ste",
            Op::ComplexGain(_) => "complex_gain",
            Op::Clamp { .. } => "clamp",
            Op::Mse => "mse_loss",
            Op::MaskedMse { .. } => "masked_mse_loss",
            Op::Sum => "sum",
            Op::Mean => "mean",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// Empty for parameter nodes, which read through the store.
    value: Vec<T>,
    requires_grad: bool,
}

/// Result of a backward sweep.
pub struct Backward<T> {
    nodes: Vec<Option<Vec<T>>>,
    pub params: Grads<T>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient of the root w.r.t. a node (only for nodes that require grad).
    pub fn wrt(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    frozen: HashSet<String>,
    nodes: Vec<Node<T>>,
}

fn shape_err(node: usize, op: &'static str, detail: String) -> NnError {
    NnError::Shape { node: Some(node), op, detail }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, frozen: HashSet::new(), nodes: Vec::new() }
    }

    /// Parameters in these groups get no gradient (activations still flow through them).
    pub fn with_frozen<S: AsRef<str>>(mut self, groups: &[S]) -> Self {
        self.frozen = groups.iter().map(|g| g.as_ref().to_string()).collect();
        self
    }

    /// The parameter store this graph reads from.
    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(p).data(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node invariant")
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[0]
    }

    fn check(&self, inputs: &[NodeId]) -> Result<(), NnError> {
        let next = self.nodes.len();
        for &i in inputs {
            if i.0 >= next {
                return Err(NnError::Cycle { node: next, input: i.0 });
            }
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<T>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, shape, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    // ---- leaves ----

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { op: Op::Input, inputs: vec![], shape, value: t.into_data(), requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Input whose gradient is recorded in [`Backward::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        let id = self.input(t);
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let t = self.params.get(id);
        let requires_grad = !self.frozen.contains(self.params.group(id));
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: vec![],
            shape: t.shape().to_vec(),
            value: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(self.next_id(), "matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err(self.next_id(), "transpose", format!("{s:?} is not 2-D")));
        }
        let out = transpose_buf(self.value(a), s[0], s[1]);
        Ok(self.push(Op::Transpose, vec![a], vec![s[1], s[0]], out))
    }

    /// `x + b` with `b` broadcast over every leading index of `x`'s last dim.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.check(&[x, b])?;
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err(self.next_id(), "bias_add", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(b);
        let out = self.value(x).chunks(n).flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c)).collect();
        Ok(self.push(Op::BiasAdd, vec![x, b], sx, out))
    }

    /// `x·w + b` for `x:[m,k]`, `w:[k,n]`, `b:[n]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId, NnError> {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w)?;
        self.bias_add(y, b)
    }

    // ---- elementwise ----

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId, NnError> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                self.next_id(),
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a, b], shape, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    fn unary(&mut self, a: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let out = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a], shape, out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let c = T::from_f64(c);
        self.unary(a, Op::Scale(c), |v| v * c)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.unary(a, Op::Tanh, |v| v.tanh())
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        self.unary(a, Op::Gelu, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.unary(a, Op::Relu, |v| v.max(T::zero()))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, NnError> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(a, Op::Clamp { lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Straight-through quantizer onto {-3,-1,1,3}.
    pub fn quantize_ste(&mut self, a: NodeId, mode: QuantMode) -> Result<NodeId, NnError> {
        let clip = T::from_f64(STE_CLIP);
        match mode {
            QuantMode::Hard => self.unary(a, Op::Quantize, quantize_level),
            QuantMode::Surrogate => self.unary(a, Op::Quantize, |v| v.max(-clip).min(clip)),
        }
    }

    /// Multiply consecutive (re, im) pairs by constant complex gains.
    pub fn complex_gain(&mut self, a: NodeId, gains: Vec<(T, T)>) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let x = self.value(a);
        if x.len() != 2 * gains.len() {
            return Err(shape_err(
                self.next_id(),
                "complex_gain",
                format!("{} values for {} gains", x.len(), gains.len()),
            ));
        }
        let mut out = Vec::with_capacity(x.len());
        for (pair, &(gr, gi)) in x.chunks(2).zip(&gains) {
            out.push(gr * pair[0] - gi * pair[1]);
            out.push(gi * pair[0] + gr * pair[1]);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ComplexGain(gains), vec![a], shape, out))
    }

    /// Row softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Ok(self.push(Op::Softmax, vec![a], shape, out))
    }

    /// Layer normalization over the last dimension, with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId, NnError> {
        self.check(&[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                self.next_id(),
                "layer_norm",
                format!("x {shape:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let (g, b) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / n.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { xhat, rstd }, vec![x, gamma, beta], shape, out))
    }

    // ---- convolution ----

    /// 2-D convolution of one `[C,H,W]` map with `w:[O,C,kh,kw]`, `b:[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId, NnError> {
        self.check(&[x, w, b])?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let bad = |d: String| Err(shape_err(self.next_id(), "conv2d", d));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sb != [sw[0]] || stride == 0 {
            return bad(format!("x {sx:?}, w {sw:?}, b {sb:?}, stride {stride}"));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return bad(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geo = ConvGeo { c_in: c, c_out: o, kh, kw, stride, pad, ih: h, iw: wd, oh, ow };
        let ckk = c * kh * kw;
        let mut cols = vec![T::zero(); ckk * oh * ow];
        im2col(self.value(x), c, &geo, &mut cols);
        let mut out = vec![T::zero(); o * oh * ow];
        T::gemm(o, ckk, oh * ow, self.value(w), false, &cols, false, &mut out, false);
        let bv = self.value(b);
        for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + bv[ch]);
        }
        Ok(self.push(Op::Conv2d { geo, cols }, vec![x, w, b], vec![o, oh, ow], out))
    }

    /// Transposed 2-D convolution of `[Cin,H,W]` with `w:[Cin,Cout,kh,kw]`, `b:[Cout]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NnError> {
        self.check(&[x, w, b])?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] || sb != [sw[1]] || stride == 0 {
            return Err(shape_err(
                self.next_id(),
                "conv_transpose2d",
                format!("x {sx:?}, w {sw:?}, b {sb:?}, stride {stride}"),
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[1], sw[2], sw[3]);
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err(self.next_id(), "conv_transpose2d", format!("padding {pad} too large")));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        // im2col geometry: the output map is the "image", the input grid the positions.
        let geo = ConvGeo { c_in: cin, c_out: cout, kh, kw, stride, pad, ih: oh, iw: ow, oh: h, ow: wd };
        let ckk = cout * kh * kw;
        let mut cols = vec![T::zero(); ckk * h * wd];
        T::gemm(ckk, cin, h * wd, self.value(w), true, self.value(x), false, &mut cols, false);
        let mut out = vec![T::zero(); cout * oh * ow];
        col2im(&cols, cout, &geo, &mut out);
        let bv = self.value(b);
        for (ch, plane) in out.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|v| *v = *v + bv[ch]);
        }
        Ok(self.push(Op::ConvTranspose2d { geo }, vec![x, w, b], vec![cout, oh, ow], out))
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err(self.next_id(), "reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(Op::Reshape, vec![a], shape, out))
    }

    /// `[H,W,C]` image to row-major `[N_T, P·P·C]` patch rows.
    pub fn patchify(&mut self, img: NodeId, p: usize) -> Result<NodeId, NnError> {
        self.check(&[img])?;
        let s = self.shape(img).to_vec();
        if s.len() != 3 || p == 0 || s[0] % p != 0 || s[1] % p != 0 {
            return Err(shape_err(self.next_id(), "patchify", format!("{s:?} with patch {p}")));
        }
        let geo = PatchGeo { h: s[0], w: s[1], c: s[2], p };
        let (n, len) = (geo.n_patches(), geo.patch_len());
        let v = self.value(img);
        let mut out = vec![T::zero(); n * len];
        for k in 0..n {
            for j in 0..len {
                out[k * len + j] = v[geo.index(k, j)];
            }
        }
        Ok(self.push(Op::Patchify(geo), vec![img], vec![n, len], out))
    }

    /// Inverse of [`Graph::patchify`] for an `h × w × c` image.
    pub fn unpatchify(&mut self, patches: NodeId, h: usize, w: usize, c: usize, p: usize) -> Result<NodeId, NnError> {
        self.check(&[patches])?;
        let geo = PatchGeo { h, w, c, p };
        let s = self.shape(patches).to_vec();
        if p == 0 || h % p != 0 || w % p != 0 || s != [geo.n_patches(), geo.patch_len()] {
            return Err(shape_err(self.next_id(), "unpatchify", format!("{s:?} into {h}x{w}x{c}/{p}")));
        }
        let (n, len) = (geo.n_patches(), geo.patch_len());
        let v = self.value(patches);
        let mut out = vec![T::zero(); h * w * c];
        for k in 0..n {
            for j in 0..len {
                out[geo.index(k, j)] = v[k * len + j];
            }
        }
        Ok(self.push(Op::Unpatchify(geo), vec![patches], vec![h, w, c], out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err(self.next_id(), "slice_cols", format!("{s:?}[:, {start}..{}]", start + len)));
        }
        let out = self.value(a).chunks(s[1]).flat_map(|r| r[start..start + len].iter().copied()).collect();
        Ok(self.push(Op::SliceCols { start }, vec![a], vec![s[0], len], out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        self.check(parts)?;
        let rows = parts.first().map(|&p| self.shape(p)[0]).unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err(self.next_id(), "concat_cols", format!("part {s:?} with {rows} rows")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let n = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * n..(r + 1) * n]);
            }
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![rows, total], out))
    }

    /// Concatenate along the leading dimension.
    pub fn concat0(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        self.check(parts)?;
        let Some(&first) = parts.first() else {
            return Err(shape_err(self.next_id(), "concat0", "no inputs".into()));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err(self.next_id(), "concat0", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Op::Concat0, parts.to_vec(), shape, out))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` built from primitives.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId, NnError> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = self.softmax(scores)?;
        self.matmul(attn, v)
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let s = self.value(a).iter().copied().sum();
        Ok(self.push(Op::Sum, vec![a], vec![1], vec![s]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        self.check(&[a])?;
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        Ok(self.push(Op::Mean, vec![a], vec![1], vec![s]))
    }

    /// `(1/n)·Σ(pred − target)²`.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, NnError> {
        self.check(&[pred, target])?;
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err(
                self.next_id(),
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let loss = mse_value(self.value(pred), self.value(target), None, T::one());
        Ok(self.push(Op::Mse, vec![pred, target], vec![1], vec![loss]))
    }

    /// `(1/n)·Σ(target − pred·mask)² · n_total/n_unmasked`.
    pub fn masked_mse_loss(
        &mut self,
        pred: NodeId,
        target: NodeId,
        mask: &[T],
        n_total: usize,
        n_unmasked: usize,
    ) -> Result<NodeId, NnError> {
        self.check(&[pred, target])?;
        if self.shape(pred) != self.shape(target) || mask.len() != self.value(pred).len() {
            return Err(shape_err(
                self.next_id(),
                "masked_mse_loss",
                format!("pred {:?}, target {:?}, mask {}", self.shape(pred), self.shape(target), mask.len()),
            ));
        }
        if n_unmasked == 0 {
            return Err(NnError::Invalid("masked_mse_loss: no unmasked patches".into()));
        }
        let factor = T::from_f64(n_total as f64 / n_unmasked as f64);
        let loss = mse_value(self.value(pred), self.value(target), Some(mask), factor);
        Ok(self.push(Op::MaskedMse { mask: mask.to_vec(), factor }, vec![pred, target], vec![1], vec![loss]))
    }

    // ---- backward ----

    /// Reverse sweep from a single-element `root` seeded with gradient 1.
    pub fn backward(&self, root: NodeId) -> Result<Backward<T>, NnError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(root.0, "backward", format!("root {:?} is not a scalar", self.shape(root))));
        }
        self.backward_with(root, vec![T::one()])
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: NodeId, seed: Vec<T>) -> Result<Backward<T>, NnError> {
        if root.0 >= self.nodes.len() {
            return Err(NnError::Invalid(format!("unknown node {}", root.0)));
        }
        if seed.len() != self.value(root).len() {
            return Err(shape_err(root.0, "backward", "seed length differs from root".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Grads::new(self.params.len());
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(p) = node.op {
                params.accumulate(p, &g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            // keep gradients of user-visible leaves
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
            }
        }
        Ok(Backward { nodes: grads, params })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let needs = |i: usize| self.nodes[ins[i].0].requires_grad;
        let mut send = |i: usize, d: Vec<T>| accumulate(grads, ins[i], d);
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul => {
                let (sa, sb) = (self.shape(ins[0]), self.shape(ins[1]));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(0) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.value(ins[1]), true, &mut da, false);
                    send(0, da);
                }
                if needs(1) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(ins[0]), true, g, false, &mut db, false);
                    send(1, db);
                }
            }
            Op::Transpose => {
                let s = &node.shape;
                send(0, transpose_buf(g, s[0], s[1]));
            }
            Op::BiasAdd => {
                let n = *node.shape.last().unwrap();
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    send(1, db);
                }
            }
            Op::Add => {
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    send(1, g.to_vec());
                }
            }
            Op::Sub => {
                if needs(0) {
                    send(0, g.to_vec());
                }
                if needs(1) {
                    send(1, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (self.value(ins[0]), self.value(ins[1]));
                if needs(0) {
                    send(0, g.iter().zip(b).map(|(&d, &y)| d * y).collect());
                }
                if needs(1) {
                    send(1, g.iter().zip(a).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(c) => send(0, g.iter().map(|&d| d * *c).collect()),
            Op::Tanh => send(0, g.iter().zip(&node.value).map(|(&d, &y)| d * (T::one() - y * y)).collect()),
            Op::Gelu => {
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let x = self.value(ins[0]);
                send(
                    0,
                    g.iter()
                        .zip(x)
                        .map(|(&d, &x)| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            d * (half * (T::one() + t) + half * x * dt)
                        })
                        .collect(),
                );
            }
            Op::Relu => {
                let x = self.value(ins[0]);
                send(0, g.iter().zip(x).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect());
            }
            Op::Clamp { lo, hi } => {
                let x = self.value(ins[0]);
                send(
                    0,
                    g.iter().zip(x).map(|(&d, &x)| if x >= *lo && x <= *hi { d } else { T::zero() }).collect(),
                );
            }
            Op::Quantize => {
                let clip = T::from_f64(STE_CLIP);
                let x = self.value(ins[0]);
                send(0, g.iter().zip(x).map(|(&d, &x)| if x.abs() <= clip { d } else { T::zero() }).collect());
            }
            Op::ComplexGain(gains) => {
                // conjugate-transpose of the forward rotation
                let mut dx = Vec::with_capacity(g.len());
                for (pair, &(gr, gi)) in g.chunks(2).zip(gains) {
                    dx.push(gr * pair[0] + gi * pair[1]);
                    dx.push(-gi * pair[0] + gr * pair[1]);
                }
                send(0, dx);
            }
            Op::Softmax => {
                let n = *node.shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(node.value.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(0, dx);
            }
            Op::LayerNorm { xhat, rstd } => {
                let n = *node.shape.last().unwrap();
                let gamma = self.value(ins[1]);
                let nt = T::from_f64(n as f64);
                if needs(0) {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rstd.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dxh = gr[j] * gamma[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xr[j];
                        }
                        let (m1, m2) = (s1 / nt, s2 / nt);
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (gr[j] * gamma[j] - m1 - xr[j] * m2);
                        }
                    }
                    send(0, dx);
                }
                if needs(1) {
                    let mut dg = vec![T::zero(); n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + gr[j] * xr[j];
                        }
                    }
                    send(1, dg);
                }
                if needs(2) {
                    let mut db = vec![T::zero(); n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
                    }
                    send(2, db);
                }
            }
            Op::Conv2d { geo, cols } => {
                let ckk = geo.c_in * geo.kh * geo.kw;
                let npos = geo.oh * geo.ow;
                if needs(1) {
                    let mut dw = vec![T::zero(); geo.c_out * ckk];
                    T::gemm(geo.c_out, npos, ckk, g, false, cols, true, &mut dw, false);
                    send(1, dw);
                }
                if needs(2) {
                    send(2, g.chunks(npos).map(|p| p.iter().copied().sum()).collect());
                }
                if needs(0) {
                    let mut dcols = vec![T::zero(); ckk * npos];
                    T::gemm(ckk, geo.c_out, npos, self.value(ins[1]), true, g, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); geo.c_in * geo.ih * geo.iw];
                    col2im(&dcols, geo.c_in, geo, &mut dx);
                    send(0, dx);
                }
            }
            Op::ConvTranspose2d { geo } => {
                let ckk = geo.c_out * geo.kh * geo.kw;
                let npos = geo.oh * geo.ow;
                let mut dcols = vec![T::zero(); ckk * npos];
                im2col(g, geo.c_out, geo, &mut dcols);
                if needs(0) {
                    let mut dx = vec![T::zero(); geo.c_in * npos];
                    T::gemm(geo.c_in, ckk, npos, self.value(ins[1]), false, &dcols, false, &mut dx, false);
                    send(0, dx);
                }
                if needs(1) {
                    let mut dw = vec![T::zero(); geo.c_in * ckk];
                    T::gemm(geo.c_in, npos, ckk, self.value(ins[0]), false, &dcols, true, &mut dw, false);
                    send(1, dw);
                }
                if needs(2) {
                    let plane = geo.ih * geo.iw;
                    send(2, g.chunks(plane).map(|p| p.iter().copied().sum()).collect());
                }
            }
            Op::Reshape => send(0, g.to_vec()),
            Op::Concat0 => {
                let mut off = 0;
                for i in 0..ins.len() {
                    let n = self.value(ins[i]).len();
                    if needs(i) {
                        send(i, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Patchify(geo) => {
                let (n, len) = (geo.n_patches(), geo.patch_len());
                let mut dx = vec![T::zero(); geo.h * geo.w * geo.c];
                for k in 0..n {
                    for j in 0..len {
                        dx[geo.index(k, j)] = g[k * len + j];
                    }
                }
                send(0, dx);
            }
            Op::Unpatchify(geo) => {
                let (n, len) = (geo.n_patches(), geo.patch_len());
                let mut dx = vec![T::zero(); n * len];
                for k in 0..n {
                    for j in 0..len {
                        dx[k * len + j] = g[geo.index(k, j)];
                    }
                }
                send(0, dx);
            }
            Op::SliceCols { start } => {
                let src = self.shape(ins[0]);
                let (rows, cols) = (src[0], src[1]);
                let len = node.shape[1];
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(0, dx);
            }
            Op::ConcatCols => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for i in 0..ins.len() {
                    let n = self.shape(ins[i])[1];
                    if needs(i) {
                        let mut d = Vec::with_capacity(rows * n);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + n]);
                        }
                        send(i, d);
                    }
                    off += n;
                }
            }
            Op::Sum => {
                let n = self.value(ins[0]).len();
                send(0, vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.value(ins[0]).len();
                send(0, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::Mse => {
                let (p, t) = (self.value(ins[0]), self.value(ins[1]));
                let c = g[0] * T::from_f64(2.0 / p.len() as f64);
                if needs(0) {
                    send(0, p.iter().zip(t).map(|(&a, &b)| c * (a - b)).collect());
                }
                if needs(1) {
                    send(1, p.iter().zip(t).map(|(&a, &b)| c * (b - a)).collect());
                }
            }
            Op::MaskedMse { mask, factor } => {
                let (p, t) = (self.value(ins[0]), self.value(ins[1]));
                let c = g[0] * T::from_f64(2.0 / p.len() as f64) * *factor;
                if needs(0) {
                    send(0, p.iter().zip(t).zip(mask).map(|((&a, &b), &m)| c * (a * m - b) * m).collect());
                }
                if needs(1) {
                    send(1, p.iter().zip(t).zip(mask).map(|((&a, &b), &m)| c * (b - a * m)).collect());
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, d: Vec<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a = *a + b),
        slot @ None => *slot = Some(d),
    }
}

fn mse_value<T: Scalar>(pred: &[T], target: &[T], mask: Option<&[T]>, factor: T) -> T {
    let n = T::from_f64(pred.len() as f64);
    let sum: T = match mask {
        None => pred.iter().zip(target).map(|(&p, &t)| (t - p) * (t - p)).sum(),
        Some(m) => pred
            .iter()
            .zip(target)
            .zip(m)
            .map(|((&p, &t), &m)| {
                let r = t - p * m;
                r * r
            })
            .sum(),
    };
    sum / n * factor
}

fn transpose_buf<T: Copy>(v: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(v.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(v[r * cols + c]);
        }
    }
    out
}

/// Gather `[C·kh·kw, oh·ow]` columns from a `[C, ih, iw]` map.
fn im2col<T: Scalar>(img: &[T], c: usize, geo: &ConvGeo, cols: &mut [T]) {
    let npos = geo.oh * geo.ow;
    for ch in 0..c {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((ch * geo.kh + ky) * geo.kw + kx) * npos;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let dst = &mut cols[row + oy * geo.ow..row + (oy + 1) * geo.ow];
                    if iy < 0 || iy >= geo.ih as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let base = (ch * geo.ih + iy as usize) * geo.iw;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= geo.iw as isize { T::zero() } else { img[base + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into a `[C, ih, iw]` map.
fn col2im<T: Scalar>(cols: &[T], c: usize, geo: &ConvGeo, img: &mut [T]) {
    let npos = geo.oh * geo.ow;
    for ch in 0..c {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((ch * geo.kh + ky) * geo.kw + kx) * npos;
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.ih as isize {
                        continue;
                    }
                    let base = (ch * geo.ih + iy as usize) * geo.iw;
                    for ox in 0..geo.ow {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.iw as isize {
                            img[base + ix as usize] = img[base + ix as usize] + cols[row + oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
