//! Tape-based reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Graph`] records every operation during the forward pass into a
//! linear tape. Nodes are topologically ordered by construction, so
//! [`Graph::backward`] is a single reverse sweep that applies each node's
//! vector-Jacobian rule and accumulates into the input grads. All storage
//! is flat row-major `Vec<f32>`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Handle to a tensor recorded on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphError {
    /// Incompatible operand shapes, with a short description of the op.
    ShapeMismatch { op: &'static str, detail: String },
    /// Convolution output would have non-positive spatial size.
    EmptyOutput { op: &'static str },
    /// Axis out of range for the tensor rank.
    BadAxis { axis: usize, rank: usize },
    /// `backward` called on a tensor that is not a single element.
    NonScalarRoot { elems: usize },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch ({detail})")
            }
            GraphError::EmptyOutput { op } => write!(f, "{op}: non-positive output size"),
            GraphError::BadAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            GraphError::NonScalarRoot { elems } => {
                write!(f, "backward root must be scalar, got {elems} elements")
            }
        }
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddConst(TensorId),
    Scale(TensorId, f32),
    Relu(TensorId),
    Sigmoid(TensorId),
    /// Sum of all elements to a single-element tensor.
    Sum(TensorId),
    /// Sum over all axes but the first: `[N, ...] -> [N]`.
    SumPerBatch(TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    /// `input [..., M] x weight [K, M] + bias [K] -> [..., K]`.
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    Bmm(TensorId, TensorId),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    MaxPool2x2 {
        input: TensorId,
        /// Flat input index of the winning element per output cell.
        argmax: Vec<usize>,
    },
    UpsampleBilinear2x(TensorId),
    Reshape(TensorId),
    /// Concatenation along the channel axis (axis 1) of two NCHW tensors.
    ConcatChannels(TensorId, TensorId),
    /// Tensor scaled by a learnable single-element tensor.
    ScaleBy { input: TensorId, factor: TensorId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. One graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    macs: u64,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), macs: 0 }
    }

    /// Multiply-accumulate count of every conv/linear/bmm recorded so far,
    /// in FLOPs (2 per MAC).
    pub fn flops(&self) -> u64 {
        self.macs
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    /// Gradient buffer populated by [`Graph::backward`], if this node
    /// participates in differentiation.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(shape), data.len(), "leaf data length must match shape");
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> TensorId {
        self.leaf(shape, data, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { shape, data, op, needs_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), GraphError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(GraphError::ShapeMismatch {
                op,
                detail: alloc::format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape,
                    self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.same_shape("sub", a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), needs))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        self.same_shape("div", a, b)?;
        let data = self.zip(a, b, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Div(a, b), needs))
    }

    pub fn add_const(&mut self, a: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::AddConst(a), needs)
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sigmoid(a), needs)
    }

    /// Multiplies every element of `input` by the single element of
    /// `factor`; differentiable in both.
    pub fn scale_by(&mut self, input: TensorId, factor: TensorId) -> Result<TensorId, GraphError> {
        if self.nodes[factor.0].data.len() != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "scale_by",
                detail: alloc::format!("factor shape {:?}", self.nodes[factor.0].shape),
            });
        }
        let c = self.nodes[factor.0].data[0];
        let data: Vec<f32> = self.nodes[input.0].data.iter().map(|x| x * c).collect();
        let needs = self.needs(input) || self.needs(factor);
        Ok(self.push(
            self.nodes[input.0].shape.clone(),
            data,
            Op::ScaleBy { input, factor },
            needs,
        ))
    }

    fn zip(&self, a: TensorId, b: TensorId, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        // f64 accumulator keeps big reductions stable enough for
        // finite-difference probing at f32 precision.
        let s: f64 = self.nodes[a.0].data.iter().map(|&x| x as f64).sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![s as f32], Op::Sum(a), needs)
    }

    pub fn sum_per_batch(&mut self, a: TensorId) -> Result<TensorId, GraphError> {
        let shape = &self.nodes[a.0].shape;
        if shape.is_empty() {
            return Err(GraphError::ShapeMismatch {
                op: "sum_per_batch",
                detail: String::from("rank 0 input"),
            });
        }
        let n = shape[0];
        let per = numel(&shape[1..]);
        let mut out = vec![0f32; n];
        for i in 0..n {
            let s: f64 = self.nodes[a.0].data[i * per..(i + 1) * per]
                .iter()
                .map(|&x| x as f64)
                .sum();
            out[i] = s as f32;
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n], out, Op::SumPerBatch(a), needs))
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, GraphError> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                detail: alloc::format!("{:?} -> {:?}", self.nodes[a.0].shape, shape),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), needs))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(GraphError::ShapeMismatch {
                op: "concat_channels",
                detail: alloc::format!("{sa:?} vs {sb:?}"),
            });
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let hw = sa[2] * sa[3];
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.nodes[a.0].data[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.nodes[b.0].data[i * cb * hw..(i + 1) * cb * hw]);
        }
        let shape = vec![n, ca + cb, sa[2], sa[3]];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::ConcatChannels(a, b), needs))
    }

    // ── softmax ──────────────────────────────────────────────────────

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, GraphError> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(GraphError::BadAxis { axis, rank: shape.len() });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[a.0].data;
        let mut out = vec![0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f32::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(src[base + j * inner]);
                }
                let mut s = 0f32;
                for j in 0..len {
                    let e = libm::expf(src[base + j * inner] - m);
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax { input: a, axis }, needs))
    }

    // ── conv / linear / bmm ──────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<TensorId, GraphError> {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        let bshape = self.nodes[bias.0].shape.clone();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                detail: alloc::format!("input {ishape:?}, weight {wshape:?}"),
            });
        }
        let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, wcin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if wcin != cin || kh != kw || bshape != [cout] {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d",
                detail: alloc::format!("input {ishape:?}, weight {wshape:?}, bias {bshape:?}"),
            });
        }
        assert!(stride >= 1 && dilation >= 1 && kh >= 1);
        let span = dilation * (kh - 1) + 1;
        let oh = (h + 2 * padding).checked_sub(span).map(|v| v / stride + 1);
        let ow = (w + 2 * padding).checked_sub(span).map(|v| v / stride + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => return Err(GraphError::EmptyOutput { op: "conv2d" }),
        };

        let src = &self.nodes[input.0].data;
        let wdat = &self.nodes[weight.0].data;
        let bdat = &self.nodes[bias.0].data;
        let mut out = vec![0f32; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let ob = (ni * cout + co) * oh * ow;
                out[ob..ob + oh * ow].fill(bdat[co]);
                for ci in 0..cin {
                    let ib = (ni * cin + ci) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                            if stride == 1 {
                                // valid oy: 0 <= oy + ky*dilation - padding < h
                                let off_y = ky * dilation;
                                let off_x = kx * dilation;
                                let oy0 = padding.saturating_sub(off_y);
                                let oy1 = (h + padding).saturating_sub(off_y).min(oh);
                                let ox0 = padding.saturating_sub(off_x);
                                let ox1 = (w + padding).saturating_sub(off_x).min(ow);
                                if ox1 <= ox0 {
                                    continue;
                                }
                                let col0 = (ox0 + off_x) - padding;
                                let len = ox1 - ox0;
                                for oy in oy0..oy1 {
                                    let iy = (oy + off_y) - padding;
                                    let irow = ib + iy * w + col0;
                                    let orow = ob + oy * ow + ox0;
                                    for (o, s) in out[orow..orow + len]
                                        .iter_mut()
                                        .zip(&src[irow..irow + len])
                                    {
                                        *o += wv * *s;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = oy * stride + ky * dilation;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let iy = iy - padding;
                                    for ox in 0..ow {
                                        let ix = ox * stride + kx * dilation;
                                        if ix < padding || ix - padding >= w {
                                            continue;
                                        }
                                        out[ob + oy * ow + ox] += wv * src[ib + iy * w + ix - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.macs += 2 * (kh * kw * cin * cout * oh * ow * n) as u64;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![n, cout, oh, ow],
            out,
            Op::Conv2d { input, weight, bias, stride, padding, dilation },
            needs,
        ))
    }

    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, GraphError> {
        let ishape = self.nodes[input.0].shape.clone();
        let wshape = self.nodes[weight.0].shape.clone();
        let bshape = self.nodes[bias.0].shape.clone();
        let m = *ishape.last().ok_or(GraphError::ShapeMismatch {
            op: "linear",
            detail: String::from("rank 0 input"),
        })?;
        if wshape.len() != 2 || wshape[1] != m || bshape != [wshape[0]] {
            return Err(GraphError::ShapeMismatch {
                op: "linear",
                detail: alloc::format!("input {ishape:?}, weight {wshape:?}, bias {bshape:?}"),
            });
        }
        let k = wshape[0];
        let rows = numel(&ishape) / m;
        let src = &self.nodes[input.0].data;
        let wdat = &self.nodes[weight.0].data;
        let bdat = &self.nodes[bias.0].data;
        let mut out = vec![0f32; rows * k];
        for r in 0..rows {
            let irow = &src[r * m..(r + 1) * m];
            for kk in 0..k {
                let wrow = &wdat[kk * m..(kk + 1) * m];
                let mut acc = bdat[kk];
                for j in 0..m {
                    acc += wrow[j] * irow[j];
                }
                out[r * k + kk] = acc;
            }
        }
        self.macs += 2 * (rows * k * m) as u64;
        let mut oshape = ishape;
        *oshape.last_mut().unwrap() = k;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(oshape, out, Op::Linear { input, weight, bias }, needs))
    }

    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, GraphError> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(GraphError::ShapeMismatch {
                op: "bmm",
                detail: alloc::format!("{sa:?} x {sb:?}"),
            });
        }
        let (bt, m, kk) = (sa[0], sa[1], sa[2]);
        let nn = sb[2];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![0f32; bt * m * nn];
        for bi in 0..bt {
            let ab = bi * m * kk;
            let bb = bi * kk * nn;
            let ob = bi * m * nn;
            for mi in 0..m {
                for ki in 0..kk {
                    let av = da[ab + mi * kk + ki];
                    let brow = bb + ki * nn;
                    let orow = ob + mi * nn;
                    for ni in 0..nn {
                        out[orow + ni] += av * db[brow + ni];
                    }
                }
            }
        }
        self.macs += 2 * (bt * m * kk * nn) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![bt, m, nn], out, Op::Bmm(a, b), needs))
    }

    // ── pooling / upsampling ─────────────────────────────────────────

    pub fn maxpool2x2(&mut self, input: TensorId) -> Result<TensorId, GraphError> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(GraphError::ShapeMismatch {
                op: "maxpool2x2",
                detail: alloc::format!("need NCHW with even H,W, got {shape:?}"),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = &self.nodes[input.0].data;
        let mut out = vec![0f32; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let ib = nc * h * w;
            let ob = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    // ties go to the first element in row-major order
                    let mut best_idx = ib + (2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ib + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    out[ob + oy * ow + ox] = best;
                    argmax[ob + oy * ow + ox] = best_idx;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            Op::MaxPool2x2 { input, argmax },
            needs,
        ))
    }

    pub fn upsample_bilinear2x(&mut self, input: TensorId) -> Result<TensorId, GraphError> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 {
            return Err(GraphError::ShapeMismatch {
                op: "upsample_bilinear2x",
                detail: alloc::format!("need NCHW, got {shape:?}"),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = &self.nodes[input.0].data;
        let mut out = vec![0f32; n * c * oh * ow];
        for nc in 0..n * c {
            let ib = nc * h * w;
            let ob = nc * oh * ow;
            for oy in 0..oh {
                let (y0, y1, wy) = bilinear_taps(oy, h);
                for ox in 0..ow {
                    let (x0, x1, wx) = bilinear_taps(ox, w);
                    let v = (1.0 - wy) * (1.0 - wx) * src[ib + y0 * w + x0]
                        + (1.0 - wy) * wx * src[ib + y0 * w + x1]
                        + wy * (1.0 - wx) * src[ib + y1 * w + x0]
                        + wy * wx * src[ib + y1 * w + x1];
                    out[ob + oy * ow + ox] = v;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![n, c, oh, ow], out, Op::UpsampleBilinear2x(input), needs))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`. Every `requires_grad` leaf
    /// reachable from the root gets d(root)/d(leaf); contributions from
    /// multiple paths accumulate by addition.
    pub fn backward(&mut self, root: TensorId) -> Result<(), GraphError> {
        let elems = self.nodes[root.0].data.len();
        if elems != 1 {
            return Err(GraphError::NonScalarRoot { elems });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn apply_vjp(&mut self, id: usize, gout: &[f32]) {
        // Destructure so node data and grad buffers borrow independently.
        let Graph { nodes, grads, .. } = self;
        let node = &nodes[id];
        let getg = |grads: &mut Vec<Option<Vec<f32>>>, t: TensorId| -> *mut Vec<f32> {
            let len = nodes[t.0].data.len();
            grads[t.0].get_or_insert_with(|| vec![0.0; len])
        };
        macro_rules! grad_of {
            ($t:expr) => {
                // Inputs always precede this node on the tape, so the
                // pointer stays valid for the body of this call.
                unsafe { &mut *getg(grads, $t) }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    for (g, &v) in gb.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    for (g, &v) in gb.iter_mut().zip(gout) {
                        *g -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * nodes[b.0].data[i];
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * nodes[a.0].data[i];
                    }
                }
            }
            Op::Div(a, b) => {
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] / nodes[b.0].data[i];
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    for i in 0..gout.len() {
                        let bv = nodes[b.0].data[i];
                        gb[i] -= gout[i] * nodes[a.0].data[i] / (bv * bv);
                    }
                }
            }
            Op::AddConst(a) => {
                let ga = grad_of!(*a);
                for (g, &v) in ga.iter_mut().zip(gout) {
                    *g += v;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                let ga = grad_of!(*a);
                for (g, &v) in ga.iter_mut().zip(gout) {
                    *g += c * v;
                }
            }
            Op::Relu(a) => {
                let ga = grad_of!(*a);
                for i in 0..gout.len() {
                    if nodes[a.0].data[i] > 0.0 {
                        ga[i] += gout[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = grad_of!(*a);
                for i in 0..gout.len() {
                    let y = node.data[i];
                    ga[i] += gout[i] * y * (1.0 - y);
                }
            }
            Op::Sum(a) => {
                let ga = grad_of!(*a);
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::SumPerBatch(a) => {
                let per = nodes[a.0].data.len() / gout.len();
                let ga = grad_of!(*a);
                for (i, &v) in gout.iter().enumerate() {
                    for g in &mut ga[i * per..(i + 1) * per] {
                        *g += v;
                    }
                }
            }
            Op::Reshape(a) => {
                let ga = grad_of!(*a);
                for (g, &v) in ga.iter_mut().zip(gout) {
                    *g += v;
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (n, ca, cb) = (sa[0], sa[1], sb[1]);
                let hw = sa[2] * sa[3];
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    for i in 0..n {
                        let src = &gout[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw];
                        for (g, &v) in ga[i * ca * hw..(i + 1) * ca * hw].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    for i in 0..n {
                        let off = i * (ca + cb) * hw + ca * hw;
                        let src = &gout[off..off + cb * hw];
                        for (g, &v) in gb[i * cb * hw..(i + 1) * cb * hw].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            Op::ScaleBy { input, factor } => {
                let c = nodes[factor.0].data[0];
                if nodes[input.0].needs_grad {
                    let gi = grad_of!(*input);
                    for (g, &v) in gi.iter_mut().zip(gout) {
                        *g += c * v;
                    }
                }
                if nodes[factor.0].needs_grad {
                    let mut acc = 0f32;
                    for (i, &v) in gout.iter().enumerate() {
                        acc += v * nodes[input.0].data[i];
                    }
                    let gf = grad_of!(*factor);
                    gf[0] += acc;
                }
            }
            Op::Softmax { input, axis } => {
                let shape = &node.shape;
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = &node.data;
                let ga = grad_of!(*input);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0f32;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += gout[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] += y[idx] * (gout[idx] - dot);
                        }
                    }
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let ga = grad_of!(*input);
                for (o, &src_idx) in argmax.iter().enumerate() {
                    ga[src_idx] += gout[o];
                }
            }
            Op::UpsampleBilinear2x(a) => {
                let (h, w) = (nodes[a.0].shape[2], nodes[a.0].shape[3]);
                let ncs = nodes[a.0].shape[0] * nodes[a.0].shape[1];
                let (oh, ow) = (2 * h, 2 * w);
                let ga = grad_of!(*a);
                for nc in 0..ncs {
                    let ib = nc * h * w;
                    let ob = nc * oh * ow;
                    for oy in 0..oh {
                        let (y0, y1, wy) = bilinear_taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, wx) = bilinear_taps(ox, w);
                            let g = gout[ob + oy * ow + ox];
                            ga[ib + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                            ga[ib + y0 * w + x1] += (1.0 - wy) * wx * g;
                            ga[ib + y1 * w + x0] += wy * (1.0 - wx) * g;
                            ga[ib + y1 * w + x1] += wy * wx * g;
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let m = nodes[weight.0].shape[1];
                let k = nodes[weight.0].shape[0];
                let rows = nodes[input.0].data.len() / m;
                if nodes[input.0].needs_grad {
                    let gi = grad_of!(*input);
                    let wdat = &nodes[weight.0].data;
                    for r in 0..rows {
                        for kk in 0..k {
                            let g = gout[r * k + kk];
                            let wrow = &wdat[kk * m..(kk + 1) * m];
                            let girow = &mut gi[r * m..(r + 1) * m];
                            for j in 0..m {
                                girow[j] += g * wrow[j];
                            }
                        }
                    }
                }
                if nodes[weight.0].needs_grad {
                    let gw = grad_of!(*weight);
                    let idat = &nodes[input.0].data;
                    for r in 0..rows {
                        let irow = &idat[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let g = gout[r * k + kk];
                            let gwrow = &mut gw[kk * m..(kk + 1) * m];
                            for j in 0..m {
                                gwrow[j] += g * irow[j];
                            }
                        }
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = grad_of!(*bias);
                    for r in 0..rows {
                        for kk in 0..k {
                            gb[kk] += gout[r * k + kk];
                        }
                    }
                }
            }
            Op::Bmm(a, b) => {
                let (bt, m, kk) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                let nn = nodes[b.0].shape[2];
                if nodes[a.0].needs_grad {
                    let ga = grad_of!(*a);
                    let db = &nodes[b.0].data;
                    for bi in 0..bt {
                        for mi in 0..m {
                            for ki in 0..kk {
                                let mut acc = 0f32;
                                let grow = bi * m * nn + mi * nn;
                                let brow = bi * kk * nn + ki * nn;
                                for ni in 0..nn {
                                    acc += gout[grow + ni] * db[brow + ni];
                                }
                                ga[bi * m * kk + mi * kk + ki] += acc;
                            }
                        }
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_of!(*b);
                    let da = &nodes[a.0].data;
                    for bi in 0..bt {
                        for mi in 0..m {
                            for ki in 0..kk {
                                let av = da[bi * m * kk + mi * kk + ki];
                                let grow = bi * m * nn + mi * nn;
                                let brow = bi * kk * nn + ki * nn;
                                for ni in 0..nn {
                                    gb[brow + ni] += av * gout[grow + ni];
                                }
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, stride, padding, dilation } => {
                let (stride, padding, dilation) = (*stride, *padding, *dilation);
                let ish = &nodes[input.0].shape;
                let wsh = &nodes[weight.0].shape;
                let (n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                let (cout, kh, kw) = (wsh[0], wsh[2], wsh[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let idat = &nodes[input.0].data;
                let wdat = &nodes[weight.0].data;
                let in_needs = nodes[input.0].needs_grad;
                let w_needs = nodes[weight.0].needs_grad;
                if in_needs || w_needs {
                    // split borrows: take both grads' raw pointers up front
                    let gi: Option<&mut Vec<f32>> = if in_needs { Some(grad_of!(*input)) } else { None };
                    let gw: Option<&mut Vec<f32>> = if w_needs { Some(grad_of!(*weight)) } else { None };
                    let mut gi = gi;
                    let mut gw = gw;
                    for ni in 0..n {
                        for co in 0..cout {
                            let ob = (ni * cout + co) * oh * ow;
                            for ci in 0..cin {
                                let ib = (ni * cin + ci) * h * w;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                                        let wv = wdat[widx];
                                        let mut wacc = 0f32;
                                        if stride == 1 {
                                            let off_y = ky * dilation;
                                            let off_x = kx * dilation;
                                            let oy0 = padding.saturating_sub(off_y);
                                            let oy1 = (h + padding).saturating_sub(off_y).min(oh);
                                            let ox0 = padding.saturating_sub(off_x);
                                            let ox1 = (w + padding).saturating_sub(off_x).min(ow);
                                            if ox1 <= ox0 {
                                                continue;
                                            }
                                            let col0 = (ox0 + off_x) - padding;
                                            let len = ox1 - ox0;
                                            for oy in oy0..oy1 {
                                                let irow = ib + ((oy + off_y) - padding) * w + col0;
                                                let orow = ob + oy * ow + ox0;
                                                for j in 0..len {
                                                    let g = gout[orow + j];
                                                    if let Some(gi) = gi.as_deref_mut() {
                                                        gi[irow + j] += wv * g;
                                                    }
                                                    wacc += g * idat[irow + j];
                                                }
                                            }
                                        } else {
                                            for oy in 0..oh {
                                                let iy = oy * stride + ky * dilation;
                                                if iy < padding || iy - padding >= h {
                                                    continue;
                                                }
                                                for ox in 0..ow {
                                                    let ix = ox * stride + kx * dilation;
                                                    if ix < padding || ix - padding >= w {
                                                        continue;
                                                    }
                                                    let g = gout[ob + oy * ow + ox];
                                                    let ii = ib + (iy - padding) * w + ix - padding;
                                                    if let Some(gi) = gi.as_deref_mut() {
                                                        gi[ii] += wv * g;
                                                    }
                                                    wacc += g * idat[ii];
                                                }
                                            }
                                        }
                                        if let Some(gw) = gw.as_deref_mut() {
                                            gw[widx] += wacc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = grad_of!(*bias);
                    for ni in 0..n {
                        for co in 0..cout {
                            let ob = (ni * cout + co) * oh * ow;
                            let mut acc = 0f32;
                            for v in &gout[ob..ob + oh * ow] {
                                acc += v;
                            }
                            gb[co] += acc;
                        }
                    }
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Source taps and lerp weight for align-corners=false 2x upsampling.
fn bilinear_taps(o: usize, in_len: usize) -> (usize, usize, f32) {
    let s = (o as f32 + 0.5) / 2.0 - 0.5;
    if s <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = s as usize; // floor for s >= 0
    if i0 + 1 >= in_len {
        return (in_len - 1, in_len - 1, 0.0);
    }
    (i0, i0 + 1, s - i0 as f32)
}
