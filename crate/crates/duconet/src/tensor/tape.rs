//! The autodiff tape.
//!
//! Ops validate shapes, compute values eagerly and record how each node was
//! produced. Nodes are created in topological order, so the backward pass is
//! a single reverse sweep over node indices; every node is visited once and
//! gradient accumulation order is fixed, which makes repeated backward calls
//! bit-identical.

use crate::color;
use crate::{Error, Result};

use super::ops::{self, ConvDims};
use super::Tensor;

/// Handle to a node on a [`Tape`]. Valid only for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulChannelMap { x: Var, map: Var },
    Affine { x: Var, scale: f64 },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize, end: usize },
    AddChannelBias { x: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, dims: ConvDims },
    AvgPoolGlobal(Var),
    AvgPool2(Var),
    FullyConnected { x: Var, w: Var, b: Var },
    SoftmaxChannels(Var),
    UpsampleNearest { x: Var, factor: usize },
    KernelModulate { base: Var, scales: Var },
    KernelDemodulate { kernels: Var, eps: f64 },
    MaskBlend { fg: Var, bg: Var, mask: Var },
    L1Loss { pred: Var, target: Var },
    LabNormToRgb(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for the grad-enabled leaves of one backward pass.
pub struct Gradients {
    leaf_grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places a tensor on the tape. It becomes a differentiable leaf when
    /// `grad_enabled` is set on the tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.grad_enabled();
        self.push(t, Op::Leaf, needs)
    }

    /// Places a tensor on the tape with gradient tracking forced off.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// x[N,C,H,W] * map[N,1,H,W], the map broadcast over channels.
    pub fn mul_channel_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("mul_channel_map")?;
        let (mn, mc, mh, mw) = self.value(map).dims4("mul_channel_map")?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch {
                op: "mul_channel_map",
                detail: format!("x {:?}, map {:?}", self.value(x).shape(), self.value(map).shape()),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for nn in 0..n {
            let m = &self.value(map).data()[nn * hw..(nn + 1) * hw];
            for cc in 0..c {
                let xs = &self.value(x).data()[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
                let os = &mut out.data_mut()[(nn * c + cc) * hw..(nn * c + cc + 1) * hw];
                for ((o, xv), mv) in os.iter_mut().zip(xs).zip(m) {
                    *o = xv * mv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(map);
        Ok(self.push(out, Op::MulChannelMap { x, map }, needs))
    }

    /// scale * x + offset, elementwise with constants.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| scale * v + offset).collect();
        let value = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Affine { x, scale }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| stable_sigmoid(v)).collect();
        let value = Tensor::new(self.value(x).shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_channels", detail: "no inputs".into() });
        }
        let (n, _, h, w) = self.value(parts[0]).dims4("concat_channels")?;
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!(
                        "incompatible shapes {:?} and {:?}",
                        self.value(parts[0]).shape(),
                        self.value(p).shape()
                    ),
                });
            }
            c_total += pc;
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for nn in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let pc = self.value(p).shape()[1];
                let src = &self.value(p).data()[nn * pc * hw..(nn + 1) * pc * hw];
                out.data_mut()[(nn * c_total + c_off) * hw..(nn * c_total + c_off + pc) * hw]
                    .copy_from_slice(src);
                c_off += pc;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), needs))
    }

    /// Channel slice x[:, start..end] of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_channels",
                detail: format!("range {}..{} out of {} channels", start, end, c),
            });
        }
        let hw = h * w;
        let oc = end - start;
        let mut out = Tensor::zeros(&[n, oc, h, w]);
        for nn in 0..n {
            let src = &self.value(x).data()[(nn * c + start) * hw..(nn * c + end) * hw];
            out.data_mut()[nn * oc * hw..(nn + 1) * oc * hw].copy_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceChannels { x, start, end }, needs))
    }

    /// x[N,C,H,W] + bias[C] broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("add_channel_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                detail: format!("bias {:?} for {} channels", self.value(bias).shape(), c),
            });
        }
        let hw = h * w;
        let mut out = self.value(x).clone();
        for nn in 0..n {
            for cc in 0..c {
                let b = self.value(bias).data()[cc];
                for v in &mut out.data_mut()[(nn * c + cc) * hw..(nn * c + cc + 1) * hw] {
                    *v += b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddChannelBias { x, bias }, needs))
    }

    /// Cross-correlation of input[N,C,H,W] with kernel[O,C,k,k], zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let dims = ops::conv2d_dims(
            "conv2d",
            self.value(input),
            self.value(kernel).shape(),
            false,
            stride,
            padding,
        )?;
        let out = ops::conv2d_forward(self.value(input), self.value(kernel), &dims);
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(out, Op::Conv2d { input, kernel, dims }, needs))
    }

    /// Like [`Tape::conv2d`] with stride 1 and one kernel per batch sample:
    /// kernels[N,O,C,k,k].
    pub fn conv2d_per_sample(&mut self, input: Var, kernels: Var, padding: usize) -> Result<Var> {
        let dims = ops::conv2d_dims(
            "conv2d_per_sample",
            self.value(input),
            self.value(kernels).shape(),
            true,
            1,
            padding,
        )?;
        let out = ops::conv2d_forward(self.value(input), self.value(kernels), &dims);
        let needs = self.needs(input) || self.needs(kernels);
        Ok(self.push(out, Op::Conv2d { input, kernel: kernels, dims }, needs))
    }

    /// Mean over the spatial axes: [N,C,H,W] -> [N,C].
    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool_global_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPoolGlobal(x), needs))
    }

    /// Mean over each 2x2 spatial block: [N,C,H,W] -> [N,C,H/2,W/2].
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = ops::avg_pool2_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool2(x), needs))
    }

    /// x[N,D_in] * w[D_out,D_in]^T + b[D_out].
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::fully_connected_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::FullyConnected { x, w, b }, needs))
    }

    /// Softmax across the channel axis at every (sample, pixel).
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_channels_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxChannels(x), needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_nearest_forward(self.value(x), factor)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::UpsampleNearest { x, factor }, needs))
    }

    /// base[O,I,k,k] scaled per sample by scales[N,I] -> [N,O,I,k,k].
    pub fn kernel_modulate(&mut self, base: Var, scales: Var) -> Result<Var> {
        let out = ops::kernel_modulate_forward(self.value(base), self.value(scales))?;
        let needs = self.needs(base) || self.needs(scales);
        Ok(self.push(out, Op::KernelModulate { base, scales }, needs))
    }

    /// Normalizes kernels[N,O,I,k,k] to unit energy per (sample, out channel).
    pub fn kernel_demodulate(&mut self, kernels: Var, eps: f64) -> Result<Var> {
        let out = ops::kernel_demodulate_forward(self.value(kernels), eps)?;
        let needs = self.needs(kernels);
        Ok(self.push(out, Op::KernelDemodulate { kernels, eps }, needs))
    }

    /// mask∘fg + (1−mask)∘bg with fg,bg[N,C,H,W] and mask[N,1,H,W] broadcast
    /// over channels. Where the mask is exactly 0 (or 1) the output is the
    /// background (or foreground) value bit-for-bit, not a rounded sum.
    pub fn mask_blend(&mut self, fg: Var, bg: Var, mask: Var) -> Result<Var> {
        self.same_shape("mask_blend", fg, bg)?;
        let (n, c, h, w) = self.value(fg).dims4("mask_blend")?;
        let (mn, mc, mh, mw) = self.value(mask).dims4("mask_blend")?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch {
                op: "mask_blend",
                detail: format!(
                    "fg {:?}, mask {:?}",
                    self.value(fg).shape(),
                    self.value(mask).shape()
                ),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for nn in 0..n {
            let m = &self.value(mask).data()[nn * hw..(nn + 1) * hw];
            for cc in 0..c {
                let off = (nn * c + cc) * hw;
                let fgd = &self.value(fg).data()[off..off + hw];
                let bgd = &self.value(bg).data()[off..off + hw];
                let os = &mut out.data_mut()[off..off + hw];
                for p in 0..hw {
                    os[p] = if m[p] == 0.0 {
                        bgd[p]
                    } else if m[p] == 1.0 {
                        fgd[p]
                    } else {
                        m[p] * fgd[p] + (1.0 - m[p]) * bgd[p]
                    };
                }
            }
        }
        let needs = self.needs(fg) || self.needs(bg) || self.needs(mask);
        Ok(self.push(out, Op::MaskBlend { fg, bg, mask }, needs))
    }

    /// Mean absolute error, a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let n = self.value(pred).numel() as f64;
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(sum / n), Op::L1Loss { pred, target }, needs))
    }

    /// Converts normalized Lab planes [N,3,H,W] to sRGB in [0,1].
    ///
    /// Values clamped at the gamut boundary receive zero gradient.
    pub fn lab_norm_to_rgb(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("lab_norm_to_rgb")?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "lab_norm_to_rgb",
                detail: format!("expected 3 channels, got {}", c),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(self.value(x).shape());
        for nn in 0..n {
            let base = nn * 3 * hw;
            for p in 0..hw {
                let lab = [
                    self.value(x).data()[base + p],
                    self.value(x).data()[base + hw + p],
                    self.value(x).data()[base + 2 * hw + p],
                ];
                let rgb = color::normlab_pixel_to_rgb(lab);
                out.data_mut()[base + p] = rgb[0];
                out.data_mut()[base + hw + p] = rgb[1];
                out.data_mut()[base + 2 * hw + p] = rgb[2];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::LabNormToRgb(x), needs))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for grad-enabled
    /// leaves. The tape is left intact, so this can run repeatedly and always
    /// produces bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        let mut pending: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaf_grads[idx] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut pending, *a, &g);
                    self.accumulate(&mut pending, *b, &g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga: Vec<f64> =
                            g.iter().zip(self.value(*b).data()).map(|(gv, bv)| gv * bv).collect();
                        self.accumulate(&mut pending, *a, &ga);
                    }
                    if self.needs(*b) {
                        let gb: Vec<f64> =
                            g.iter().zip(self.value(*a).data()).map(|(gv, av)| gv * av).collect();
                        self.accumulate(&mut pending, *b, &gb);
                    }
                }
                Op::MulChannelMap { x, map } => {
                    let (n, c, h, w) = (
                        node.value.shape()[0],
                        node.value.shape()[1],
                        node.value.shape()[2],
                        node.value.shape()[3],
                    );
                    let hw = h * w;
                    if self.needs(*x) {
                        let mut gx = vec![0.0; n * c * hw];
                        for nn in 0..n {
                            let m = &self.value(*map).data()[nn * hw..(nn + 1) * hw];
                            for cc in 0..c {
                                let off = (nn * c + cc) * hw;
                                for p in 0..hw {
                                    gx[off + p] = g[off + p] * m[p];
                                }
                            }
                        }
                        self.accumulate(&mut pending, *x, &gx);
                    }
                    if self.needs(*map) {
                        let mut gm = vec![0.0; n * hw];
                        for nn in 0..n {
                            for cc in 0..c {
                                let off = (nn * c + cc) * hw;
                                let xv = &self.value(*x).data()[off..off + hw];
                                let gm_n = &mut gm[nn * hw..(nn + 1) * hw];
                                for p in 0..hw {
                                    gm_n[p] += g[off + p] * xv[p];
                                }
                            }
                        }
                        self.accumulate(&mut pending, *map, &gm);
                    }
                }
                Op::Affine { x, scale } => {
                    let gx: Vec<f64> = g.iter().map(|gv| gv * scale).collect();
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                        .collect();
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::ConcatChannels(parts) => {
                    let (n, c_total, h, w) = (
                        node.value.shape()[0],
                        node.value.shape()[1],
                        node.value.shape()[2],
                        node.value.shape()[3],
                    );
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        if self.needs(p) {
                            let mut gp = vec![0.0; n * pc * hw];
                            for nn in 0..n {
                                gp[nn * pc * hw..(nn + 1) * pc * hw].copy_from_slice(
                                    &g[(nn * c_total + c_off) * hw
                                        ..(nn * c_total + c_off + pc) * hw],
                                );
                            }
                            self.accumulate(&mut pending, p, &gp);
                        }
                        c_off += pc;
                    }
                }
                Op::SliceChannels { x, start, end } => {
                    let (n, c, h, w) = (
                        self.value(*x).shape()[0],
                        self.value(*x).shape()[1],
                        self.value(*x).shape()[2],
                        self.value(*x).shape()[3],
                    );
                    let hw = h * w;
                    let oc = end - start;
                    let mut gx = vec![0.0; n * c * hw];
                    for nn in 0..n {
                        gx[(nn * c + start) * hw..(nn * c + end) * hw]
                            .copy_from_slice(&g[nn * oc * hw..(nn + 1) * oc * hw]);
                    }
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::AddChannelBias { x, bias } => {
                    if self.needs(*x) {
                        self.accumulate(&mut pending, *x, &g);
                    }
                    if self.needs(*bias) {
                        let (n, c, h, w) = (
                            node.value.shape()[0],
                            node.value.shape()[1],
                            node.value.shape()[2],
                            node.value.shape()[3],
                        );
                        let hw = h * w;
                        let mut gb = vec![0.0; c];
                        for nn in 0..n {
                            for (cc, gbv) in gb.iter_mut().enumerate() {
                                *gbv +=
                                    g[(nn * c + cc) * hw..(nn * c + cc + 1) * hw].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(&mut pending, *bias, &gb);
                    }
                }
                Op::Conv2d { input, kernel, dims } => {
                    let mut gin =
                        if self.needs(*input) { Some(vec![0.0; self.value(*input).numel()]) } else { None };
                    let mut gker =
                        if self.needs(*kernel) { Some(vec![0.0; self.value(*kernel).numel()]) } else { None };
                    ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        dims,
                        &g,
                        gin.as_deref_mut(),
                        gker.as_deref_mut(),
                    );
                    if let Some(gin) = gin {
                        self.accumulate(&mut pending, *input, &gin);
                    }
                    if let Some(gker) = gker {
                        self.accumulate(&mut pending, *kernel, &gker);
                    }
                }
                Op::AvgPoolGlobal(x) => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    ops::avg_pool_global_backward(self.value(*x).shape(), &g, &mut gx);
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::AvgPool2(x) => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    ops::avg_pool2_backward(self.value(*x).shape(), &g, &mut gx);
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::FullyConnected { x, w, b } => {
                    let mut gx = if self.needs(*x) { Some(vec![0.0; self.value(*x).numel()]) } else { None };
                    let mut gw = if self.needs(*w) { Some(vec![0.0; self.value(*w).numel()]) } else { None };
                    let mut gb = if self.needs(*b) { Some(vec![0.0; self.value(*b).numel()]) } else { None };
                    ops::fully_connected_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        self.accumulate(&mut pending, *x, &gx);
                    }
                    if let Some(gw) = gw {
                        self.accumulate(&mut pending, *w, &gw);
                    }
                    if let Some(gb) = gb {
                        self.accumulate(&mut pending, *b, &gb);
                    }
                }
                Op::SoftmaxChannels(x) => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    ops::softmax_channels_backward(&node.value, &g, &mut gx);
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::UpsampleNearest { x, factor } => {
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    ops::upsample_nearest_backward(self.value(*x).shape(), *factor, &g, &mut gx);
                    self.accumulate(&mut pending, *x, &gx);
                }
                Op::KernelModulate { base, scales } => {
                    let mut gb = if self.needs(*base) { Some(vec![0.0; self.value(*base).numel()]) } else { None };
                    let mut gs =
                        if self.needs(*scales) { Some(vec![0.0; self.value(*scales).numel()]) } else { None };
                    ops::kernel_modulate_backward(
                        self.value(*base),
                        self.value(*scales),
                        &g,
                        gb.as_deref_mut(),
                        gs.as_deref_mut(),
                    );
                    if let Some(gb) = gb {
                        self.accumulate(&mut pending, *base, &gb);
                    }
                    if let Some(gs) = gs {
                        self.accumulate(&mut pending, *scales, &gs);
                    }
                }
                Op::KernelDemodulate { kernels, eps } => {
                    let mut gk = vec![0.0; self.value(*kernels).numel()];
                    ops::kernel_demodulate_backward(self.value(*kernels), *eps, &g, &mut gk);
                    self.accumulate(&mut pending, *kernels, &gk);
                }
                Op::MaskBlend { fg, bg, mask } => {
                    let (n, c, h, w) = (
                        node.value.shape()[0],
                        node.value.shape()[1],
                        node.value.shape()[2],
                        node.value.shape()[3],
                    );
                    let hw = h * w;
                    let mdata = self.value(*mask).data();
                    if self.needs(*fg) {
                        let mut gf = vec![0.0; n * c * hw];
                        for nn in 0..n {
                            let m = &mdata[nn * hw..(nn + 1) * hw];
                            for cc in 0..c {
                                let off = (nn * c + cc) * hw;
                                for p in 0..hw {
                                    gf[off + p] = g[off + p] * m[p];
                                }
                            }
                        }
                        self.accumulate(&mut pending, *fg, &gf);
                    }
                    if self.needs(*bg) {
                        let mut gb = vec![0.0; n * c * hw];
                        for nn in 0..n {
                            let m = &mdata[nn * hw..(nn + 1) * hw];
                            for cc in 0..c {
                                let off = (nn * c + cc) * hw;
                                for p in 0..hw {
                                    gb[off + p] = g[off + p] * (1.0 - m[p]);
                                }
                            }
                        }
                        self.accumulate(&mut pending, *bg, &gb);
                    }
                    if self.needs(*mask) {
                        let mut gm = vec![0.0; n * hw];
                        for nn in 0..n {
                            for cc in 0..c {
                                let off = (nn * c + cc) * hw;
                                let fgd = &self.value(*fg).data()[off..off + hw];
                                let bgd = &self.value(*bg).data()[off..off + hw];
                                let gm_n = &mut gm[nn * hw..(nn + 1) * hw];
                                for p in 0..hw {
                                    gm_n[p] += g[off + p] * (fgd[p] - bgd[p]);
                                }
                            }
                        }
                        self.accumulate(&mut pending, *mask, &gm);
                    }
                }
                Op::L1Loss { pred, target } => {
                    let scale = g[0] / self.value(*pred).numel() as f64;
                    if self.needs(*pred) {
                        let gp: Vec<f64> = self
                            .value(*pred)
                            .data()
                            .iter()
                            .zip(self.value(*target).data())
                            .map(|(p, t)| sign(p - t) * scale)
                            .collect();
                        self.accumulate(&mut pending, *pred, &gp);
                    }
                    if self.needs(*target) {
                        let gt: Vec<f64> = self
                            .value(*pred)
                            .data()
                            .iter()
                            .zip(self.value(*target).data())
                            .map(|(p, t)| -sign(p - t) * scale)
                            .collect();
                        self.accumulate(&mut pending, *target, &gt);
                    }
                }
                Op::LabNormToRgb(x) => {
                    let (n, _, h, w) = (
                        node.value.shape()[0],
                        node.value.shape()[1],
                        node.value.shape()[2],
                        node.value.shape()[3],
                    );
                    let hw = h * w;
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for nn in 0..n {
                        let base = nn * 3 * hw;
                        for p in 0..hw {
                            let lab = [
                                self.value(*x).data()[base + p],
                                self.value(*x).data()[base + hw + p],
                                self.value(*x).data()[base + 2 * hw + p],
                            ];
                            let grgb = [g[base + p], g[base + hw + p], g[base + 2 * hw + p]];
                            let glab = color::normlab_pixel_vjp(lab, grgb);
                            gx[base + p] += glab[0];
                            gx[base + hw + p] += glab[1];
                            gx[base + 2 * hw + p] += glab[2];
                        }
                    }
                    self.accumulate(&mut pending, *x, &gx);
                }
            }
        }
        Ok(Gradients { leaf_grads })
    }

    fn accumulate(&self, pending: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let slot = pending[v.0].get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (a, b) in slot.iter_mut().zip(contribution) {
            *a += b;
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
