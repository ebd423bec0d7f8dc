//! Forward primitives and their vector-Jacobian products.
//!
//! Each primitive validates shapes, writes its output into the tape arena and
//! records a node carrying whatever context backward needs. Mean/variance and
//! loss reductions run in f64.

use super::{Tape, TensorId};
use crate::error::{Error, Result};

/// Direction of the KL divergence between softened distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(p_teacher || p_student)` — the default.
    TeacherLeading,
    /// `KL(p_student || p_teacher)`.
    StudentLeading,
}

const BN_EPS: f32 = 1e-5;

#[derive(Clone)]
pub(crate) enum Node {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    AddBias { x: TensorId, b: TensorId, out: TensorId },
    Conv2d { x: TensorId, w: TensorId, out: TensorId, stride: usize, pad: usize },
    Relu { x: TensorId, out: TensorId },
    AvgPool { x: TensorId, out: TensorId, window: usize },
    GlobalAvgPool { x: TensorId, out: TensorId },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        xhat: Vec<f32>,
        invstd: Vec<f32>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        out: TensorId,
        mean: Vec<f32>,
        invstd: Vec<f32>,
    },
    ChannelScale { x: TensorId, g: TensorId, out: TensorId },
    ConcatChannels { inputs: Vec<TensorId>, out: TensorId },
    Flatten { x: TensorId, out: TensorId },
    SelectChannels { x: TensorId, out: TensorId, indices: Vec<usize> },
    SoftmaxT { out: TensorId, x: TensorId, tau: f32 },
    CeLoss { logits: TensorId, out: TensorId, probs: Vec<f32>, labels: Vec<usize>, tau: f32 },
    CeSoft { logits: TensorId, out: TensorId, probs: Vec<f32>, targets: Vec<f32>, tau: f32 },
    KdLoss {
        student: TensorId,
        out: TensorId,
        ps: Vec<f32>,
        pt: Vec<f32>,
        tau: f32,
        direction: KlDirection,
    },
    AbsShift { x: TensorId, out: TensorId, shift: f64 },
    Combine { a: TensorId, b: TensorId, wa: f32, wb: f32, out: TensorId },
}

/// Parameters for [`Tape::primitive_apply`].
#[derive(Debug, Clone, Default)]
pub struct PrimitiveCtx {
    pub stride: usize,
    pub pad: usize,
    pub window: usize,
    pub train: bool,
    pub tau: f32,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Splits `[n, c, ...]` into (batch, channels, spatial-size).
fn ncs(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl Tape {
    /// Dynamic entry point over the primitive set. Typed methods below are
    /// what the crate itself uses; this exists for callers that hold an op
    /// name and rejects unknown names.
    pub fn primitive_apply(
        &mut self,
        op: &str,
        inputs: &[TensorId],
        ctx: &PrimitiveCtx,
    ) -> Result<TensorId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(mismatch("primitive_apply", format!("{op} wants {n} inputs, got {}", inputs.len())))
            } else {
                Ok(())
            }
        };
        match op {
            "matmul" => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "add_bias" => {
                want(2)?;
                self.add_bias(inputs[0], inputs[1])
            }
            "conv2d" => {
                want(2)?;
                self.conv2d(inputs[0], inputs[1], ctx.stride, ctx.pad)
            }
            "relu" => {
                want(1)?;
                self.relu(inputs[0])
            }
            "avg_pool2d" => {
                want(1)?;
                self.avg_pool2d(inputs[0], ctx.window)
            }
            "global_avg_pool" => {
                want(1)?;
                self.global_avg_pool(inputs[0])
            }
            "batch_norm" => {
                want(3)?;
                if ctx.train {
                    self.batch_norm_train(inputs[0], inputs[1], inputs[2]).map(|r| r.out)
                } else {
                    Err(Error::Invalid(
                        "eval-mode batch_norm needs running stats; use batch_norm_eval".into(),
                    ))
                }
            }
            "channel_scale" => {
                want(2)?;
                self.channel_scale(inputs[0], inputs[1])
            }
            "concat_channels" => self.concat_channels(inputs),
            "flatten" => {
                want(1)?;
                self.flatten(inputs[0])
            }
            "softmax_temperature" => {
                want(1)?;
                self.softmax_t(inputs[0], ctx.tau)
            }
            other => Err(Error::UnknownPrimitive(other.to_string())),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            // i-k-j order keeps the inner loop contiguous in both b and out.
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let id = self.push_entry(vec![m, n], out);
        self.nodes.push(Node::Matmul { a, b, out: id });
        Ok(id)
    }

    /// Adds a per-channel bias to `[n,c]` or `[n,c,h,w]`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let (_, c, s) = ncs(&sx)
            .ok_or_else(|| mismatch("add_bias", format!("input shape {sx:?}")))?;
        if sb != vec![c] {
            return Err(mismatch("add_bias", format!("bias {sb:?} vs channels {c}")));
        }
        let mut out = self.data(x).to_vec();
        {
            let db = self.data(b);
            for (i, o) in out.iter_mut().enumerate() {
                *o += db[(i / s) % c];
            }
        }
        let id = self.push_entry(sx, out);
        self.nodes.push(Node::AddBias { x, b, out: id });
        Ok(id)
    }

    /// Direct 2-D convolution, odd square kernels, symmetric zero padding.
    /// `x: [n,ci,h,w]`, `w: [co,ci,k,k]`.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, wci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wci != ci {
            return Err(mismatch("conv2d", format!("input channels {ci} vs kernel {wci}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(mismatch("conv2d", format!("kernel must be odd square, got {kh}x{kw}")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch(
                "conv2d",
                format!("spatial {h}x{wd} with pad {pad} too small for kernel {kh}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; n * co * oh * ow];
        {
            let dx = self.data(x);
            let dw = self.data(w);
            for b in 0..n {
                for oc in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0f32;
                            for ic in 0..ci {
                                let wbase = ((oc * ci + ic) * kh) * kw;
                                let xbase = (b * ci + ic) * h;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = (xbase + iy as usize) * wd;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += dx[xrow + ix as usize] * dw[wrow + kx];
                                    }
                                }
                            }
                            out[((b * co + oc) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        let id = self.push_entry(vec![n, co, oh, ow], out);
        self.nodes.push(Node::Conv2d { x, w, out: id, stride, pad });
        Ok(id)
    }

    /// Elementwise max(x, 0); the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let out: Vec<f32> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let id = self.push_entry(shape, out);
        self.nodes.push(Node::Relu { x, out: id });
        Ok(id)
    }

    /// Non-overlapping average pooling with window == stride. Spatial dims
    /// must divide evenly.
    pub fn avg_pool2d(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(mismatch("avg_pool2d", format!("expected 4-d input, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(mismatch(
                "avg_pool2d",
                format!("window {window} does not divide spatial {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let scale = 1.0 / (window * window) as f32;
        let mut out = vec![0.0f32; n * c * oh * ow];
        {
            let dx = self.data(x);
            for b in 0..n {
                for ch in 0..c {
                    let ibase = (b * c + ch) * h;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0f32;
                            for ky in 0..window {
                                let row = (ibase + oy * window + ky) * w + ox * window;
                                for kx in 0..window {
                                    acc += dx[row + kx];
                                }
                            }
                            out[((b * c + ch) * oh + oy) * ow + ox] = acc * scale;
                        }
                    }
                }
            }
        }
        let id = self.push_entry(vec![n, c, oh, ow], out);
        self.nodes.push(Node::AvgPool { x, out: id, window });
        Ok(id)
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(mismatch("global_avg_pool", format!("expected 4-d input, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let scale = 1.0 / (h * w) as f32;
        let mut out = vec![0.0f32; n * c];
        {
            let dx = self.data(x);
            for b in 0..n {
                for ch in 0..c {
                    let base = ((b * c + ch) * h) * w;
                    let mut acc = 0.0f64;
                    for i in 0..h * w {
                        acc += dx[base + i] as f64;
                    }
                    out[b * c + ch] = (acc as f32) * scale;
                }
            }
        }
        let id = self.push_entry(vec![n, c], out);
        self.nodes.push(Node::GlobalAvgPool { x, out: id });
        Ok(id)
    }

    /// Train-mode batch norm over `[n,c]` or `[n,c,h,w]` with per-batch
    /// statistics (biased variance). Returns the batch mean/var so the caller
    /// can fold them into running averages.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<BnTrainOut> {
        let sx = self.shape(x).to_vec();
        let (n, c, s) = ncs(&sx)
            .ok_or_else(|| mismatch("batch_norm", format!("input shape {sx:?}")))?;
        self.check_bn_params("batch_norm", c, gamma, beta)?;
        let m = n * s;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        let mut invstd = vec![0.0f32; c];
        {
            let dx = self.data(x);
            for ch in 0..c {
                let mut acc = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        acc += dx[base + i] as f64;
                    }
                }
                mean[ch] = (acc / m as f64) as f32;
                let mu = mean[ch] as f64;
                let mut vacc = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        let d = dx[base + i] as f64 - mu;
                        vacc += d * d;
                    }
                }
                var[ch] = (vacc / m as f64) as f32;
                invstd[ch] = 1.0 / (var[ch] + BN_EPS).sqrt();
            }
        }
        let mut xhat = vec![0.0f32; n * c * s];
        let mut out = vec![0.0f32; n * c * s];
        {
            let dx = self.data(x);
            let dg = self.data(gamma);
            let db = self.data(beta);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        let h = (dx[base + i] - mean[ch]) * invstd[ch];
                        xhat[base + i] = h;
                        out[base + i] = dg[ch] * h + db[ch];
                    }
                }
            }
        }
        let id = self.push_entry(sx, out);
        self.nodes.push(Node::BatchNormTrain {
            x,
            gamma,
            beta,
            out: id,
            xhat,
            invstd: invstd.clone(),
        });
        Ok(BnTrainOut { out: id, batch_mean: mean, batch_var: var })
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let (n, c, s) = ncs(&sx)
            .ok_or_else(|| mismatch("batch_norm", format!("input shape {sx:?}")))?;
        self.check_bn_params("batch_norm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(mismatch(
                "batch_norm",
                format!("running stats len {} vs channels {c}", running_mean.len()),
            ));
        }
        let invstd: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0f32; n * c * s];
        {
            let dx = self.data(x);
            let dg = self.data(gamma);
            let db = self.data(beta);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        out[base + i] = dg[ch] * (dx[base + i] - running_mean[ch]) * invstd[ch] + db[ch];
                    }
                }
            }
        }
        let id = self.push_entry(sx, out);
        self.nodes.push(Node::BatchNormEval {
            x,
            gamma,
            beta,
            out: id,
            mean: running_mean.to_vec(),
            invstd,
        });
        Ok(id)
    }

    fn check_bn_params(&self, op: &'static str, c: usize, gamma: TensorId, beta: TensorId) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(
                op,
                format!(
                    "gamma {:?} / beta {:?} vs channels {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    /// Multiplies each channel of `[n,c]` or `[n,c,h,w]` by the matching
    /// entry of `g: [c]`.
    pub fn channel_scale(&mut self, x: TensorId, g: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let (_, c, s) = ncs(&sx)
            .ok_or_else(|| mismatch("channel_scale", format!("input shape {sx:?}")))?;
        if self.shape(g) != [c] {
            return Err(mismatch(
                "channel_scale",
                format!("scale {:?} vs channels {c}", self.shape(g)),
            ));
        }
        let mut out = self.data(x).to_vec();
        {
            let dg = self.data(g);
            for (i, o) in out.iter_mut().enumerate() {
                *o *= dg[(i / s) % c];
            }
        }
        let id = self.push_entry(sx, out);
        self.nodes.push(Node::ChannelScale { x, g, out: id });
        Ok(id)
    }

    /// Concatenates along the channel dimension. All inputs must agree on
    /// batch and spatial extents.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(mismatch("concat_channels", "no inputs".into()));
        }
        if inputs.len() == 1 {
            // Still record a node so gradients flow without aliasing.
            let shape = self.shape(inputs[0]).to_vec();
            let data = self.data(inputs[0]).to_vec();
            let id = self.push_entry(shape, data);
            self.nodes.push(Node::ConcatChannels { inputs: inputs.to_vec(), out: id });
            return Ok(id);
        }
        let first = self.shape(inputs[0]).to_vec();
        let (n, _, s) = ncs(&first)
            .ok_or_else(|| mismatch("concat_channels", format!("input shape {first:?}")))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let sh = self.shape(i);
            let (ni, ci, si) = ncs(sh)
                .ok_or_else(|| mismatch("concat_channels", format!("input shape {sh:?}")))?;
            if ni != n || si != s || sh.len() != first.len() {
                return Err(mismatch(
                    "concat_channels",
                    format!("incompatible shapes {first:?} vs {sh:?}"),
                ));
            }
            channels.push(ci);
        }
        let ctot: usize = channels.iter().sum();
        let mut shape = first.clone();
        shape[1] = ctot;
        let mut out = vec![0.0f32; n * ctot * s];
        let mut coff = 0usize;
        for (idx, &inp) in inputs.iter().enumerate() {
            let ci = channels[idx];
            let di = self.data(inp);
            for b in 0..n {
                let src = b * ci * s;
                let dst = (b * ctot + coff) * s;
                out[dst..dst + ci * s].copy_from_slice(&di[src..src + ci * s]);
            }
            coff += ci;
        }
        let id = self.push_entry(shape, out);
        self.nodes.push(Node::ConcatChannels { inputs: inputs.to_vec(), out: id });
        Ok(id)
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(mismatch("flatten", format!("expected batched input, got {sx:?}")));
        }
        let n = sx[0];
        let rest: usize = sx[1..].iter().product();
        let data = self.data(x).to_vec();
        let id = self.push_entry(vec![n, rest], data);
        self.nodes.push(Node::Flatten { x, out: id });
        Ok(id)
    }

    /// Gathers the given channel indices of `[n,c]` or `[n,c,h,w]`, in order.
    pub fn select_channels(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let (n, c, s) = ncs(&sx)
            .ok_or_else(|| mismatch("select_channels", format!("input shape {sx:?}")))?;
        if indices.is_empty() {
            return Err(mismatch("select_channels", "empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(mismatch("select_channels", format!("index {bad} out of {c} channels")));
        }
        let ck = indices.len();
        let mut shape = sx.clone();
        shape[1] = ck;
        let mut out = vec![0.0f32; n * ck * s];
        {
            let dx = self.data(x);
            for b in 0..n {
                for (j, &ci) in indices.iter().enumerate() {
                    let src = (b * c + ci) * s;
                    let dst = (b * ck + j) * s;
                    out[dst..dst + s].copy_from_slice(&dx[src..src + s]);
                }
            }
        }
        let id = self.push_entry(shape, out);
        self.nodes.push(Node::SelectChannels { x, out: id, indices: indices.to_vec() });
        Ok(id)
    }

    /// Row-wise temperature softmax as a differentiable tape op.
    pub fn softmax_t(&mut self, x: TensorId, tau: f32) -> Result<TensorId> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(mismatch("softmax_temperature", format!("expected [batch, classes], got {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = self.data(x)[r * cols..(r + 1) * cols].to_vec();
            super::softmax_row(&row, tau, &mut out[r * cols..(r + 1) * cols]);
        }
        let id = self.push_entry(sx, out);
        self.nodes.push(Node::SoftmaxT { out: id, x, tau });
        Ok(id)
    }

    /// Mean cross-entropy between `softmax(logits/tau)` and integer class
    /// labels.
    pub fn ce_loss(&mut self, logits: TensorId, labels: &[usize], tau: f32) -> Result<TensorId> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(mismatch(
                "ce_loss",
                format!("logits {sx:?} vs {} labels", labels.len()),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Invalid(format!("class index {bad} out of range 0..{cols}")));
        }
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = self.data(logits)[r * cols..(r + 1) * cols].to_vec();
            super::softmax_row(&row, tau, &mut probs[r * cols..(r + 1) * cols]);
            let p = probs[r * cols + labels[r]].max(f32::MIN_POSITIVE);
            loss -= (p as f64).ln();
        }
        loss /= rows as f64;
        let id = self.push_entry(vec![1], vec![loss as f32]);
        self.nodes.push(Node::CeLoss { logits, out: id, probs, labels: labels.to_vec(), tau });
        Ok(id)
    }

    /// Mean cross-entropy against a fixed target distribution per row.
    pub fn ce_soft_loss(&mut self, logits: TensorId, targets: &[f32], tau: f32) -> Result<TensorId> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] * sx[1] != targets.len() {
            return Err(mismatch(
                "ce_soft_loss",
                format!("logits {sx:?} vs {} target values", targets.len()),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut probs = vec![0.0f32; rows * cols];
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = self.data(logits)[r * cols..(r + 1) * cols].to_vec();
            super::softmax_row(&row, tau, &mut probs[r * cols..(r + 1) * cols]);
            for k in 0..cols {
                let t = targets[r * cols + k] as f64;
                if t > 0.0 {
                    loss -= t * (probs[r * cols + k].max(f32::MIN_POSITIVE) as f64).ln();
                }
            }
        }
        loss /= rows as f64;
        let id = self.push_entry(vec![1], vec![loss as f32]);
        self.nodes.push(Node::CeSoft { logits, out: id, probs, targets: targets.to_vec(), tau });
        Ok(id)
    }

    /// Mean KL divergence between softened student outputs and fixed teacher
    /// probabilities (already softened with the same temperature).
    pub fn kd_loss_from_probs(
        &mut self,
        student: TensorId,
        teacher_probs: &[f32],
        tau: f32,
        direction: KlDirection,
    ) -> Result<TensorId> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        let sx = self.shape(student).to_vec();
        if sx.len() != 2 || sx[0] * sx[1] != teacher_probs.len() {
            return Err(mismatch(
                "kd_loss",
                format!("student {sx:?} vs {} teacher values", teacher_probs.len()),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut ps = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = self.data(student)[r * cols..(r + 1) * cols].to_vec();
            super::softmax_row(&row, tau, &mut ps[r * cols..(r + 1) * cols]);
        }
        let loss = kl_mean(&ps, teacher_probs, rows, cols, direction);
        let id = self.push_entry(vec![1], vec![loss as f32]);
        self.nodes.push(Node::KdLoss {
            student,
            out: id,
            ps,
            pt: teacher_probs.to_vec(),
            tau,
            direction,
        });
        Ok(id)
    }

    /// `|x - shift|` on a scalar.
    pub fn abs_shift(&mut self, x: TensorId, shift: f64) -> Result<TensorId> {
        if self.data(x).len() != 1 {
            return Err(mismatch("abs_shift", format!("expected scalar, got {:?}", self.shape(x))));
        }
        let v = (self.data(x)[0] as f64 - shift).abs();
        let id = self.push_entry(vec![1], vec![v as f32]);
        self.nodes.push(Node::AbsShift { x, out: id, shift });
        Ok(id)
    }

    /// `wa*a + wb*b` on scalars.
    pub fn combine(&mut self, a: TensorId, wa: f32, b: TensorId, wb: f32) -> Result<TensorId> {
        if self.data(a).len() != 1 || self.data(b).len() != 1 {
            return Err(mismatch("combine", "expected scalar inputs".into()));
        }
        let v = wa as f64 * self.data(a)[0] as f64 + wb as f64 * self.data(b)[0] as f64;
        let id = self.push_entry(vec![1], vec![v as f32]);
        self.nodes.push(Node::Combine { a, b, wa, wb, out: id });
        Ok(id)
    }
}

/// Mean over rows of KL between per-row distributions.
pub(crate) fn kl_mean(ps: &[f32], pt: &[f32], rows: usize, cols: usize, direction: KlDirection) -> f64 {
    let mut total = 0.0f64;
    for r in 0..rows {
        for k in 0..cols {
            let s = ps[r * cols + k].max(f32::MIN_POSITIVE) as f64;
            let t = pt[r * cols + k].max(f32::MIN_POSITIVE) as f64;
            total += match direction {
                KlDirection::TeacherLeading => t * (t.ln() - s.ln()),
                KlDirection::StudentLeading => s * (s.ln() - t.ln()),
            };
        }
    }
    total / rows as f64
}

pub(crate) fn backward_node(tape: &mut Tape, node: &Node) {
    match node {
        Node::Matmul { a, b, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
            let n = tape.shape(*b)[1];
            let da = tape.data(*a).to_vec();
            let db = tape.data(*b).to_vec();
            let mut ga = vec![0.0f32; m * k];
            let mut gb = vec![0.0f32; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0f32;
                    for j in 0..n {
                        acc += go[i * n + j] * db[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for i in 0..m {
                        acc += da[i * k + p] * go[i * n + j];
                    }
                    gb[p * n + j] = acc;
                }
            }
            tape.accumulate(*a, &ga);
            tape.accumulate(*b, &gb);
        }
        Node::AddBias { x, b, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (_, c, s) = ncs(&sx).unwrap();
            let mut gb = vec![0.0f32; c];
            for (i, &g) in go.iter().enumerate() {
                gb[(i / s) % c] += g;
            }
            tape.accumulate(*x, &go);
            tape.accumulate(*b, &gb);
        }
        Node::Conv2d { x, w, out, stride, pad } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let sw = tape.shape(*w).to_vec();
            let so = tape.shape(*out).to_vec();
            let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
            let (oh, ow) = (so[2], so[3]);
            let dx = tape.data(*x).to_vec();
            let dw = tape.data(*w).to_vec();
            let mut gx = vec![0.0f32; dx.len()];
            let mut gw = vec![0.0f32; dw.len()];
            for b in 0..n {
                for oc in 0..co {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[((b * co + oc) * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ic in 0..ci {
                                let wbase = ((oc * ci + ic) * kh) * kw;
                                let xbase = (b * ci + ic) * h;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let xrow = (xbase + iy as usize) * wd;
                                    let wrow = wbase + ky * kw;
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        gw[wrow + kx] += g * dx[xrow + ix as usize];
                                        gx[xrow + ix as usize] += g * dw[wrow + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(*x, &gx);
            tape.accumulate(*w, &gw);
        }
        Node::Relu { x, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let dx = tape.data(*x);
            let gx: Vec<f32> =
                go.iter().zip(dx).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
            tape.accumulate(*x, &gx);
        }
        Node::AvgPool { x, out, window } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let so = tape.shape(*out).to_vec();
            let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let (oh, ow) = (so[2], so[3]);
            let scale = 1.0 / (window * window) as f32;
            let mut gx = vec![0.0f32; n * c * h * w];
            for b in 0..n {
                for ch in 0..c {
                    let ibase = (b * c + ch) * h;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[((b * c + ch) * oh + oy) * ow + ox] * scale;
                            for ky in 0..window {
                                let row = (ibase + oy * window + ky) * w + ox * window;
                                for kx in 0..window {
                                    gx[row + kx] += g;
                                }
                            }
                        }
                    }
                }
            }
            tape.accumulate(*x, &gx);
        }
        Node::GlobalAvgPool { x, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
            let scale = 1.0 / (h * w) as f32;
            let mut gx = vec![0.0f32; n * c * h * w];
            for b in 0..n {
                for ch in 0..c {
                    let g = go[b * c + ch] * scale;
                    let base = ((b * c + ch) * h) * w;
                    for i in 0..h * w {
                        gx[base + i] = g;
                    }
                }
            }
            tape.accumulate(*x, &gx);
        }
        Node::BatchNormTrain { x, gamma, beta, out, xhat, invstd } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (n, c, s) = ncs(&sx).unwrap();
            let m = (n * s) as f64;
            let dg = tape.data(*gamma).to_vec();
            let mut ggamma = vec![0.0f32; c];
            let mut gbeta = vec![0.0f32; c];
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        let g = go[base + i] as f64;
                        sum_dy[ch] += g;
                        sum_dy_xhat[ch] += g * xhat[base + i] as f64;
                    }
                }
            }
            for ch in 0..c {
                ggamma[ch] = sum_dy_xhat[ch] as f32;
                gbeta[ch] = sum_dy[ch] as f32;
            }
            // dx = (gamma*invstd/m) * (m*dy - sum_dy - xhat*sum_dy_xhat)
            let mut gx = vec![0.0f32; go.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    let k = dg[ch] as f64 * invstd[ch] as f64 / m;
                    for i in 0..s {
                        let dy = go[base + i] as f64;
                        let xh = xhat[base + i] as f64;
                        gx[base + i] =
                            (k * (m * dy - sum_dy[ch] - xh * sum_dy_xhat[ch])) as f32;
                    }
                }
            }
            tape.accumulate(*x, &gx);
            tape.accumulate(*gamma, &ggamma);
            tape.accumulate(*beta, &gbeta);
        }
        Node::BatchNormEval { x, gamma, beta, out, mean, invstd } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (n, c, s) = ncs(&sx).unwrap();
            let dx = tape.data(*x).to_vec();
            let dg = tape.data(*gamma).to_vec();
            let mut gx = vec![0.0f32; go.len()];
            let mut ggamma = vec![0.0f32; c];
            let mut gbeta = vec![0.0f32; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    for i in 0..s {
                        let g = go[base + i];
                        gx[base + i] = g * dg[ch] * invstd[ch];
                        ggamma[ch] += g * (dx[base + i] - mean[ch]) * invstd[ch];
                        gbeta[ch] += g;
                    }
                }
            }
            tape.accumulate(*x, &gx);
            tape.accumulate(*gamma, &ggamma);
            tape.accumulate(*beta, &gbeta);
        }
        Node::ChannelScale { x, g, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (_, c, s) = ncs(&sx).unwrap();
            let dx = tape.data(*x).to_vec();
            let dgv = tape.data(*g).to_vec();
            let mut gx = vec![0.0f32; go.len()];
            let mut gg = vec![0.0f32; c];
            for (i, &gv) in go.iter().enumerate() {
                let ch = (i / s) % c;
                gx[i] = gv * dgv[ch];
                gg[ch] += gv * dx[i];
            }
            tape.accumulate(*x, &gx);
            tape.accumulate(*g, &gg);
        }
        Node::ConcatChannels { inputs, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let so = tape.shape(*out).to_vec();
            let (n, ctot, s) = ncs(&so).unwrap();
            let mut coff = 0usize;
            for &inp in inputs {
                let ci = tape.shape(inp)[1];
                let mut gi = vec![0.0f32; n * ci * s];
                for b in 0..n {
                    let src = (b * ctot + coff) * s;
                    let dst = b * ci * s;
                    gi[dst..dst + ci * s].copy_from_slice(&go[src..src + ci * s]);
                }
                tape.accumulate(inp, &gi);
                coff += ci;
            }
        }
        Node::Flatten { x, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            tape.accumulate(*x, &go);
        }
        Node::SelectChannels { x, out, indices } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let sx = tape.shape(*x).to_vec();
            let (n, c, s) = ncs(&sx).unwrap();
            let ck = indices.len();
            let mut gx = vec![0.0f32; n * c * s];
            for b in 0..n {
                for (j, &ci) in indices.iter().enumerate() {
                    let src = (b * ck + j) * s;
                    let dst = (b * c + ci) * s;
                    for i in 0..s {
                        gx[dst + i] += go[src + i];
                    }
                }
            }
            tape.accumulate(*x, &gx);
        }
        Node::SoftmaxT { out, x, tau } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let so = tape.shape(*out).to_vec();
            let (rows, cols) = (so[0], so[1]);
            let y = tape.data(*out).to_vec();
            let mut gx = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let mut dot = 0.0f64;
                for k in 0..cols {
                    dot += y[r * cols + k] as f64 * go[r * cols + k] as f64;
                }
                for k in 0..cols {
                    let i = r * cols + k;
                    gx[i] = (y[i] as f64 * (go[i] as f64 - dot) / *tau as f64) as f32;
                }
            }
            tape.accumulate(*x, &gx);
        }
        Node::CeLoss { logits, out, probs, labels, tau } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let g = go[0];
            let rows = labels.len();
            let cols = probs.len() / rows;
            let scale = g / (rows as f32 * tau);
            let mut gx = vec![0.0f32; probs.len()];
            for r in 0..rows {
                for k in 0..cols {
                    let i = r * cols + k;
                    let t = if labels[r] == k { 1.0 } else { 0.0 };
                    gx[i] = scale * (probs[i] - t);
                }
            }
            tape.accumulate(*logits, &gx);
        }
        Node::CeSoft { logits, out, probs, targets, tau } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let g = go[0];
            let cols = tape.shape(*logits)[1];
            let rows = probs.len() / cols;
            let scale = g / (rows as f32 * tau);
            let mut gx = vec![0.0f32; probs.len()];
            for r in 0..rows {
                let mut tsum = 0.0f32;
                for k in 0..cols {
                    tsum += targets[r * cols + k];
                }
                for k in 0..cols {
                    let i = r * cols + k;
                    gx[i] = scale * (tsum * probs[i] - targets[i]);
                }
            }
            tape.accumulate(*logits, &gx);
        }
        Node::KdLoss { student, out, ps, pt, tau, direction } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let g = go[0];
            let cols = tape.shape(*student)[1];
            let rows = ps.len() / cols;
            let scale = g / (rows as f32 * tau);
            let mut gx = vec![0.0f32; ps.len()];
            match direction {
                KlDirection::TeacherLeading => {
                    // d/ds_i mean KL(pt||ps) = (ps_i - pt_i) / (N*tau)
                    for i in 0..ps.len() {
                        gx[i] = scale * (ps[i] - pt[i]);
                    }
                }
                KlDirection::StudentLeading => {
                    // d/ds_i mean KL(ps||pt) = ps_i*(L_i - sum_j ps_j L_j)/(N*tau),
                    // L_j = ln ps_j - ln pt_j
                    for r in 0..rows {
                        let mut row_kl = 0.0f64;
                        for k in 0..cols {
                            let s = ps[r * cols + k].max(f32::MIN_POSITIVE) as f64;
                            let t = pt[r * cols + k].max(f32::MIN_POSITIVE) as f64;
                            row_kl += s * (s.ln() - t.ln());
                        }
                        for k in 0..cols {
                            let i = r * cols + k;
                            let s = ps[i].max(f32::MIN_POSITIVE) as f64;
                            let t = pt[i].max(f32::MIN_POSITIVE) as f64;
                            let l = s.ln() - t.ln();
                            gx[i] = scale * (ps[i] as f64 * (l - row_kl)) as f32;
                        }
                    }
                }
            }
            tape.accumulate(*student, &gx);
        }
        Node::AbsShift { x, out, shift } => {
            let Some(go) = tape.take_grad(*out) else { return };
            let v = tape.data(*x)[0] as f64 - shift;
            let sign = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            tape.accumulate(*x, &[go[0] * sign as f32]);
        }
        Node::Combine { a, b, wa, wb, out } => {
            let Some(go) = tape.take_grad(*out) else { return };
            tape.accumulate(*a, &[go[0] * wa]);
            tape.accumulate(*b, &[go[0] * wb]);
        }
    }
}

/// Output of a train-mode batch norm: the tape tensor plus the batch
/// statistics for running-average updates.
pub struct BnTrainOut {
    pub out: TensorId,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}
