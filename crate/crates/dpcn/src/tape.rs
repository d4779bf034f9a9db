//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Forward ops append nodes in topological order; `backward` walks the
//! nodes in reverse exactly once, accumulating vector-Jacobian products.
//! Leaf nodes bound to a `ParamId` flush their gradient into the
//! `ParamStore` (`grad +=`); intermediate gradients are dropped as soon as
//! a node has been processed unless explicitly watched (Grad-CAM reads
//! the gradient of an activation).

use crate::error::{shape_error, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// x + b with b broadcast over every axis except channel axis 1.
    AddBias(NodeId, NodeId),
    AddConst(NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    /// (m,k) @ (k,n) for 2-D operands.
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Mean(NodeId),
    Sum(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    /// Row-wise over (N,K).
    LogSoftmax(NodeId),
    /// Mean over rows of -logp[i, label_i]; scalar output.
    NllPick { logp: NodeId, labels: Vec<usize> },
    ConcatChannel(Vec<NodeId>),
    SliceChannel { x: NodeId, start: usize, len: usize },
    /// Zero padding of the two trailing spatial axes of an (N,C,H,W) tensor.
    Pad2d { x: NodeId, pad: usize },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    AvgPool2d { x: NodeId, kernel: usize, stride: usize },
    GlobalAvgPool(NodeId),
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, inv_std: Vec<f64>, mean: Vec<f64> },
    Dropout { x: NodeId, mask: Vec<f64>, scale: f64 },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, param: Option<ParamId>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, param, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None, false)
    }

    /// Snapshot a parameter's current value as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Leaf, store.get(id).value.clone(), Some(id), true)
    }

    /// Cut the graph: same value, gradient stops here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.leaf(v)
    }

    // ---- element-wise and arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_error("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, None, ng))
    }

    /// x + bias, bias of shape (C) broadcast over all axes but axis 1.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vx.shape().len() < 2 || vb.shape().len() != 1 || vb.shape()[0] != vx.shape()[1] {
            return Err(shape_error("add_bias", vx.shape(), vb.shape()));
        }
        let channels = vx.shape()[1];
        let inner: usize = vx.shape()[2..].iter().product();
        let mut data = vx.data().to_vec();
        let bias = vb.data();
        for chunk in data.chunks_mut(channels * inner) {
            for (c, bc) in bias.iter().enumerate() {
                for v in &mut chunk[c * inner..(c + 1) * inner] {
                    *v += bc;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias(x, b), out, None, ng))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        let ng = self.needs(x);
        self.push(Op::AddConst(x), out, None, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_error("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, None, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push(Op::Scale(x, c), out, None, ng)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * v);
        let ng = self.needs(x);
        self.push(Op::Square(x), out, None, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_error("matmul", va.shape(), vb.shape()));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(va.data(), vb.data(), &mut out, m, k, n, false, false, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, Tensor::new(vec![m, n], out)?, None, ng))
    }

    // ---- reductions ----

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.needs(x);
        self.push(Op::Mean(x), Tensor::scalar(m), None, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), None, ng)
    }

    // ---- activations ----

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(Op::Relu(x), out, None, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(x);
        self.push(Op::LeakyRelu(x, slope), out, None, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), out, None, ng)
    }

    /// Row-stabilized log softmax over a (N,K) tensor.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::Shape(format!("log_softmax wants (N,K), got {:?}", v.shape())));
        }
        let k = v.shape()[1];
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln() + mx;
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::LogSoftmax(x), Tensor::new(v.shape().to_vec(), data)?, None, ng))
    }

    /// Mean over the batch of -logp[i, label_i]. `logp` is (N,K) log-probabilities.
    pub fn nll_pick(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logp);
        if v.shape().len() != 2 || v.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "nll_pick: logp {:?} vs {} labels",
                v.shape(),
                labels.len()
            )));
        }
        let k = v.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let n = labels.len();
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| -v.data()[i * k + y]).sum();
        let ng = self.needs(logp);
        Ok(self.push(
            Op::NllPick { logp, labels: labels.to_vec() },
            Tensor::scalar(s / n as f64),
            None,
            ng,
        ))
    }

    // ---- structural ----

    /// Concatenate along channel axis 1; all other axes must agree.
    pub fn concat_channel(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channel: empty input list".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat_channel wants rank >= 2, got {first:?}")));
        }
        let mut channels = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s[0] != first[0]
                || s[2..] != first[2..]
            {
                return Err(shape_error("concat_channel", &first, s));
            }
            channels += s[1];
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut out_shape = first.clone();
        out_shape[1] = channels;
        let mut data = vec![0.0; batch * channels * inner];
        for n in 0..batch {
            let mut c_off = 0;
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                let src = &v.data()[n * pc * inner..(n + 1) * pc * inner];
                let dst_start = (n * channels + c_off) * inner;
                data[dst_start..dst_start + pc * inner].copy_from_slice(src);
                c_off += pc;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatChannel(parts.to_vec()), Tensor::new(out_shape, data)?, None, ng))
    }

    /// Channel range [start, start+len) of axis 1.
    pub fn slice_channel(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_channel [{start},{}) out of {:?}",
                start + len,
                s
            )));
        }
        let batch = s[0];
        let channels = s[1];
        let inner: usize = s[2..].iter().product();
        let mut out_shape = s.to_vec();
        out_shape[1] = len;
        let mut data = vec![0.0; batch * len * inner];
        for n in 0..batch {
            let src = (n * channels + start) * inner;
            let dst = n * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceChannel { x, start, len }, Tensor::new(out_shape, data)?, None, ng))
    }

    /// Zero-pad H and W of an (N,C,H,W) tensor by `pad` on each side.
    pub fn pad2d(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("pad2d wants (N,C,H,W), got {s:?}")));
        }
        let out = pad2d_raw(v, pad)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Pad2d { x, pad }, out, None, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), out, None, ng))
    }

    // ---- conv and pooling ----

    /// 2-D convolution, implemented as im2col + matmul.
    /// x: (N,C,H,W), w: (OutC,C,K,K), output (N,OutC,OH,OW).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let vw = self.value(w);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(shape_error("conv2d", sx, sw));
        }
        let geo = ConvGeometry::new(sx, sw, stride, pad)?;
        let col = im2col(vx, &geo);
        // (rows, ck) @ (ck, out_c) via transposed weight
        let mut y_rows = vec![0.0; geo.rows() * geo.out_c];
        gemm(
            &col,
            vw.data(),
            &mut y_rows,
            geo.rows(),
            geo.ck(),
            geo.out_c,
            false,
            true,
            0.0,
        );
        let out = rows_to_nchw(&y_rows, &geo);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, out, None, ng))
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[2] < kernel || s[3] < kernel {
            return Err(Error::Shape(format!("max_pool2d k={kernel} on {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let src = v.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = base + (i * stride + ki) * w + (j * stride + kj);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = nc * oh * ow + i * ow + j;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, out, None, ng))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[2] < kernel || s[3] < kernel {
            return Err(Error::Shape(format!("avg_pool2d k={kernel} on {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let scale = 1.0 / (kernel * kernel) as f64;
        let mut data = vec![0.0; n * c * oh * ow];
        let src = v.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += src[base + (i * stride + ki) * w + (j * stride + kj)];
                        }
                    }
                    data[nc * oh * ow + i * ow + j] = acc * scale;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::AvgPool2d { x, kernel, stride }, out, None, ng))
    }

    /// (N,C,H,W) -> (N,C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool wants (N,C,H,W), got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut data = vec![0.0; n * c];
        for (i, chunk) in v.data().chunks(hw).enumerate() {
            data[i] = chunk.iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool(x), out, None, ng))
    }

    // ---- normalization and regularization ----

    /// Batch normalization with batch statistics. Returns the output node and
    /// the per-channel batch mean / biased variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        let c = bn_channels(&s, self.value(gamma).shape(), self.value(beta).shape())?;
        let count = v.numel() / c;
        if count < 2 {
            return Err(Error::Numeric(format!(
                "batch_norm_train needs >= 2 values per channel, got {count} on {s:?}"
            )));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for_each_channel(&s, v.data(), |ch, val| mean[ch] += val);
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for_each_channel(&s, v.data(), |ch, val| {
            let d = val - mean[ch];
            var[ch] += d * d;
        });
        var.iter_mut().for_each(|m| *m /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();

        let mut xhat_data = v.data().to_vec();
        normalize_channels(&s, &mut xhat_data, &mean, &inv_std);
        let xhat = Tensor::new(s.clone(), xhat_data)?;

        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out_data = xhat.data().to_vec();
        affine_channels(&s, &mut out_data, &g, &b);
        let out = Tensor::new(s, out_data)?;

        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            out,
            None,
            ng,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        let c = bn_channels(&s, self.value(gamma).shape(), self.value(beta).shape())?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!("batch_norm_eval: running stats want {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
        let mut data = v.data().to_vec();
        normalize_channels(&s, &mut data, running_mean, &inv_std);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        affine_channels(&s, &mut data, &g, &b);
        let out = Tensor::new(s, data)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BatchNormEval { x, gamma, beta, inv_std, mean: running_mean.to_vec() },
            out,
            None,
            ng,
        ))
    }

    /// Inverted dropout with an externally drawn 0/1 mask.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>, rate: f64) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::Shape(format!(
                "dropout mask len {} vs tensor {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let scale = 1.0 / (1.0 - rate);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m * scale).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask, scale }, out, None, ng))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Parameter gradients accumulate into
    /// `store`; every intermediate gradient is released after use.
    pub fn backward(&mut self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_watched(root, store, &[]).map(|_| ())
    }

    /// Like `backward`, but also returns d(root)/d(node) for each watched node.
    pub fn backward_watched(
        &mut self,
        root: NodeId,
        store: &mut ParamStore,
        watch: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if watch.contains(&NodeId(i)) {
                grads[i] = Some(g.clone());
            }
            if let Some(pid) = self.nodes[i].param {
                store.accumulate_grad(pid, &g)?;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(watch
            .iter()
            .map(|&w| {
                grads[w.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[w.0].value.shape()))
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Local helper: accumulate into an input slot if that input wants grad.
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor, tape: &Tape| {
            if !tape.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone(), self)?;
                acc(grads, *b, g.clone(), self)
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.clone(), self)?;
                if self.needs(*b) {
                    let s = g.shape();
                    let channels = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for chunk in g.data().chunks(channels * inner) {
                        for (c, slot) in db.iter_mut().enumerate() {
                            *slot += chunk[c * inner..(c + 1) * inner].iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, Tensor::new(vec![channels], db)?, self)?;
                }
                Ok(())
            }
            Op::AddConst(x) => acc(grads, *x, g.clone(), self),
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b);
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?, self)?;
                }
                if self.needs(*b) {
                    let va = self.value(*a);
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Tensor::new(g.shape().to_vec(), d)?, self)?;
                }
                Ok(())
            }
            Op::Scale(x, c) => acc(grads, *x, g.map(|v| v * c), self),
            Op::Square(x) => {
                let vx = self.value(*x);
                let d = g.data().iter().zip(vx.data()).map(|(gz, xz)| 2.0 * gz * xz).collect();
                acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?, self)
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), self.value(*b).data(), &mut da, *m, *n, *k, false, true, 0.0);
                    acc(grads, *a, Tensor::new(vec![*m, *k], da)?, self)?;
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(self.value(*a).data(), g.data(), &mut db, *k, *m, *n, true, false, 0.0);
                    acc(grads, *b, Tensor::new(vec![*k, *n], db)?, self)?;
                }
                Ok(())
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let d = Tensor::full(self.value(*x).shape(), g.item() / n as f64);
                acc(grads, *x, d, self)
            }
            Op::Sum(x) => {
                let d = Tensor::full(self.value(*x).shape(), g.item());
                acc(grads, *x, d, self)
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gz, xz)| if *xz > 0.0 { *gz } else { 0.0 })
                    .collect();
                acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?, self)
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gz, xz)| if *xz > 0.0 { *gz } else { slope * gz })
                    .collect();
                acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?, self)
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let d = g.data().iter().zip(y.data()).map(|(gz, yz)| gz * yz * (1.0 - yz)).collect();
                acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?, self)
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let k = y.shape()[1];
                let mut d = g.data().to_vec();
                for (drow, yrow) in d.chunks_mut(k).zip(y.data().chunks(k)) {
                    let gsum: f64 = drow.iter().sum();
                    for (dz, yz) in drow.iter_mut().zip(yrow) {
                        *dz -= yz.exp() * gsum;
                    }
                }
                acc(grads, *x, Tensor::new(y.shape().to_vec(), d)?, self)
            }
            Op::NllPick { logp, labels } => {
                let shape = self.value(*logp).shape().to_vec();
                let k = shape[1];
                let n = labels.len() as f64;
                let mut d = vec![0.0; shape.iter().product()];
                for (idx, &y) in labels.iter().enumerate() {
                    d[idx * k + y] = -g.item() / n;
                }
                acc(grads, *logp, Tensor::new(shape, d)?, self)
            }
            Op::ConcatChannel(parts) => {
                let s = g.shape();
                let batch = s[0];
                let channels = s[1];
                let inner: usize = s[2..].iter().product();
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut shape = self.value(p).shape().to_vec();
                        shape[1] = pc;
                        let mut d = vec![0.0; batch * pc * inner];
                        for nidx in 0..batch {
                            let src = (nidx * channels + c_off) * inner;
                            let dst = nidx * pc * inner;
                            d[dst..dst + pc * inner]
                                .copy_from_slice(&g.data()[src..src + pc * inner]);
                        }
                        acc(grads, p, Tensor::new(shape, d)?, self)?;
                    }
                    c_off += pc;
                }
                Ok(())
            }
            Op::SliceChannel { x, start, len } => {
                let full = self.value(*x).shape().to_vec();
                let batch = full[0];
                let channels = full[1];
                let inner: usize = full[2..].iter().product();
                let mut d = vec![0.0; full.iter().product()];
                for nidx in 0..batch {
                    let dst = (nidx * channels + start) * inner;
                    let src = nidx * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(grads, *x, Tensor::new(full, d)?, self)
            }
            Op::Pad2d { x, pad } => {
                let d = unpad2d_raw(g, *pad, self.value(*x).shape())?;
                acc(grads, *x, d, self)
            }
            Op::Conv2d { x, w, stride, pad } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let geo = ConvGeometry::new(vx.shape(), vw.shape(), *stride, *pad)?;
                let g_rows = nchw_to_rows(g, &geo);
                if self.needs(*w) {
                    let col = im2col(vx, &geo);
                    let mut dw = vec![0.0; geo.out_c * geo.ck()];
                    gemm(&g_rows, &col, &mut dw, geo.out_c, geo.rows(), geo.ck(), true, false, 0.0);
                    acc(grads, *w, Tensor::new(vw.shape().to_vec(), dw)?, self)?;
                }
                if self.needs(*x) {
                    let mut dcol = vec![0.0; geo.rows() * geo.ck()];
                    gemm(
                        &g_rows,
                        vw.data(),
                        &mut dcol,
                        geo.rows(),
                        geo.out_c,
                        geo.ck(),
                        false,
                        false,
                        0.0,
                    );
                    let dx = col2im(&dcol, &geo, vx.shape())?;
                    acc(grads, *x, dx, self)?;
                }
                Ok(())
            }
            Op::MaxPool2d { x, argmax, .. } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (o, &src_idx) in argmax.iter().enumerate() {
                    d[src_idx] += g.data()[o];
                }
                acc(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?, self)
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let s = self.value(*x).shape();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let oh = (h - kernel) / stride + 1;
                let ow = (w - kernel) / stride + 1;
                let scale = 1.0 / (kernel * kernel) as f64;
                let mut d = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let gz = g.data()[nc * oh * ow + oi * ow + oj] * scale;
                            for ki in 0..*kernel {
                                for kj in 0..*kernel {
                                    d[base + (oi * stride + ki) * w + (oj * stride + kj)] += gz;
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(s.to_vec(), d)?, self)
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let scale = 1.0 / hw as f64;
                let mut d = vec![0.0; self.value(*x).numel()];
                for (nc, chunk) in d.chunks_mut(hw).enumerate() {
                    let gz = g.data()[nc] * scale;
                    chunk.iter_mut().for_each(|v| *v = gz);
                }
                acc(grads, *x, Tensor::new(s.to_vec(), d)?, self)
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let s = xhat.shape().to_vec();
                let c = inv_std.len();
                let count = (xhat.numel() / c) as f64;
                let gamma_v = self.value(*gamma).data();

                // Per-channel sums of dy and dy*xhat.
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for_each_channel_pair(&s, g.data(), xhat.data(), |ch, dy, xh| {
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xh;
                });

                if self.needs(*beta) {
                    acc(grads, *beta, Tensor::new(vec![c], sum_dy.clone())?, self)?;
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, Tensor::new(vec![c], sum_dy_xhat.clone())?, self)?;
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; xhat.numel()];
                    let mean_dy: Vec<f64> = sum_dy.iter().map(|v| v / count).collect();
                    let mean_dy_xhat: Vec<f64> = sum_dy_xhat.iter().map(|v| v / count).collect();
                    let mut idx = 0;
                    visit_channels(&s, |ch| {
                        let dy = g.data()[idx];
                        let xh = xhat.data()[idx];
                        d[idx] = gamma_v[ch]
                            * inv_std[ch]
                            * (dy - mean_dy[ch] - xh * mean_dy_xhat[ch]);
                        idx += 1;
                    });
                    acc(grads, *x, Tensor::new(s, d)?, self)?;
                }
                Ok(())
            }
            Op::BatchNormEval { x, gamma, beta, inv_std, mean } => {
                let s = self.value(*x).shape().to_vec();
                let c = inv_std.len();
                let gamma_v = self.value(*gamma).data();
                let vx = self.value(*x).data();

                if self.needs(*beta) || self.needs(*gamma) {
                    let mut dbeta = vec![0.0; c];
                    let mut dgamma = vec![0.0; c];
                    let mut idx = 0;
                    visit_channels(&s, |ch| {
                        let dy = g.data()[idx];
                        dbeta[ch] += dy;
                        dgamma[ch] += dy * (vx[idx] - mean[ch]) * inv_std[ch];
                        idx += 1;
                    });
                    if self.needs(*beta) {
                        acc(grads, *beta, Tensor::new(vec![c], dbeta)?, self)?;
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, Tensor::new(vec![c], dgamma)?, self)?;
                    }
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; vx.len()];
                    let mut idx = 0;
                    visit_channels(&s, |ch| {
                        d[idx] = g.data()[idx] * gamma_v[ch] * inv_std[ch];
                        idx += 1;
                    });
                    acc(grads, *x, Tensor::new(s, d)?, self)?;
                }
                Ok(())
            }
            Op::Dropout { x, mask, scale } => {
                let d = g.data().iter().zip(mask).map(|(gz, m)| gz * m * scale).collect();
                acc(grads, *x, Tensor::new(g.shape().to_vec(), d)?, self)
            }
            Op::Reshape(x) => {
                let d = g.reshape(self.value(*x).shape())?;
                acc(grads, *x, d, self)
            }
        }
    }
}

// ---- conv support: geometry, im2col / col2im ----

struct ConvGeometry {
    n: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, in_c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_c, k) = (w_shape[0], w_shape[2]);
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        if hp < k || wp < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} exceeds padded input {hp}x{wp}"
            )));
        }
        let oh = (hp - k) / stride + 1;
        let ow = (wp - k) / stride + 1;
        Ok(ConvGeometry { n, in_c, h, w, out_c, k, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn ck(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// col[row, ck], row = ((n*OH + oh)*OW + ow), ck = (c*K + ki)*K + kj.
fn im2col(x: &Tensor, geo: &ConvGeometry) -> Vec<f64> {
    let mut col = vec![0.0; geo.rows() * geo.ck()];
    let src = x.data();
    let (h, w, k, stride, pad) = (geo.h, geo.w, geo.k, geo.stride, geo.pad);
    for n in 0..geo.n {
        for oi in 0..geo.oh {
            for oj in 0..geo.ow {
                let row = ((n * geo.oh + oi) * geo.ow + oj) * geo.ck();
                for c in 0..geo.in_c {
                    let plane = (n * geo.in_c + c) * h * w;
                    for ki in 0..k {
                        let hi = (oi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let wj = (oj * stride + kj) as isize - pad as isize;
                            if wj < 0 || wj >= w as isize {
                                continue;
                            }
                            col[row + (c * k + ki) * k + kj] =
                                src[plane + hi as usize * w + wj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add transpose of im2col.
fn col2im(col: &[f64], geo: &ConvGeometry, x_shape: &[usize]) -> Result<Tensor> {
    let mut dx = vec![0.0; x_shape.iter().product()];
    let (h, w, k, stride, pad) = (geo.h, geo.w, geo.k, geo.stride, geo.pad);
    for n in 0..geo.n {
        for oi in 0..geo.oh {
            for oj in 0..geo.ow {
                let row = ((n * geo.oh + oi) * geo.ow + oj) * geo.ck();
                for c in 0..geo.in_c {
                    let plane = (n * geo.in_c + c) * h * w;
                    for ki in 0..k {
                        let hi = (oi * stride + ki) as isize - pad as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let wj = (oj * stride + kj) as isize - pad as isize;
                            if wj < 0 || wj >= w as isize {
                                continue;
                            }
                            dx[plane + hi as usize * w + wj as usize] +=
                                col[row + (c * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// (rows, OutC) row-major -> (N, OutC, OH, OW).
fn rows_to_nchw(rows: &[f64], geo: &ConvGeometry) -> Tensor {
    let p = geo.oh * geo.ow;
    let mut out = vec![0.0; geo.n * geo.out_c * p];
    for n in 0..geo.n {
        for pi in 0..p {
            let row = (n * p + pi) * geo.out_c;
            for oc in 0..geo.out_c {
                out[(n * geo.out_c + oc) * p + pi] = rows[row + oc];
            }
        }
    }
    Tensor::new(vec![geo.n, geo.out_c, geo.oh, geo.ow], out).expect("conv output shape")
}

/// Inverse layout shuffle of `rows_to_nchw`.
fn nchw_to_rows(g: &Tensor, geo: &ConvGeometry) -> Vec<f64> {
    let p = geo.oh * geo.ow;
    let mut rows = vec![0.0; geo.n * p * geo.out_c];
    let src = g.data();
    for n in 0..geo.n {
        for oc in 0..geo.out_c {
            for pi in 0..p {
                rows[(n * p + pi) * geo.out_c + oc] = src[(n * geo.out_c + oc) * p + pi];
            }
        }
    }
    rows
}

fn pad2d_raw(x: &Tensor, pad: usize) -> Result<Tensor> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut data = vec![0.0; n * c * hp * wp];
    for nc in 0..n * c {
        for i in 0..h {
            let src = nc * h * w + i * w;
            let dst = nc * hp * wp + (i + pad) * wp + pad;
            data[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    Tensor::new(vec![n, c, hp, wp], data)
}

fn unpad2d_raw(g: &Tensor, pad: usize, orig_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = (orig_shape[0], orig_shape[1], orig_shape[2], orig_shape[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut data = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        for i in 0..h {
            let src = nc * hp * wp + (i + pad) * wp + pad;
            let dst = nc * h * w + i * w;
            data[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
        }
    }
    Tensor::new(orig_shape.to_vec(), data)
}

// ---- batch-norm channel iteration ----

fn bn_channels(x_shape: &[usize], gamma: &[usize], beta: &[usize]) -> Result<usize> {
    if x_shape.len() < 2 {
        return Err(Error::Shape(format!("batch_norm wants rank >= 2, got {x_shape:?}")));
    }
    let c = x_shape[1];
    if gamma != [c] || beta != [c] {
        return Err(Error::Shape(format!(
            "batch_norm: gamma {gamma:?} / beta {beta:?} want [{c}]"
        )));
    }
    Ok(c)
}

/// Call f(channel) for every element of an (N,C,...) tensor in storage order.
fn visit_channels(shape: &[usize], mut f: impl FnMut(usize)) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    for _ in 0..n {
        for ch in 0..c {
            for _ in 0..inner {
                f(ch);
            }
        }
    }
}

fn for_each_channel(shape: &[usize], data: &[f64], mut f: impl FnMut(usize, f64)) {
    let mut idx = 0;
    visit_channels(shape, |ch| {
        f(ch, data[idx]);
        idx += 1;
    });
}

fn for_each_channel_pair(shape: &[usize], a: &[f64], b: &[f64], mut f: impl FnMut(usize, f64, f64)) {
    let mut idx = 0;
    visit_channels(shape, |ch| {
        f(ch, a[idx], b[idx]);
        idx += 1;
    });
}

fn normalize_channels(shape: &[usize], data: &mut [f64], mean: &[f64], inv_std: &[f64]) {
    let mut idx = 0;
    visit_channels(shape, |ch| {
        data[idx] = (data[idx] - mean[ch]) * inv_std[ch];
        idx += 1;
    });
}

fn affine_channels(shape: &[usize], data: &mut [f64], gamma: &[f64], beta: &[f64]) {
    let mut idx = 0;
    visit_channels(shape, |ch| {
        data[idx] = data[idx] * gamma[ch] + beta[ch];
        idx += 1;
    });
}
