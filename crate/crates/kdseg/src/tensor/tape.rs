//! Reverse-mode autodiff tape.
//!
//! Operations append nodes in topological order; `backward` walks the nodes
//! in reverse, accumulating gradients into every `requires_grad` leaf. A tape
//! records one forward pass and supports exactly one backward pass.

use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S> {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    },
    Relu {
        input: TensorId,
    },
    SoftmaxChannels {
        input: TensorId,
    },
    UpsampleNearest2x {
        input: TensorId,
    },
    Subsample2x {
        input: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Scale {
        input: TensorId,
        factor: S,
    },
    Sum {
        input: TensorId,
    },
    CrossEntropySum {
        logits: TensorId,
        labels: Vec<u8>,
        ignore: u8,
    },
    Consistency {
        logits: TensorId,
    },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Record a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<S>) -> TensorId {
        self.leaf(tensor.with_requires_grad())
    }

    /// Record a non-trainable leaf (e.g. inputs, detached teacher outputs).
    pub fn constant(&mut self, mut tensor: Tensor<S>) -> TensorId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad()
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        out.check_finite("conv2d output")?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let out = kernels::relu_forward(self.value(input));
        out.check_finite("relu output")?;
        Ok(self.push(out, Op::Relu { input }))
    }

    pub fn softmax_channels(&mut self, input: TensorId) -> Result<TensorId> {
        let out = kernels::softmax_channels_forward(self.value(input))?;
        out.check_finite("softmax_channels output")?;
        Ok(self.push(out, Op::SoftmaxChannels { input }))
    }

    pub fn upsample_nearest2x(&mut self, input: TensorId) -> Result<TensorId> {
        let out = kernels::upsample_nearest2x_forward(self.value(input))?;
        Ok(self.push(out, Op::UpsampleNearest2x { input }))
    }

    pub fn subsample2x(&mut self, input: TensorId) -> Result<TensorId> {
        let out = kernels::subsample2x_forward(self.value(input))?;
        Ok(self.push(out, Op::Subsample2x { input }))
    }

    fn elementwise_pair(&self, lhs: TensorId, rhs: TensorId, name: &str) -> Result<()> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(TensorError::Dimension(format!(
                "{}: shape {:?} vs {:?}",
                name,
                self.value(lhs).shape(),
                self.value(rhs).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.elementwise_pair(lhs, rhs, "add")?;
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| *a + *b)
            .collect();
        let out = Tensor::from_vec(self.value(lhs).shape(), data)?;
        out.check_finite("add output")?;
        Ok(self.push(out, Op::Add { lhs, rhs }))
    }

    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.elementwise_pair(lhs, rhs, "sub")?;
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| *a - *b)
            .collect();
        let out = Tensor::from_vec(self.value(lhs).shape(), data)?;
        out.check_finite("sub output")?;
        Ok(self.push(out, Op::Sub { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.elementwise_pair(lhs, rhs, "mul")?;
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| *a * *b)
            .collect();
        let out = Tensor::from_vec(self.value(lhs).shape(), data)?;
        out.check_finite("mul output")?;
        Ok(self.push(out, Op::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, input: TensorId, factor: S) -> Result<TensorId> {
        let data = self.value(input).data().iter().map(|v| *v * factor).collect();
        let out = Tensor::from_vec(self.value(input).shape(), data)?;
        out.check_finite("scale output")?;
        Ok(self.push(out, Op::Scale { input, factor }))
    }

    /// Sum of all elements, accumulated in flat-buffer order.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let mut acc = S::ZERO;
        for v in self.value(input).data() {
            acc += *v;
        }
        let out = Tensor::scalar(acc);
        out.check_finite("sum output")?;
        Ok(self.push(out, Op::Sum { input }))
    }

    /// Sum over non-ignored pixels of -log softmax probability of the label.
    pub fn cross_entropy_sum(
        &mut self,
        logits: TensorId,
        labels: &[u8],
        ignore: u8,
    ) -> Result<TensorId> {
        let (total, _kept) =
            kernels::cross_entropy_sum_forward(self.value(logits), labels, ignore)?;
        let out = Tensor::scalar(total);
        out.check_finite("cross_entropy output")?;
        Ok(self.push(
            out,
            Op::CrossEntropySum {
                logits,
                labels: labels.to_vec(),
                ignore,
            },
        ))
    }

    /// Per-pixel 8-neighbor squared logit difference map, `[B,1,H,W]`.
    pub fn consistency_map(&mut self, logits: TensorId) -> Result<TensorId> {
        let out = kernels::consistency_forward(self.value(logits))?;
        out.check_finite("consistency_map output")?;
        Ok(self.push(out, Op::Consistency { logits }))
    }

    /// Accumulate gradients of `loss` into every `requires_grad` leaf.
    ///
    /// `loss` must be a scalar recorded on this tape. A second call without
    /// a new forward pass (i.e. a new tape) is rejected.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Usage(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let (gin, gk, gb) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        *stride,
                        *padding,
                        &g_t,
                    )?;
                    accumulate(&mut grads, input.0, gin.data());
                    accumulate(&mut grads, kernel.0, gk.data());
                    accumulate(&mut grads, bias.0, gb.data());
                }
                Op::Relu { input } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let gin = kernels::relu_backward(self.value(*input), &g_t);
                    accumulate(&mut grads, input.0, gin.data());
                }
                Op::SoftmaxChannels { input } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let gin = kernels::softmax_channels_backward(&self.nodes[i].tensor, &g_t);
                    accumulate(&mut grads, input.0, gin.data());
                }
                Op::UpsampleNearest2x { input } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let gin = kernels::upsample_nearest2x_backward(&g_t);
                    accumulate(&mut grads, input.0, gin.data());
                }
                Op::Subsample2x { input } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let gin =
                        kernels::subsample2x_backward(self.value(*input).shape(), &g_t);
                    accumulate(&mut grads, input.0, gin.data());
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    accumulate(&mut grads, lhs.0, &g);
                    accumulate(&mut grads, rhs.0, &g);
                }
                Op::Sub { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    accumulate(&mut grads, lhs.0, &g);
                    let neg: Vec<S> = g.iter().map(|v| -*v).collect();
                    accumulate(&mut grads, rhs.0, &neg);
                }
                Op::Mul { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    let gl: Vec<S> = g
                        .iter()
                        .zip(self.value(rhs).data())
                        .map(|(gv, rv)| *gv * *rv)
                        .collect();
                    let gr: Vec<S> = g
                        .iter()
                        .zip(self.value(lhs).data())
                        .map(|(gv, lv)| *gv * *lv)
                        .collect();
                    accumulate(&mut grads, lhs.0, &gl);
                    accumulate(&mut grads, rhs.0, &gr);
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    let gin: Vec<S> = g.iter().map(|v| *v * f).collect();
                    accumulate(&mut grads, input.0, &gin);
                }
                Op::Sum { input } => {
                    let gv = g[0];
                    let gin = vec![gv; self.value(*input).numel()];
                    accumulate(&mut grads, input.0, &gin);
                }
                Op::CrossEntropySum {
                    logits,
                    labels,
                    ignore,
                } => {
                    let gin = kernels::cross_entropy_sum_backward(
                        self.value(*logits),
                        labels,
                        *ignore,
                        g[0],
                    );
                    let logits = *logits;
                    accumulate(&mut grads, logits.0, gin.data());
                }
                Op::Consistency { logits } => {
                    let g_t = Tensor::from_vec(self.nodes[i].tensor.shape(), g)?;
                    let gin = kernels::consistency_backward(self.value(*logits), &g_t);
                    let logits = *logits;
                    accumulate(&mut grads, logits.0, gin.data());
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if !matches!(node.op, Op::Leaf) || !node.tensor.requires_grad() {
                continue;
            }
            let grad = grad.unwrap_or_else(|| vec![S::ZERO; node.tensor.numel()]);
            if !grad.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite("backward gradient".into()));
            }
            node.tensor.set_grad(grad);
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, delta: &[S]) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += *d;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}
