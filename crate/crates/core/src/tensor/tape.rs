//! Reverse-mode differentiation over a linear record of ops.
//!
//! Every op appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse, handing each node's gradient to its inputs.
//! Only leaves keep their gradient afterwards; interior gradients are
//! dropped as soon as they have been propagated.

use super::ops::{self, BatchNormState, ChannelStats, NormCache, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    LayerNorm {
        input: Var,
        cache: NormCache,
    },
    Relu {
        input: Var,
    },
    ChannelGram {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Gap {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        grad: Tensor,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if self.check_finite {
            value.check_finite(name)?;
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let out = ops::conv2d_forward_raw(
            self.value(input),
            self.value(kernels),
            self.value(bias).data(),
            stride,
            padding,
        )?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    /// Batch norm with affine parameters from `gamma`/`beta`; running
    /// statistics and epsilon come from `state` (whose own `gamma`/`beta`
    /// fields are not read). The running averages are left alone: in
    /// training mode fetch the batch statistics with [`Tape::batch_stats`].
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<Var> {
        let (out, cache) = ops::batchnorm_forward_raw(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            training,
        )?;
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
            "batchnorm",
        )
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&ChannelStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { cache, .. } => cache.batch_stats.as_ref(),
            _ => None,
        }
    }

    pub fn layernorm(&mut self, input: Var) -> Result<Var> {
        let (out, cache) = ops::layernorm_forward_raw(self.value(input))?;
        self.push(out, Op::LayerNorm { input, cache }, "layernorm")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu { input }, "relu")
    }

    pub fn channel_gram(&mut self, input: Var) -> Result<Var> {
        let out = ops::channel_gram(self.value(input))?;
        self.push(out, Op::ChannelGram { input }, "channel_gram")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        self.push(out, Op::Concat { a, b }, "concat_channels")
    }

    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_average_pool(self.value(input))?;
        self.push(out, Op::Gap { input }, "global_average_pool")
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(
            self.value(input),
            self.value(weights),
            self.value(bias).data(),
        )?;
        self.push(
            out,
            Op::Dense {
                input,
                weights,
                bias,
            },
            "dense",
        )
    }

    /// Scalar mean cross-entropy node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (loss, grad) = ops::softmax_cross_entropy(self.value(logits), targets)?;
        self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SoftmaxCrossEntropy { logits, grad },
            "softmax_cross_entropy",
        )
    }

    /// Scalar `Σ wᵢ·xᵢ`, used to reduce any output to a scalar for checks.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.numel()),
            ));
        }
        let s = x.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::new(vec![1], vec![s])?,
            Op::WeightedSum { input, weights },
            "weighted_sum",
        )
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar, has shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        self.nodes[root.0].value.set_grad(vec![1.0])?;
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            self.propagate(i, g)?;
        }
        Ok(())
    }

    fn send(&mut self, to: Var, g: Vec<f64>) {
        self.nodes[to.0].value.accumulate_grad_owned(g);
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>) -> Result<()> {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        let val = |v: &Var| &before[v.0].value;
        let sends: Vec<(Var, Vec<f64>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let r = ops::conv2d_backward_raw(val(input), val(kernels), *stride, *padding, &g)?;
                vec![(*input, r.input), (*kernels, r.kernels), (*bias, r.bias)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) =
                    ops::batchnorm_backward_raw(node.value.shape(), cache, val(gamma).data(), &g);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::LayerNorm { input, cache } => {
                let s = node.value.shape();
                vec![(*input, ops::layernorm_backward_raw(s[2] * s[3], cache, &g))]
            }
            Op::Relu { input } => vec![(*input, ops::relu_backward(val(input), &g))],
            Op::ChannelGram { input } => {
                vec![(*input, ops::channel_gram_backward(val(input), &g)?)]
            }
            Op::Concat { a, b } => {
                let (batch, ca, h, w) = val(a).dims4()?;
                let cb = val(b).shape()[1];
                let (ga, gb) = ops::split_channels(&g, batch, ca, cb, h * w);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Gap { input } => vec![(
                *input,
                ops::global_average_pool_backward(val(input).shape(), &g),
            )],
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (dx, dw, db) = ops::dense_backward(val(input), val(weights), &g)?;
                vec![(*input, dx), (*weights, dw), (*bias, db)]
            }
            Op::SoftmaxCrossEntropy { logits, grad } => {
                let scale = g[0];
                vec![(*logits, grad.data().iter().map(|v| v * scale).collect())]
            }
            Op::WeightedSum { input, weights } => {
                vec![(*input, weights.iter().map(|w| w * g[0]).collect())]
            }
        };
        for (to, grad) in sends {
            self.send(to, grad);
        }
        Ok(())
    }
}
