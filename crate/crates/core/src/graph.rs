//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and a reverse sweep over the node list is a reverse topological order.

use crate::error::{Error, Result};
use crate::loss::{self, DiceClasses, LabelVolume};
use crate::ops::batchnorm::{
    batchnorm_inference, batchnorm_inference_backward, batchnorm_train, batchnorm_train_backward,
    BatchNormSaved, BatchNormState,
};
use crate::ops::conv::{conv3d_backward_parts, conv3d_forward, ConvAlgo, ConvKernel, Padding};
use crate::ops::{relu_backward, softmax_backward, softmax_channels, BatchNormMode, DropoutMask};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Input,
    Leaf,
    Param(usize),
    Conv {
        input: Var,
        weight: Var,
        dilation: usize,
        padding: Padding,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<S>,
    },
    BatchNormFrozen {
        input: Var,
        gamma: Var,
        beta: Var,
        state: BatchNormState<S>,
    },
    Relu(Var),
    Add(Var, Var),
    /// `branch + skip`, with `skip` zero-extended along channels.
    AddPadded {
        skip: Var,
        branch: Var,
    },
    Mul(Var, Var),
    Softmax(Var),
    Dropout {
        input: Var,
        mask: Tensor<S>,
    },
    Sum(Var),
    /// Scalar loss of `scores`, with its gradient computed at forward time.
    Loss {
        scores: Var,
        grad: Tensor<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    algo: ConvAlgo,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new(ConvAlgo::default())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new(algo: ConvAlgo) -> Self {
        Graph {
            nodes: Vec::new(),
            algo,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf without a parameter slot.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf tied to trainable parameter `index`.
    pub fn param(&mut self, index: usize, value: Tensor<S>) -> Var {
        self.push(value, Op::Param(index), true)
    }

    pub fn conv(&mut self, input: Var, weight: Var, dilation: usize, padding: Padding) -> Result<Var> {
        let kernel = ConvKernel::new(self.value(weight).clone(), dilation)?;
        let out = conv3d_forward(self.value(input), &kernel, padding, self.algo)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                dilation,
                padding,
            },
            rg,
        ))
    }

    /// Normalisation with `gamma`/`beta` taken from the graph; `state`
    /// supplies epsilon, momentum and running statistics (updated in train
    /// mode).
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<S>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        state.gamma = self.value(gamma).clone();
        state.beta = self.value(beta).clone();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        match mode {
            BatchNormMode::Train => {
                let (out, saved) = batchnorm_train(self.value(input), state)?;
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        saved,
                    },
                    rg,
                ))
            }
            BatchNormMode::Inference => {
                let out = batchnorm_inference(self.value(input), state)?;
                Ok(self.push(
                    out,
                    Op::BatchNormFrozen {
                        input,
                        gamma,
                        beta,
                        state: state.clone(),
                    },
                    rg,
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Residual merge; when `skip` has fewer channels than `branch` it is
    /// zero-extended.
    pub fn add_residual(&mut self, skip: Var, branch: Var) -> Result<Var> {
        if self.value(skip).dims() == self.value(branch).dims() {
            return self.add(skip, branch);
        }
        let out = add_channel_padded(self.value(branch), self.value(skip))?;
        let rg = self.rg(skip) || self.rg(branch);
        Ok(self.push(out, Op::AddPadded { skip, branch }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_channels(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn dropout(&mut self, x: Var, keep: f64, rng: &mut Rng) -> Result<Var> {
        let mask = DropoutMask::sample(keep, self.value(x).dims(), rng)?;
        self.dropout_with_mask(x, mask)
    }

    pub fn dropout_with_mask(&mut self, x: Var, mask: DropoutMask<S>) -> Result<Var> {
        let out = mask.apply(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Dropout {
                input: x,
                mask: mask.mask().clone(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn cross_entropy(&mut self, scores: Var, truth: &LabelVolume) -> Result<Var> {
        let (l, grad) = loss::cross_entropy(self.value(scores), truth)?;
        let rg = self.rg(scores);
        Ok(self.push(Tensor::scalar(l), Op::Loss { scores, grad }, rg))
    }

    pub fn dice_loss(&mut self, scores: Var, truth: &LabelVolume, classes: DiceClasses) -> Result<Var> {
        let (l, grad) = loss::dice_loss(self.value(scores), truth, classes)?;
        let rg = self.rg(scores);
        Ok(self.push(Tensor::scalar(l), Op::Loss { scores, grad }, rg))
    }

    /// Gradients of scalar node `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.dims()
            )));
        }
        root.value.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims().to_vec(), S::one())?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>| -> Result<()> {
                assert!(v.0 < i, "tape order violated");
                if !self.rg(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input | Op::Leaf | Op::Param(_) => {}
                Op::Conv {
                    input,
                    weight,
                    dilation,
                    padding,
                } => {
                    let kernel = ConvKernel::new(self.value(*weight).clone(), *dilation)?;
                    let (gi, gw) = conv3d_backward_parts(
                        &g,
                        self.value(*input),
                        &kernel,
                        *padding,
                        self.algo,
                        self.rg(*input),
                    )?;
                    if let Some(gi) = gi {
                        send(*input, gi, &mut grads)?;
                    }
                    send(*weight, gw, &mut grads)?;
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dg, db) = batchnorm_train_backward(&g, saved, self.value(*gamma))?;
                    send(*input, dx, &mut grads)?;
                    send(*gamma, dg, &mut grads)?;
                    send(*beta, db, &mut grads)?;
                }
                Op::BatchNormFrozen {
                    input,
                    gamma,
                    beta,
                    state,
                } => {
                    let (dx, dg, db) = batchnorm_inference_backward(&g, self.value(*input), state)?;
                    send(*input, dx, &mut grads)?;
                    send(*gamma, dg, &mut grads)?;
                    send(*beta, db, &mut grads)?;
                }
                Op::Relu(x) => {
                    let dx = relu_backward(&g, self.value(*x))?;
                    send(*x, dx, &mut grads)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads)?;
                    send(*b, g.clone(), &mut grads)?;
                }
                Op::AddPadded { skip, branch } => {
                    let c = self.value(*skip).channels();
                    let n = g.numel() / g.channels();
                    let head = Tensor::from_vec(self.value(*skip).dims().to_vec(), g.data()[..c * n].to_vec())?;
                    send(*skip, head, &mut grads)?;
                    send(*branch, g.clone(), &mut grads)?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    send(*a, da, &mut grads)?;
                    send(*b, db, &mut grads)?;
                }
                Op::Softmax(x) => {
                    let dx = softmax_backward(&g, &node.value)?;
                    send(*x, dx, &mut grads)?;
                }
                Op::Dropout { input, mask } => {
                    send(*input, g.mul(mask)?, &mut grads)?;
                }
                Op::Sum(x) => {
                    let v = g.item();
                    send(*x, Tensor::full(self.value(*x).dims().to_vec(), v)?, &mut grads)?;
                }
                Op::Loss { scores, grad } => {
                    send(*scores, grad.scale(g.item()), &mut grads)?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(p) => Some((p, Var(i))),
                    _ => None,
                })
                .collect(),
        })
    }
}

/// `branch + skip` where `skip` has `c_skip <= c_branch` channels and the
/// missing channels count as zero.
pub fn add_channel_padded<S: Scalar>(branch: &Tensor<S>, skip: &Tensor<S>) -> Result<Tensor<S>> {
    let (bs, ss) = (branch.spatial()?, skip.spatial()?);
    if bs != ss || skip.channels() > branch.channels() {
        return Err(Error::ShapeMismatch {
            op: "residual add",
            left: branch.dims().to_vec(),
            right: skip.dims().to_vec(),
        });
    }
    let mut out = branch.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(skip.data()) {
        *o = *o + s;
    }
    Ok(out)
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(usize, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for trainable slots `0..count`, accumulating over repeated
    /// uses of a slot; `shapes` supplies zeros for unreachable parameters.
    pub fn param_grads(&self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<S>>> {
        let mut out: Vec<Tensor<S>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect::<Result<_>>()?;
        for &(p, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[p].add_assign(g)?;
            }
        }
        Ok(out)
    }
}
