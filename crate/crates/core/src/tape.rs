//! Recording tape for forward passes and their reverse-mode gradients.
//!
//! Every network forward runs through a [`Tape`]. Each node keeps its value
//! and a description of the op that produced it; that description is what
//! the cost counter walks. A tape built with [`Tape::training`] additionally
//! keeps what the backward pass needs (weights, normalisation statistics).

use indexmap::IndexMap;

use crate::channel_ops::{ChannelPermutation, CrossoverPlan, SplitRatio};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    self, axpy, batch_statistics, dot, normalize, valid_range, ConvParams, LinearParams,
    NormParams, Scalar, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What produced a node. Shapes of inputs and outputs live on the nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Norm {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Concat,
    Slice {
        start: usize,
        count: usize,
    },
    Permute(ChannelPermutation),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv { .. } => "conv",
            OpKind::Norm { .. } => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear { .. } => "linear",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Permute(_) => "permute",
        }
    }
}

enum Saved<T> {
    Nothing,
    Weight(Tensor<T>),
    Norm {
        gamma: Vec<T>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Linear(Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    label: String,
    kind: OpKind,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

/// Batch statistics produced by a training-mode normalisation, waiting to be
/// folded into the running estimates of the named layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Read-only view of one recorded op.
#[derive(Debug)]
pub struct OpRecord<'a> {
    pub var: Var,
    pub label: &'a str,
    pub kind: &'a OpKind,
    pub inputs: &'a [Var],
    pub output_shape: [usize; 4],
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
    stats: Vec<StatUpdate>,
}

impl<T: Scalar> Tape<T> {
    /// Tape that keeps everything needed for [`Tape::backward`].
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            stats: Vec::new(),
        }
    }

    /// Tape for forward-only evaluation.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::training()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    pub fn records(&self) -> impl Iterator<Item = OpRecord<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| OpRecord {
            var: Var(i),
            label: &n.label,
            kind: &n.kind,
            inputs: &n.inputs,
            output_shape: n.value.shape(),
        })
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        label: String,
        kind: OpKind,
        inputs: Vec<Var>,
        saved: Saved<T>,
    ) -> Var {
        let saved = if self.recording {
            saved
        } else {
            Saved::Nothing
        };
        self.nodes.push(Node {
            value,
            label,
            kind,
            inputs,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived_label(&self, x: Var, suffix: &str) -> String {
        format!("{}.{suffix}", self.label(x))
    }

    pub fn input(&mut self, value: Tensor<T>, label: impl Into<String>) -> Var {
        self.push(value, label.into(), OpKind::Input, vec![], Saved::Nothing)
    }

    pub fn conv2d(&mut self, x: Var, p: &ConvParams<T>) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), p)?;
        let kind = OpKind::Conv {
            in_channels: p.in_channels(),
            out_channels: p.out_channels(),
            kernel: p.kernel(),
            stride: p.stride,
            padding: p.padding,
            groups: p.groups,
        };
        let saved = if self.recording {
            Saved::Weight(p.weight.clone())
        } else {
            Saved::Nothing
        };
        Ok(self.push(out, p.name.clone(), kind, vec![x], saved))
    }

    /// Training mode normalises with batch statistics and queues a
    /// [`StatUpdate`]; inference mode uses the running estimates.
    pub fn batch_norm(&mut self, x: Var, p: &NormParams<T>, training: bool) -> Result<Var> {
        let input = self.value(x);
        p.check(input)?;
        let (mean, var) = if training {
            batch_statistics(input)
        } else {
            (
                p.running_mean.iter().map(|v| v.to_f64()).collect(),
                p.running_var.iter().map(|v| v.to_f64()).collect(),
            )
        };
        let out = normalize(input, &mean, &var, &p.gamma, &p.beta, p.eps);
        let count = input.batch() * input.plane();
        let inv_std = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
        if training {
            self.stats.push(StatUpdate {
                name: p.name.clone(),
                mean: mean.clone(),
                var,
                count,
            });
        }
        let saved = Saved::Norm {
            gamma: p.gamma.clone(),
            mean,
            inv_std,
            training,
        };
        Ok(self.push(
            out,
            p.name.clone(),
            OpKind::Norm {
                channels: p.channels(),
            },
            vec![x],
            saved,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let label = self.derived_label(x, "relu");
        self.push(out, label, OpKind::Relu, vec![x], Saved::Nothing)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = tensor::global_avg_pool(self.value(x));
        self.push(
            out,
            "pool".into(),
            OpKind::GlobalAvgPool,
            vec![x],
            Saved::Nothing,
        )
    }

    pub fn linear(&mut self, x: Var, p: &LinearParams<T>) -> Result<Var> {
        let out = tensor::linear(self.value(x), p)?;
        let kind = OpKind::Linear {
            in_features: p.in_features,
            out_features: p.out_features,
        };
        let saved = if self.recording {
            Saved::Linear(p.weight.clone())
        } else {
            Saved::Nothing
        };
        Ok(self.push(out, p.name.clone(), kind, vec![x], saved))
    }

    pub fn concat(&mut self, a: Var, b: Var, label: impl Into<String>) -> Result<Var> {
        let out = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            label.into(),
            OpKind::Concat,
            vec![a, b],
            Saved::Nothing,
        ))
    }

    pub fn slice(
        &mut self,
        x: Var,
        start: usize,
        count: usize,
        label: impl Into<String>,
    ) -> Result<Var> {
        let out = self.value(x).slice_channels(start, count)?;
        Ok(self.push(
            out,
            label.into(),
            OpKind::Slice { start, count },
            vec![x],
            Saved::Nothing,
        ))
    }

    pub fn permute(
        &mut self,
        x: Var,
        perm: ChannelPermutation,
        label: impl Into<String>,
    ) -> Result<Var> {
        let out = perm.apply(self.value(x))?;
        Ok(self.push(
            out,
            label.into(),
            OpKind::Permute(perm),
            vec![x],
            Saved::Nothing,
        ))
    }

    /// Returns `(bank, branch)`.
    pub fn channel_split(&mut self, x: Var, r: SplitRatio, label: &str) -> Result<(Var, Var)> {
        let c = self.value(x).channels();
        let branch = r.branch_channels(c)?;
        let bank = self.slice(x, 0, c - branch, format!("{label}.bank"))?;
        let br = self.slice(x, c - branch, branch, format!("{label}.branch"))?;
        Ok((bank, br))
    }

    pub fn channel_shuffle(&mut self, x: Var, label: impl Into<String>) -> Result<Var> {
        let perm = ChannelPermutation::shuffle(self.value(x).channels())?;
        self.permute(x, perm, label)
    }

    /// Returns `(branch2, bank2)`, each half the block width.
    pub fn channel_crossover(&mut self, branch: Var, bank: Var, label: &str) -> Result<(Var, Var)> {
        let plan = CrossoverPlan::new(self.value(branch).channels(), self.value(bank).channels())?;
        let joined = self.concat(branch, bank, format!("{label}.join"))?;
        let mixed = self.permute(joined, plan.permutation(), format!("{label}.exchange"))?;
        let half = plan.half();
        let b2 = self.slice(mixed, 0, half, format!("{label}.branch"))?;
        let k2 = self.slice(mixed, half, half, format!("{label}.bank"))?;
        Ok((b2, k2))
    }

    /// Propagate `seed` (the gradient of the loss with respect to `output`)
    /// back through every recorded op.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        if !self.recording {
            return Err(Error::Usage(
                "backward needs a tape created with Tape::training".into(),
            ));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} is not on this tape",
                output.0
            )));
        }
        if seed.shape() != self.value(output).shape() {
            return dim_err(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut result = Gradients::default();

        for i in (0..=output.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match (&node.kind, &node.saved) {
                (OpKind::Input, _) => {
                    result.inputs.insert(i, dy);
                }
                (
                    OpKind::Conv {
                        stride,
                        padding,
                        groups,
                        ..
                    },
                    Saved::Weight(w),
                ) => {
                    let x = self.value(node.inputs[0]);
                    let (dx, dw) = conv2d_backward(x, &dy, w, *stride, *padding, *groups);
                    result.accumulate(format!("{}.weight", node.label), dw);
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (
                    OpKind::Norm { .. },
                    Saved::Norm {
                        gamma,
                        mean,
                        inv_std,
                        training,
                    },
                ) => {
                    let x = self.value(node.inputs[0]);
                    let (dx, dg, db) = batch_norm_backward(x, &dy, gamma, mean, inv_std, *training);
                    result.accumulate(format!("{}.gamma", node.label), dg);
                    result.accumulate(format!("{}.beta", node.label), db);
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (OpKind::Relu, _) => {
                    let x = self.value(node.inputs[0]);
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (OpKind::GlobalAvgPool, _) => {
                    let x = self.value(node.inputs[0]);
                    let mut dx = Tensor::zeros(x.shape());
                    let p = x.plane() as f64;
                    for n in 0..x.batch() {
                        for c in 0..x.channels() {
                            let g = T::from_f64(dy.get(n, c, 0, 0).to_f64() / p);
                            dx.channel_mut(n, c).fill(g);
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (
                    OpKind::Linear {
                        in_features,
                        out_features,
                    },
                    Saved::Linear(w),
                ) => {
                    let x = self.value(node.inputs[0]);
                    let (dx, dw, db) = linear_backward(x, &dy, w, *in_features, *out_features);
                    result.accumulate(format!("{}.weight", node.label), dw);
                    result.accumulate(format!("{}.bias", node.label), db);
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (OpKind::Concat, _) => {
                    let ca = self.value(node.inputs[0]).channels();
                    let cb = self.value(node.inputs[1]).channels();
                    accumulate(&mut grads, node.inputs[0], dy.slice_channels(0, ca)?)?;
                    accumulate(&mut grads, node.inputs[1], dy.slice_channels(ca, cb)?)?;
                }
                (OpKind::Slice { start, count }, _) => {
                    let x = self.value(node.inputs[0]);
                    let mut dx = Tensor::zeros(x.shape());
                    for n in 0..x.batch() {
                        for c in 0..*count {
                            dx.channel_mut(n, start + c)
                                .copy_from_slice(dy.channel(n, c));
                        }
                    }
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (OpKind::Permute(perm), _) => {
                    let dx = perm.inverse().apply(&dy)?;
                    accumulate(&mut grads, node.inputs[0], dx)?;
                }
                (kind, _) => {
                    return Err(Error::Usage(format!(
                        "node {i} ({}) was recorded without saved state",
                        kind.name()
                    )))
                }
            }
        }
        Ok(result)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Parameter gradients keyed by parameter name, plus gradients with respect
/// to the tape's input nodes.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    params: IndexMap<String, Vec<T>>,
    inputs: IndexMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn accumulate(&mut self, name: String, g: Vec<T>) {
        match self.params.get_mut(&name) {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(g) {
                    *a = T::from_f64(a.to_f64() + b.to_f64());
                }
            }
            None => {
                self.params.insert(name, g);
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Gradient with respect to an input node, if any flowed there.
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }
}

/// Gradients of a bias-free convolution with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Tensor<T>, Vec<T>) {
    let [n, c_in, h, w] = x.shape();
    let [_, c_out, oh, ow] = dy.shape();
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    let k = weight.height();
    let (s, pad) = (stride, padding);
    let wd = weight.data();
    let pointwise = k == 1 && s == 1 && pad == 0;

    let mut dx = Tensor::zeros(x.shape());
    if pointwise && groups == 1 {
        let (px, pdy) = (tensor::pack_channels(x), tensor::pack_channels(dy));
        let mut wt = Vec::with_capacity(wd.len());
        for ci in 0..c_in {
            wt.extend((0..c_out).map(|co| wd[co * c_in + ci]));
        }
        tensor::pointwise_into(&pdy, &wt, c_out, &mut dx);
        let len = n * h * w;
        let mut dw = Vec::with_capacity(wd.len());
        for co in 0..c_out {
            for ci in 0..c_in {
                dw.push(T::from_f64(dot(
                    &pdy[co * len..][..len],
                    &px[ci * len..][..len],
                )));
            }
        }
        return (dx, dw);
    }
    let mut acc = vec![0.0f64; h * w];
    for b in 0..n {
        for ci in 0..c_in {
            let g = ci / cin_g;
            let cig = ci % cin_g;
            acc.fill(0.0);
            for co in g * cout_g..(g + 1) * cout_g {
                let dyc = dy.channel(b, co);
                if pointwise {
                    axpy(&mut acc, wd[co * cin_g + cig].to_f64(), dyc);
                    continue;
                }
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(oh, h, ky, s, pad);
                    for kx in 0..k {
                        let wv = wd[((co * cin_g + cig) * k + ky) * k + kx].to_f64();
                        let (xlo, xhi) = valid_range(ow, w, kx, s, pad);
                        for oy in ylo..yhi {
                            let row = &mut acc[(oy * s + ky - pad) * w..][..w];
                            let src = &dyc[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let from = xlo + kx - pad;
                                axpy(&mut row[from..from + (xhi - xlo)], wv, &src[xlo..xhi]);
                            } else {
                                for ox in xlo..xhi {
                                    row[ox * s + kx - pad] += wv * src[ox].to_f64();
                                }
                            }
                        }
                    }
                }
            }
            for (d, &a) in dx.channel_mut(b, ci).iter_mut().zip(&acc) {
                *d = T::from_f64(a);
            }
        }
    }

    // Batch-outer so each image is read once per output channel.
    let mut sums = vec![0.0f64; wd.len()];
    for b in 0..n {
        for co in 0..c_out {
            let g = co / cout_g;
            let dyc = dy.channel(b, co);
            for cig in 0..cin_g {
                let src = x.channel(b, g * cin_g + cig);
                let base = (co * cin_g + cig) * k * k;
                if pointwise {
                    sums[base] += dot(dyc, src);
                    continue;
                }
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(oh, h, ky, s, pad);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(ow, w, kx, s, pad);
                        let mut part = 0.0f64;
                        for oy in ylo..yhi {
                            let row = &src[(oy * s + ky - pad) * w..][..w];
                            let drow = &dyc[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let from = xlo + kx - pad;
                                part += dot(&drow[xlo..xhi], &row[from..from + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    part += drow[ox].to_f64() * row[ox * s + kx - pad].to_f64();
                                }
                            }
                        }
                        sums[base + ky * k + kx] += part;
                    }
                }
            }
        }
    }
    (dx, sums.into_iter().map(T::from_f64).collect())
}

/// Gradients of batch normalisation. With `training` the statistics are
/// functions of the input and contribute to `dx`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    gamma: &[T],
    mean: &[f64],
    inv_std: &[f64],
    training: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = x.channels();
    let count = (x.batch() * x.plane()) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..x.batch() {
            for (&d, &v) in dy.channel(n, ch).iter().zip(x.channel(n, ch)) {
                let d = d.to_f64();
                sum_dy += d;
                sum_dy_xhat += d * (v.to_f64() - mu) * is;
            }
        }
        dgamma[ch] = T::from_f64(sum_dy_xhat);
        dbeta[ch] = T::from_f64(sum_dy);
        let g = gamma[ch].to_f64();
        for n in 0..x.batch() {
            let src = x.channel(n, ch).to_vec();
            let dyc = dy.channel(n, ch).to_vec();
            for ((o, v), d) in dx.channel_mut(n, ch).iter_mut().zip(src).zip(dyc) {
                let d = d.to_f64();
                let val = if training {
                    let xhat = (v.to_f64() - mu) * is;
                    g * is / count * (count * d - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * is * d
                };
                *o = T::from_f64(val);
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    weight: &[T],
    f: usize,
    o: usize,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let n = x.batch();
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    for b in 0..n {
        let drow = &dyd[b * o..(b + 1) * o];
        for i in 0..f {
            let s: f64 = weight[i * o..(i + 1) * o]
                .iter()
                .zip(drow)
                .map(|(w, d)| w.to_f64() * d.to_f64())
                .sum();
            dx.data_mut()[b * f + i] = T::from_f64(s);
        }
    }
    let mut dw = vec![T::zero(); f * o];
    for i in 0..f {
        for j in 0..o {
            let s: f64 = (0..n)
                .map(|b| xd[b * f + i].to_f64() * dyd[b * o + j].to_f64())
                .sum();
            dw[i * o + j] = T::from_f64(s);
        }
    }
    let db = (0..o)
        .map(|j| T::from_f64((0..n).map(|b| dyd[b * o + j].to_f64()).sum()))
        .collect();
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_needs_a_recording_tape() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.input(Tensor::zeros([1, 2, 2, 2]), "x");
        let y = tape.relu(x);
        assert!(matches!(
            tape.backward(y, Tensor::zeros([1, 2, 2, 2])),
            Err(Error::Usage(_))
        ));
        let empty = Tape::<f64>::training();
        assert!(matches!(
            empty.backward(Var(0), Tensor::zeros([1, 1, 1, 1])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::<f64>::training();
        let x = tape.input(Tensor::zeros([1, 2, 2, 2]), "x");
        assert!(tape.backward(x, Tensor::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn shuffle_backward_is_inverse_interleave() {
        let mut tape = Tape::<f32>::training();
        let x = tape.input(Tensor::zeros([1, 4, 1, 1]), "x");
        let y = tape.channel_shuffle(x, "shuffle").unwrap();
        let g = Tensor::new([1, 4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let grads = tape.backward(y, g).unwrap();
        // output order was [c0, c2, c1, c3]
        assert_eq!(grads.input(x).unwrap().data(), &[10.0, 12.0, 11.0, 13.0]);
    }

    #[test]
    fn fan_out_gradients_add_up() {
        let mut tape = Tape::<f64>::training();
        let x = tape.input(Tensor::full([1, 1, 1, 1], 2.0), "x");
        let y = tape.concat(x, x, "twice").unwrap();
        let grads = tape
            .backward(y, Tensor::new([1, 2, 1, 1], vec![1.5, 0.25]).unwrap())
            .unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.75]);
    }

    #[test]
    fn norm_queues_stat_updates_only_in_training() {
        let p = NormParams::<f64>::identity("bn", 2);
        let mut tape = Tape::training();
        let x = tape.input(
            Tensor::from_fn([2, 2, 2, 2], |[n, c, y, _]| (n + c + y) as f64),
            "x",
        );
        tape.batch_norm(x, &p, false).unwrap();
        assert!(tape.take_stat_updates().is_empty());
        tape.batch_norm(x, &p, true).unwrap();
        let ups = tape.take_stat_updates();
        assert_eq!(ups.len(), 1);
        assert_eq!(ups[0].count, 8);
    }
}
