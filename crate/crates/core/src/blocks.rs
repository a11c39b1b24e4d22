//! Augmented shuffle block, the original shuffle block, and the stride-2
//! downsample block.
//!
//! Shapes through an augmented block with `M` input channels and ratio `r`:
//!
//! ```text
//! x (M) ── split ──┬── bank   (1-r)M ───────────────┐
//!                  └── branch  rM → 1x1 → BN         │
//!                                → 3x3 dw → BN ── crossover ─┬── bank2   M/2 ──────────┐
//!                                                             └── branch2 M/2 → 1x1 → BN → ReLU ─ concat → shuffle (M)
//! ```

use rand::Rng;

use crate::channel_ops::SplitRatio;
use crate::error::{config_err, Result};
use crate::params::{delegate_parameters, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvParams, NormParams, Scalar, Tensor};

/// Zero-mean uniform weights with variance `2 / fan_in`.
pub fn init_conv<T: Scalar>(
    rng: &mut impl Rng,
    name: impl Into<String>,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    groups: usize,
) -> ConvParams<T> {
    let fan_in = (c_in / groups) * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    let weight = Tensor::from_fn([c_out, c_in / groups, kernel, kernel], |_| {
        T::from_f64(rng.random_range(-bound..bound))
    });
    ConvParams::new(name, weight, stride, kernel / 2, groups).expect("valid conv geometry")
}

/// Left branch of a downsample block: 3x3 depthwise stride 2, then 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct LeftBranch<T = f32> {
    pub dwconv: ConvParams<T>,
    pub norm_dw: NormParams<T>,
    pub conv: ConvParams<T>,
    pub norm: NormParams<T>,
}

delegate_parameters!(LeftBranch {
    dwconv,
    norm_dw,
    conv,
    norm
});

/// Learnable state of one block. `left` is present only for downsample
/// blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub conv1: ConvParams<T>,
    pub norm1: NormParams<T>,
    pub dwconv: ConvParams<T>,
    pub norm2: NormParams<T>,
    pub conv2: ConvParams<T>,
    pub norm3: NormParams<T>,
    pub left: Option<LeftBranch<T>>,
}

delegate_parameters!(BlockParams { conv1, norm1, dwconv, norm2, conv2, norm3 } opt { left });

impl<T: Scalar> BlockParams<T> {
    fn transform(
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        mid: usize,
        c_out: usize,
        dw_stride: usize,
    ) -> Self {
        Self {
            conv1: init_conv(rng, format!("{name}.conv1"), c_in, mid, 1, 1, 1),
            norm1: NormParams::identity(format!("{name}.norm1"), mid),
            dwconv: init_conv(rng, format!("{name}.dwconv"), mid, mid, 3, dw_stride, mid),
            norm2: NormParams::identity(format!("{name}.norm2"), mid),
            conv2: init_conv(rng, format!("{name}.conv2"), c_out, c_out, 1, 1, 1),
            norm3: NormParams::identity(format!("{name}.norm3"), c_out),
            left: None,
        }
    }

    /// Augmented block over `m` channels: `rM -> rM -> rM`, then `M/2 -> M/2`.
    pub fn augmented(rng: &mut impl Rng, name: &str, m: usize, r: SplitRatio) -> Result<Self> {
        let x = r.branch_channels(m)?;
        Ok(Self::transform(rng, name, x, x, m / 2, 1))
    }

    /// Original shuffle block over `m` channels: three `M/2 -> M/2` layers.
    pub fn shuffle(rng: &mut impl Rng, name: &str, m: usize) -> Result<Self> {
        if !m.is_multiple_of(2) || m == 0 {
            return config_err(format!("shuffle block needs an even width, got {m}"));
        }
        Ok(Self::transform(rng, name, m / 2, m / 2, m / 2, 1))
    }

    pub fn downsample(rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        if !c_out.is_multiple_of(2) || c_out == 0 {
            return config_err(format!("downsample output width must be even, got {c_out}"));
        }
        let half = c_out / 2;
        // right branch conv1 reads the full input
        let mut p = Self::transform(rng, &format!("{name}.right"), c_in, half, half, 2);
        p.left = Some(LeftBranch {
            dwconv: init_conv(rng, format!("{name}.left.dwconv"), c_in, c_in, 3, 2, c_in),
            norm_dw: NormParams::identity(format!("{name}.left.norm_dw"), c_in),
            conv: init_conv(rng, format!("{name}.left.conv"), c_in, half, 1, 1, 1),
            norm: NormParams::identity(format!("{name}.left.norm"), half),
        });
        Ok(p)
    }

    fn check_transform(&self, c_in: usize, mid: usize, c2: usize) -> Result<()> {
        let ok = self.conv1.in_channels() == c_in
            && self.conv1.out_channels() == mid
            && self.conv1.kernel() == 1
            && self.dwconv.is_depthwise()
            && self.dwconv.in_channels() == mid
            && self.conv2.in_channels() == c2
            && self.conv2.out_channels() == c2
            && self.conv2.kernel() == 1;
        if !ok {
            return config_err(format!(
                "{}: expected widths {c_in}->{mid} | dw {mid} | {c2}->{c2}, got {}->{} | dw {} | {}->{}",
                self.conv1.name,
                self.conv1.in_channels(),
                self.conv1.out_channels(),
                self.dwconv.out_channels(),
                self.conv2.in_channels(),
                self.conv2.out_channels()
            ));
        }
        Ok(())
    }
}

/// Knobs that turn the augmented block back into the original one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugVariant {
    pub relu_after_conv1: bool,
    pub crossover: bool,
}

impl Default for AugVariant {
    fn default() -> Self {
        Self {
            relu_after_conv1: false,
            crossover: true,
        }
    }
}

fn block_label<T: Scalar>(p: &BlockParams<T>) -> String {
    p.conv1
        .name
        .strip_suffix(".conv1")
        .unwrap_or(&p.conv1.name)
        .to_string()
}

fn conv_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    conv: &ConvParams<T>,
    norm: &NormParams<T>,
    relu: bool,
    training: bool,
) -> Result<Var> {
    let y = tape.conv2d(x, conv)?;
    let y = tape.batch_norm(y, norm, training)?;
    Ok(if relu { tape.relu(y) } else { y })
}

pub fn aug_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<T>,
    r: SplitRatio,
    variant: AugVariant,
    training: bool,
) -> Result<Var> {
    let m = tape.value(x).channels();
    let xr = r.branch_channels(m)?;
    p.check_transform(xr, xr, m / 2)?;
    if !variant.crossover && xr != m / 2 {
        return config_err("without crossover the branch must already be half the width");
    }
    let name = block_label(p);
    let (bank, branch) = tape.channel_split(x, r, &format!("{name}.split"))?;
    let y = conv_norm(
        tape,
        branch,
        &p.conv1,
        &p.norm1,
        variant.relu_after_conv1,
        training,
    )?;
    let y = conv_norm(tape, y, &p.dwconv, &p.norm2, false, training)?;
    let (y, bank) = if variant.crossover {
        tape.channel_crossover(y, bank, &format!("{name}.crossover"))?
    } else {
        (y, bank)
    };
    let y = conv_norm(tape, y, &p.conv2, &p.norm3, true, training)?;
    let joined = tape.concat(bank, y, format!("{name}.concat"))?;
    tape.channel_shuffle(joined, format!("{name}.shuffle"))
}

pub fn shuffle_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<T>,
    training: bool,
) -> Result<Var> {
    let m = tape.value(x).channels();
    if !m.is_multiple_of(2) {
        return config_err(format!("shuffle block needs an even width, got {m}"));
    }
    p.check_transform(m / 2, m / 2, m / 2)?;
    let name = block_label(p);
    let (bank, branch) = tape.channel_split(x, SplitRatio::HALF, &format!("{name}.split"))?;
    let y = conv_norm(tape, branch, &p.conv1, &p.norm1, true, training)?;
    let y = conv_norm(tape, y, &p.dwconv, &p.norm2, false, training)?;
    let y = conv_norm(tape, y, &p.conv2, &p.norm3, true, training)?;
    let joined = tape.concat(bank, y, format!("{name}.concat"))?;
    tape.channel_shuffle(joined, format!("{name}.shuffle"))
}

pub fn downsample_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockParams<T>,
    training: bool,
) -> Result<Var> {
    let Some(left) = &p.left else {
        return config_err(format!("{} has no left branch", p.conv1.name));
    };
    let [_, c_in, h, w] = tape.value(x).shape();
    if h % 2 != 0 || w % 2 != 0 {
        return config_err(format!("downsample needs even spatial size, got {h}x{w}"));
    }
    let half = p.conv2.out_channels();
    p.check_transform(c_in, half, half)?;
    if left.dwconv.in_channels() != c_in
        || !left.dwconv.is_depthwise()
        || left.conv.out_channels() != half
    {
        return config_err(format!(
            "{}: left branch widths do not match",
            left.conv.name
        ));
    }
    let l = conv_norm(tape, x, &left.dwconv, &left.norm_dw, false, training)?;
    let l = conv_norm(tape, l, &left.conv, &left.norm, true, training)?;
    let r = conv_norm(tape, x, &p.conv1, &p.norm1, true, training)?;
    let r = conv_norm(tape, r, &p.dwconv, &p.norm2, false, training)?;
    let r = conv_norm(tape, r, &p.conv2, &p.norm3, true, training)?;
    let name = block_label(p);
    let name = name.strip_suffix(".right").unwrap_or(&name);
    let joined = tape.concat(l, r, format!("{name}.concat"))?;
    tape.channel_shuffle(joined, format!("{name}.shuffle"))
}

fn run_tensor<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BlockParams<T>,
    training: bool,
    f: impl FnOnce(&mut Tape<T>, Var, &BlockParams<T>) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let input = tape.input(x.clone(), "x");
    let out = f(&mut tape, input, p)?;
    if training {
        p.commit_stats(&tape.take_stat_updates());
    }
    Ok(tape.value(out).clone())
}

/// Augmented block on a plain tensor. In training mode the block's running
/// statistics are updated.
pub fn aug_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BlockParams<T>,
    r: SplitRatio,
    training: bool,
) -> Result<Tensor<T>> {
    run_tensor(x, p, training, |t, v, p| {
        aug_block(t, v, p, r, AugVariant::default(), training)
    })
}

pub fn v2_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BlockParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    run_tensor(x, p, training, |t, v, p| shuffle_block(t, v, p, training))
}

/// The output width comes from `p`; see [`BlockParams::downsample`].
pub fn downsample_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BlockParams<T>,
    training: bool,
) -> Result<Tensor<T>> {
    run_tensor(x, p, training, |t, v, p| {
        downsample_block(t, v, p, training)
    })
}
