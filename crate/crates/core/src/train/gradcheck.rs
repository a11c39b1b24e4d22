//! Central finite-difference verification of the reverse pass, in f64.
//!
//! Each case builds a small random instance, reduces its output to the
//! scalar `L = sum(y * R)` for a random projection `R`, and compares the
//! backward pass (seeded with `R`) against `(L(x + h) - L(x - h)) / 2h` for
//! every input and learnable parameter. The error of one tensor is
//! `|a - n|_2 / max(|a|_2, |n|_2, 1e-3)`; a case reports the worst tensor over all
//! its instances.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{aug_block, downsample_block, init_conv, shuffle_block, BlockParams};
use crate::channel_ops::{ChannelPermutation, CrossoverPlan, SplitRatio};
use crate::error::Result;
use crate::network::{ArchConfig, Family, Model, Width};
use crate::params::{Parameters, Slot};
use crate::tape::{Tape, Var};
use crate::tensor::{LinearParams, NormParams, Tensor};

use super::softmax_cross_entropy;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub op: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub rows: Vec<CheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    /// Also check a whole (narrow) network on 32x32 inputs.
    pub network: bool,
    /// Scale analytic gradients by 1.01 before comparing. Every row must
    /// then fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 3,
            network: true,
            corrupt: false,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so the ReLU kink is never straddled.
fn away_from_zero(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn randomize_norms<P: Parameters<f64>>(rng: &mut impl Rng, p: &mut P) {
    for n in p.norms_mut() {
        for g in &mut n.gamma {
            *g = rng.random_range(0.5..1.5);
        }
        for b in &mut n.beta {
            *b = rng.random_range(-0.5..0.5);
        }
        for m in &mut n.running_mean {
            *m = rng.random_range(-0.5..0.5);
        }
        for v in &mut n.running_var {
            *v = rng.random_range(0.5..2.0);
        }
    }
}

fn norm2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradients that are exactly zero (a BN shift followed by a linear op and
/// a batch-statistics BN) show only finite-difference noise, so the scale
/// never drops below this.
const SCALE_FLOOR: f64 = 1e-3;

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = norm2(a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm2(a.iter().copied()).max(norm2(n.iter().copied()));
    diff / scale.max(SCALE_FLOOR)
}

fn pick(rng: &mut impl Rng, len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < len => {
            let mut v = index::sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn set_learnable<P: Parameters<f64>>(p: &mut P, k: usize, j: usize, value: f64) {
    let mut idx = 0;
    p.visit_mut(&mut |v| {
        if v.slot == Slot::Learnable {
            if idx == k {
                v.data[j] = value;
            }
            idx += 1;
        }
    });
}

type Forward<'a, P> = dyn Fn(&mut Tape<f64>, &[Var], &P) -> Result<Var> + 'a;

/// Compare analytic and numeric gradients of one instance.
fn check_instance<P: Parameters<f64>>(
    rng: &mut ChaCha8Rng,
    mut inputs: Vec<Tensor<f64>>,
    params: &mut P,
    forward: &Forward<'_, P>,
    max_coords: Option<usize>,
    corrupt: bool,
) -> Result<f64> {
    let mut tape = Tape::training();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| tape.input(x.clone(), format!("in{i}")))
        .collect();
    let out = forward(&mut tape, &vars, params)?;
    let proj = uniform(rng, tape.value(out).shape(), -1.0, 1.0);
    let grads = tape.backward(out, proj.clone())?;

    let loss = |inputs: &[Tensor<f64>], params: &P| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone(), "x")).collect();
        let y = forward(&mut t, &vs, params)?;
        Ok(t.value(y)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut worst: f64 = 0.0;
    let mut first = true;
    let mut compare = |mut analytic: Vec<f64>, numeric: Vec<f64>| {
        if corrupt && first {
            analytic.iter_mut().for_each(|a| *a *= 1.01);
        }
        first = false;
        worst = worst.max(rel_error(&analytic, &numeric));
    };

    for (i, v) in vars.iter().enumerate() {
        let len = inputs[i].len();
        let coords = pick(rng, len, max_coords);
        let analytic = match grads.input(*v) {
            Some(g) => coords.iter().map(|&j| g.data()[j]).collect(),
            None => vec![0.0; coords.len()],
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = loss(&inputs, params)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let down = loss(&inputs, params)?;
            inputs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
        compare(analytic, numeric);
    }

    let mut snapshot = Vec::new();
    params.visit(&mut |v| {
        if v.slot == Slot::Learnable {
            snapshot.push((v.name.clone(), v.data.to_vec()));
        }
    });
    for (k, (name, orig)) in snapshot.iter().enumerate() {
        let coords = pick(rng, orig.len(), max_coords);
        let analytic = match grads.param(name) {
            Some(g) => coords.iter().map(|&j| g[j]).collect(),
            None => vec![0.0; coords.len()],
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            set_learnable(params, k, j, orig[j] + STEP);
            let up = loss(&inputs, params)?;
            set_learnable(params, k, j, orig[j] - STEP);
            let down = loss(&inputs, params)?;
            set_learnable(params, k, j, orig[j]);
            numeric.push((up - down) / (2.0 * STEP));
        }
        compare(analytic, numeric);
    }
    Ok(worst)
}

struct Runner {
    opts: GradcheckOptions,
    rows: Vec<CheckRow>,
}

impl Runner {
    /// `make` builds one random instance: inputs, parameters and a forward.
    fn case<P: Parameters<f64>>(
        &mut self,
        op: &str,
        max_coords: Option<usize>,
        make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, P),
        forward: &Forward<'_, P>,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(self.rows.len() as u64 + 1);
        let mut worst: f64 = 0.0;
        for _ in 0..self.opts.instances {
            let (inputs, mut params) = make(&mut rng);
            let e = check_instance(
                &mut rng,
                inputs,
                &mut params,
                forward,
                max_coords,
                self.opts.corrupt,
            )?;
            worst = worst.max(e);
        }
        self.push(op, worst, TOLERANCE);
        Ok(())
    }

    fn push(&mut self, op: &str, max_error: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            op: op.to_string(),
            instances: self.opts.instances,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        });
    }

    /// Backward of a permutation must be the inverse permutation, exactly.
    fn adjoint(
        &mut self,
        op: &str,
        channels: usize,
        build: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
        inverse: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed ^ 0xad);
        let mut worst: f64 = 0.0;
        for _ in 0..self.opts.instances {
            let mut tape = Tape::training();
            let x = tape.input(uniform(&mut rng, [2, channels, 3, 3], -1.0, 1.0), "x");
            let y = build(&mut tape, x)?;
            let g = uniform(&mut rng, tape.value(y).shape(), -1.0, 1.0);
            let mut got = tape
                .backward(y, g.clone())?
                .input(x)
                .cloned()
                .expect("gradient reaches the input");
            if self.opts.corrupt {
                got.data_mut()[0] += 1.0;
            }
            worst = worst.max(got.max_abs_diff(&inverse(&g)?));
        }
        self.push(op, worst, 0.0);
        Ok(())
    }
}

fn conv_case(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
    hw: usize,
) -> impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, crate::tensor::ConvParams<f64>) {
    move |rng| {
        let p = init_conv(rng, "conv", c_in, c_out, k, stride, groups);
        (vec![uniform(rng, [2, c_in, hw, hw], -1.0, 1.0)], p)
    }
}

fn tiny_network_config() -> ArchConfig {
    ArchConfig {
        family: Family::AugShuffleNet,
        width: Width::Half,
        stage_channels: [8, 16, 32],
        stage_repeats: [1, 1, 1],
        stem_channels: 8,
        head_channels: 16,
        num_classes: 3,
        split_ratio: Some(SplitRatio::new(0.25).expect("valid ratio")),
    }
}

/// Run every check. Each differentiable op appears exactly once.
pub fn run(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut r = Runner {
        opts,
        rows: Vec::new(),
    };
    let conv: &Forward<'_, crate::tensor::ConvParams<f64>> = &|t, v, p| t.conv2d(v[0], p);
    r.case("conv2d", None, conv_case(3, 4, 3, 1, 1, 5), conv)?;
    r.case("conv2d_stride2", None, conv_case(3, 4, 3, 2, 1, 6), conv)?;
    r.case("conv2d_pointwise", None, conv_case(4, 6, 1, 1, 1, 4), conv)?;
    r.case("conv2d_depthwise", None, conv_case(4, 4, 3, 1, 4, 5), conv)?;
    r.case(
        "conv2d_depthwise_stride2",
        None,
        conv_case(4, 4, 3, 2, 4, 6),
        conv,
    )?;

    let make_norm = |rng: &mut ChaCha8Rng| {
        let mut p = NormParams::identity("bn", 3);
        randomize_norms(rng, &mut p);
        (vec![uniform(rng, [3, 3, 4, 4], -2.0, 2.0)], p)
    };
    r.case("batch_norm_train", None, make_norm, &|t, v, p| {
        t.batch_norm(v[0], p, true)
    })?;
    r.case("batch_norm_eval", None, make_norm, &|t, v, p| {
        t.batch_norm(v[0], p, false)
    })?;

    r.case(
        "relu",
        None,
        |rng| (vec![away_from_zero(rng, [2, 3, 4, 4])], ()),
        &|t, v, _| Ok(t.relu(v[0])),
    )?;
    r.case(
        "global_avg_pool",
        None,
        |rng| (vec![uniform(rng, [2, 3, 4, 4], -1.0, 1.0)], ()),
        &|t, v, _| Ok(t.global_avg_pool(v[0])),
    )?;
    r.case(
        "linear",
        None,
        |rng| {
            let w = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = LinearParams::new("fc", 6, 4, w, b).expect("valid shapes");
            (vec![uniform(rng, [3, 6, 1, 1], -1.0, 1.0)], p)
        },
        &|t, v, p| t.linear(v[0], p),
    )?;
    r.case(
        "concat",
        None,
        |rng| {
            (
                vec![
                    uniform(rng, [2, 2, 3, 3], -1.0, 1.0),
                    uniform(rng, [2, 3, 3, 3], -1.0, 1.0),
                ],
                (),
            )
        },
        &|t, v, _| t.concat(v[0], v[1], "cat"),
    )?;
    r.case(
        "channel_split",
        None,
        |rng| (vec![uniform(rng, [2, 8, 3, 3], -1.0, 1.0)], ()),
        &|t, v, _| {
            let (bank, branch) = t.channel_split(v[0], SplitRatio::DEFAULT, "split")?;
            let y = t.relu(branch);
            t.concat(y, bank, "cat")
        },
    )?;
    r.case(
        "channel_shuffle",
        None,
        |rng| (vec![uniform(rng, [2, 6, 3, 3], -1.0, 1.0)], ()),
        &|t, v, _| t.channel_shuffle(v[0], "shuffle"),
    )?;
    r.case(
        "channel_crossover",
        None,
        |rng| {
            (
                vec![
                    uniform(rng, [2, 3, 3, 3], -1.0, 1.0),
                    uniform(rng, [2, 5, 3, 3], -1.0, 1.0),
                ],
                (),
            )
        },
        &|t, v, _| {
            let (b2, k2) = t.channel_crossover(v[0], v[1], "cross")?;
            t.concat(b2, k2, "cat")
        },
    )?;

    // The loss is not a tape op; check it directly.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5ce);
        let mut worst: f64 = 0.0;
        for _ in 0..opts.instances {
            let mut logits = uniform(&mut rng, [4, 5, 1, 1], -3.0, 3.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let mut analytic = softmax_cross_entropy(&logits, &labels)?.grad.into_data();
            if opts.corrupt {
                analytic.iter_mut().for_each(|a| *a *= 1.01);
            }
            let mut numeric = Vec::with_capacity(analytic.len());
            for j in 0..logits.len() {
                let orig = logits.data()[j];
                logits.data_mut()[j] = orig + STEP;
                let up = softmax_cross_entropy(&logits, &labels)?.loss;
                logits.data_mut()[j] = orig - STEP;
                let down = softmax_cross_entropy(&logits, &labels)?.loss;
                logits.data_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * STEP));
            }
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        r.push("softmax_cross_entropy", worst, TOLERANCE);
    }

    let block_input = |rng: &mut ChaCha8Rng, c: usize| uniform(rng, [2, c, 4, 4], -1.0, 1.0);
    r.case(
        "aug_block",
        None,
        |rng| {
            let mut p =
                BlockParams::augmented(rng, "b", 8, SplitRatio::DEFAULT).expect("valid block");
            randomize_norms(rng, &mut p);
            (vec![block_input(rng, 8)], p)
        },
        &|t, v, p| aug_block(t, v[0], p, SplitRatio::DEFAULT, Default::default(), true),
    )?;
    r.case(
        "v2_block",
        None,
        |rng| {
            let mut p = BlockParams::shuffle(rng, "b", 8).expect("valid block");
            randomize_norms(rng, &mut p);
            (vec![block_input(rng, 8)], p)
        },
        &|t, v, p| shuffle_block(t, v[0], p, true),
    )?;
    r.case(
        "downsample_block",
        None,
        |rng| {
            let mut p = BlockParams::downsample(rng, "d", 8, 16).expect("valid block");
            randomize_norms(rng, &mut p);
            (vec![block_input(rng, 8)], p)
        },
        &|t, v, p| downsample_block(t, v[0], p, true),
    )?;

    if opts.network {
        r.case(
            "network",
            Some(6),
            |rng| {
                let mut m =
                    Model::<f64>::build(tiny_network_config(), rng.random()).expect("valid config");
                randomize_norms(rng, &mut m);
                (vec![uniform(rng, [2, 3, 32, 32], -1.0, 1.0)], m)
            },
            &|t, v, m: &Model<f64>| Ok(m.forward_on(t, v[0], true)?.logits),
        )?;
    }

    r.adjoint(
        "channel_shuffle_adjoint",
        8,
        |t, x| t.channel_shuffle(x, "s"),
        |g| ChannelPermutation::shuffle(8)?.inverse().apply(g),
    )?;
    r.adjoint(
        "channel_crossover_adjoint",
        8,
        |t, x| {
            let bank = t.slice(x, 0, 5, "bank")?;
            let branch = t.slice(x, 5, 3, "branch")?;
            let (b2, k2) = t.channel_crossover(branch, bank, "c")?;
            t.concat(b2, k2, "cat")
        },
        |g| {
            // the tape's input order is (bank, branch); the plan's is (branch, bank)
            let perm = CrossoverPlan::new(3, 5)?.permutation();
            let to_plan = ChannelPermutation::new((5..8).chain(0..5).collect())?;
            to_plan.inverse().apply(&perm.inverse().apply(g)?)
        },
    )?;
    r.adjoint(
        "channel_split_adjoint",
        8,
        |t, x| {
            let (bank, branch) = t.channel_split(x, SplitRatio::DEFAULT, "s")?;
            t.concat(bank, branch, "cat")
        },
        |g| Ok(g.clone()),
    )?;

    Ok(GradcheckReport { rows: r.rows })
}
