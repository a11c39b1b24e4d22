//! Channel split, channel shuffle and channel crossover.
//!
//! All three are pure re-labelings of channel planes: they never touch the
//! values, so they cost nothing under the multiply-add convention and their
//! adjoint is the inverse permutation.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{concat_channels, Scalar, Tensor};

/// Fraction of the input channels routed into the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SplitRatio(f64);

impl SplitRatio {
    /// Default ratio of the augmented network.
    pub const DEFAULT: SplitRatio = SplitRatio(0.375);
    /// The fixed halving of the original shuffle block.
    pub const HALF: SplitRatio = SplitRatio(0.5);

    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 0.5) {
            return config_err(format!("split ratio must lie in (0, 0.5], got {r}"));
        }
        Ok(Self(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Number of channels `r * channels` sent to the branch. Fails unless both
    /// that and `channels / 2` are whole numbers.
    pub fn branch_channels(self, channels: usize) -> Result<usize> {
        let exact = self.0 * channels as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
            return config_err(format!(
                "split ratio {} of {channels} channels gives {exact} channels",
                self.0
            ));
        }
        if !channels.is_multiple_of(2) {
            return config_err(format!("{channels} channels cannot be halved"));
        }
        Ok(rounded as usize)
    }
}

impl TryFrom<f64> for SplitRatio {
    type Error = crate::error::Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SplitRatio> for f64 {
    fn from(r: SplitRatio) -> f64 {
        r.0
    }
}

impl std::fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A bijection on channel indices: output channel `i` reads input channel
/// `source[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPermutation {
    source: Vec<usize>,
}

impl ChannelPermutation {
    pub fn new(source: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; source.len()];
        for &s in &source {
            if s >= source.len() || std::mem::replace(&mut seen[s], true) {
                return dim_err(format!("{source:?} is not a permutation"));
            }
        }
        Ok(Self { source })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            source: (0..channels).collect(),
        }
    }

    /// Two-group interleave: output `2i` is input `i`, output `2i + 1` is
    /// input `C/2 + i`.
    pub fn shuffle(channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return dim_err(format!(
                "channel shuffle needs an even channel count, got {channels}"
            ));
        }
        let half = channels / 2;
        let source = (0..channels)
            .map(|o| if o % 2 == 0 { o / 2 } else { half + o / 2 })
            .collect();
        Ok(Self { source })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[usize] {
        &self.source
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.source.len()];
        for (o, &s) in self.source.iter().enumerate() {
            inv[s] = o;
        }
        Self { source: inv }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.len() {
            return dim_err(format!(
                "permutation over {} channels applied to {} channels",
                self.len(),
                x.channels()
            ));
        }
        x.gather_channels(&self.source)
    }
}

/// Widths of one crossover: `x` branch channels meet `b` bank channels,
/// `deposit` new maps go to the bank and `withdraw` old maps leave it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossoverPlan {
    pub branch: usize,
    pub bank: usize,
    pub deposit: usize,
    pub withdraw: usize,
}

impl CrossoverPlan {
    pub fn new(branch: usize, bank: usize) -> Result<Self> {
        let m = branch + bank;
        if !m.is_multiple_of(2) || branch == 0 || branch > m / 2 {
            return dim_err(format!(
                "crossover needs an even total and branch <= half, got branch {branch}, bank {bank}"
            ));
        }
        let deposit = branch / 2;
        let withdraw = deposit + (m / 2 - branch);
        Ok(Self {
            branch,
            bank,
            deposit,
            withdraw,
        })
    }

    pub fn half(&self) -> usize {
        (self.branch + self.bank) / 2
    }

    /// Permutation taking `concat(branch, bank)` to `concat(branch2, bank2)`.
    ///
    /// `branch2` = withdrawn bank maps then the retained new maps;
    /// `bank2` = the remaining bank maps then the deposited new maps.
    pub fn permutation(&self) -> ChannelPermutation {
        let (x, b, d, w) = (self.branch, self.bank, self.deposit, self.withdraw);
        let bank = |i: usize| x + i;
        let source = (0..w)
            .map(bank)
            .chain(0..x - d)
            .chain((w..b).map(bank))
            .chain(x - d..x)
            .collect();
        ChannelPermutation { source }
    }
}

/// Split channels into `(bank, branch)`: the first `(1 - r) C` channels are
/// kept aside, the last `r C` go through the feature extractor.
pub fn channel_split<T: Scalar>(x: &Tensor<T>, r: SplitRatio) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.channels();
    let branch = r.branch_channels(c)?;
    let bank = c - branch;
    Ok((x.slice_channels(0, bank)?, x.slice_channels(bank, branch)?))
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ChannelPermutation::shuffle(x.channels())?.apply(x)
}

/// Exchange maps between the depthwise output (`branch`) and the feature
/// bank so that both come out with half the block width.
pub fn channel_crossover<T: Scalar>(
    branch: &Tensor<T>,
    bank: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let plan = CrossoverPlan::new(branch.channels(), bank.channels())?;
    let joined = concat_channels(branch, bank)?;
    let mixed = plan.permutation().apply(&joined)?;
    let half = plan.half();
    Ok((
        mixed.slice_channels(0, half)?,
        mixed.slice_channels(half, half)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Channel `i` of sample 0 is filled with the value `i`.
    fn labelled(c: usize) -> Tensor<f32> {
        Tensor::from_fn([1, c, 2, 2], |[_, ch, _, _]| ch as f32)
    }

    fn labels(t: &Tensor<f32>) -> Vec<usize> {
        (0..t.channels())
            .map(|c| t.channel(0, c)[0] as usize)
            .collect()
    }

    #[test]
    fn split_at_three_eighths() {
        let (bank, branch) = channel_split(&labelled(8), SplitRatio::DEFAULT).unwrap();
        assert_eq!(labels(&bank), vec![0, 1, 2, 3, 4]);
        assert_eq!(labels(&branch), vec![5, 6, 7]);
    }

    #[test]
    fn split_at_half() {
        let (bank, branch) = channel_split(&labelled(4), SplitRatio::HALF).unwrap();
        assert_eq!(labels(&bank), vec![0, 1]);
        assert_eq!(labels(&branch), vec![2, 3]);
    }

    #[test]
    fn split_rejects_fractional_channels() {
        assert!(matches!(
            channel_split(&labelled(7), SplitRatio::DEFAULT),
            Err(crate::Error::Config(_))
        ));
        assert!(SplitRatio::new(0.0).is_err());
        assert!(SplitRatio::new(0.6).is_err());
        assert!(SplitRatio::new(f64::NAN).is_err());
    }

    #[test]
    fn shuffle_interleaves_halves() {
        assert_eq!(
            labels(&channel_shuffle(&labelled(4)).unwrap()),
            vec![0, 2, 1, 3]
        );
        assert_eq!(labels(&channel_shuffle(&labelled(2)).unwrap()), vec![0, 1]);
        assert!(channel_shuffle(&labelled(5)).is_err());
    }

    #[test]
    fn shuffle_inverse_round_trip() {
        for c in [4, 8, 120] {
            let x = labelled(c);
            let p = ChannelPermutation::shuffle(c).unwrap();
            let back = p.inverse().apply(&p.apply(&x).unwrap()).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn crossover_eight_channels() {
        let x = labelled(8);
        let (bank, branch) = channel_split(&x, SplitRatio::DEFAULT).unwrap();
        let plan = CrossoverPlan::new(3, 5).unwrap();
        assert_eq!((plan.deposit, plan.withdraw), (1, 2));
        let (branch2, bank2) = channel_crossover(&branch, &bank).unwrap();
        // bank holds 0..5, new maps are 5, 6, 7
        assert_eq!(labels(&branch2), vec![0, 1, 5, 6]);
        assert_eq!(labels(&bank2), vec![2, 3, 4, 7]);
    }

    #[test]
    fn crossover_full_width_block() {
        let plan = CrossoverPlan::new(90, 150).unwrap();
        assert_eq!((plan.deposit, plan.withdraw, plan.half()), (45, 75, 120));
        let (a, b) = channel_crossover(
            &labelled(240).slice_channels(150, 90).unwrap(),
            &labelled(240).slice_channels(0, 150).unwrap(),
        )
        .unwrap();
        assert_eq!((a.channels(), b.channels()), (120, 120));
    }

    #[test]
    fn crossover_withdraws_more_than_it_deposits() {
        for m in (2..=64).step_by(2) {
            for x in 1..=m / 2 {
                let plan = CrossoverPlan::new(x, m - x).unwrap();
                if x < m / 2 {
                    assert!(plan.withdraw > plan.deposit);
                } else {
                    assert_eq!(plan.withdraw, plan.deposit);
                }
                assert!(plan.withdraw <= plan.bank);
                assert!(ChannelPermutation::new(plan.permutation().source().to_vec()).is_ok());
            }
        }
        assert!(CrossoverPlan::new(5, 3).is_err());
        assert!(CrossoverPlan::new(3, 4).is_err());
    }

    #[test]
    fn permutation_validation() {
        assert!(ChannelPermutation::new(vec![0, 0, 1]).is_err());
        assert!(ChannelPermutation::new(vec![0, 3, 1]).is_err());
        assert!(ChannelPermutation::new(vec![2, 0, 1]).is_ok());
    }
}
