//! Closed-form block cost model and an exact per-layer counter.
//!
//! Counting convention: one multiply-accumulate counts as one MAdd; BN,
//! ReLU, pooling, slicing, concatenation and permutations are free. Params
//! are conv weights (no bias), two per BN channel and FC weight plus bias.
//! BN running statistics are not counted.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::channel_ops::SplitRatio;
use crate::error::{config_err, Result};
use crate::network::{ArchConfig, BlockKind, Family, Model, Width, INPUT_CHANNELS, INPUT_SIZE};
use crate::tape::{OpKind, Tape};
use crate::tensor::{Scalar, Tensor};

/// Symbols of the block cost model: `M` input channels of size
/// `D_f x D_f`, depthwise kernel `D_k`, split ratio `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub m: usize,
    pub df: usize,
    pub dk: usize,
    pub r: SplitRatio,
}

impl CostModel {
    /// Requires `r M` and `M / 2` to be whole so that counts are integers.
    pub fn new(m: usize, df: usize, dk: usize, r: SplitRatio) -> Result<Self> {
        if m == 0 || df == 0 || dk == 0 {
            return config_err("cost model dimensions must be positive");
        }
        r.branch_channels(m)?;
        Ok(Self { m, df, dk, r })
    }

    fn branch(&self) -> u64 {
        self.r.branch_channels(self.m).expect("validated in new") as u64
    }

    /// `r^2 M^2 Df^2 + r M Df^2 Dk^2 + M^2 Df^2 / 4`.
    pub fn block_cost(&self) -> u64 {
        let x = self.branch();
        let half = self.m as u64 / 2;
        let area = (self.df * self.df) as u64;
        let k2 = (self.dk * self.dk) as u64;
        x * x * area + x * area * k2 + half * half * area
    }

    /// `r^2 M^2 + r M Dk^2 + M^2 / 4`, conv weights only.
    pub fn block_params(&self) -> u64 {
        let x = self.branch();
        let half = self.m as u64 / 2;
        let k2 = (self.dk * self.dk) as u64;
        x * x + x * k2 + half * half
    }

    /// Cost relative to the same block at `r = 0.5`, as `(exact, approx)`.
    pub fn cost_ratio(&self) -> (f64, f64) {
        let r = self.r.value();
        let m = self.m as f64;
        let k2 = (self.dk * self.dk) as f64;
        let exact = ((4.0 * r * r + 1.0) * m + 4.0 * r * k2) / (2.0 * m + 2.0 * k2);
        (exact, (4.0 * r * r + 1.0) / 2.0)
    }

    /// Same expression as [`cost_ratio`](Self::cost_ratio): the spatial
    /// factor cancels.
    pub fn params_ratio(&self) -> (f64, f64) {
        self.cost_ratio()
    }
}

/// One counted op. Free ops are kept so the report lists every layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub kind: String,
    pub output_shape: [usize; 3],
    pub madds: u64,
    /// Conv or FC weights (plus FC bias).
    pub weight_params: u64,
    /// BN scale and shift.
    pub norm_params: u64,
}

impl LayerCount {
    pub fn params(&self) -> u64 {
        self.weight_params + self.norm_params
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    pub name: String,
    pub kind: BlockKind,
    pub channels: usize,
    pub spatial: usize,
    pub madds: u64,
    pub weight_params: u64,
    pub norm_params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub model: String,
    pub family: Family,
    pub width: Width,
    pub num_classes: usize,
    pub split_ratio: Option<SplitRatio>,
    pub total_madds: u64,
    pub total_params: u64,
    pub blocks: Vec<BlockCount>,
    pub layers: Vec<LayerCount>,
}

impl CountReport {
    pub fn madds_millions(&self) -> f64 {
        self.total_madds as f64 / 1e6
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }
}

/// Count every op recorded on `tape`, per sample.
pub fn count_tape<T: Scalar>(tape: &Tape<T>) -> Vec<LayerCount> {
    tape.records()
        .map(|rec| {
            let [_, c, h, w] = rec.output_shape;
            let (madds, weight_params, norm_params) = match *rec.kind {
                OpKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    groups,
                    ..
                } => {
                    let weights = (out_channels * (in_channels / groups) * kernel * kernel) as u64;
                    (weights * (h * w) as u64, weights, 0)
                }
                OpKind::Norm { channels } => (0, 0, 2 * channels as u64),
                OpKind::Linear {
                    in_features,
                    out_features,
                } => {
                    let weights = (in_features * out_features) as u64;
                    (weights, weights + out_features as u64, 0)
                }
                _ => (0, 0, 0),
            };
            LayerCount {
                name: rec.label.to_string(),
                kind: rec.kind.name().to_string(),
                output_shape: [c, h, w],
                madds,
                weight_params,
                norm_params,
            }
        })
        .collect()
}

/// Count a model by walking one inference pass at batch size `batch`.
/// MAdds are always reported per sample.
pub fn count_network_at_batch<T: Scalar>(model: &Model<T>, batch: usize) -> Result<CountReport> {
    let mut tape = Tape::inference();
    let x = tape.input(
        Tensor::zeros([batch.max(1), INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]),
        "input",
    );
    model.forward_on(&mut tape, x, false)?;
    let layers = count_tape(&tape);

    let mut blocks: IndexMap<&str, BlockCount> = model
        .blocks()
        .map(|b| {
            (
                b.name.as_str(),
                BlockCount {
                    name: b.name.clone(),
                    kind: b.kind,
                    channels: 0,
                    spatial: 0,
                    madds: 0,
                    weight_params: 0,
                    norm_params: 0,
                },
            )
        })
        .collect();
    for layer in &layers {
        if let Some(b) = block_of(&layer.name).and_then(|k| blocks.get_mut(k)) {
            b.madds += layer.madds;
            b.weight_params += layer.weight_params;
            b.norm_params += layer.norm_params;
            if layer.name.ends_with(".shuffle") {
                b.channels = layer.output_shape[0];
                b.spatial = layer.output_shape[1];
            }
        }
    }

    let cfg = &model.config;
    Ok(CountReport {
        model: cfg.tag(),
        family: cfg.family,
        width: cfg.width,
        num_classes: cfg.num_classes,
        split_ratio: cfg.split_ratio,
        total_madds: layers.iter().map(|l| l.madds).sum(),
        total_params: layers.iter().map(|l| l.params()).sum(),
        blocks: blocks.into_values().collect(),
        layers,
    })
}

pub fn count_network<T: Scalar>(model: &Model<T>) -> Result<CountReport> {
    count_network_at_batch(model, 1)
}

/// Count a freshly built model (weights do not affect the counts).
pub fn count_config(cfg: &ArchConfig) -> Result<CountReport> {
    count_network(&Model::<f32>::build(cfg.clone(), 0)?)
}

/// `stage3.4.conv1` → `stage3.4`.
fn block_of(label: &str) -> Option<&str> {
    if !label.starts_with("stage") {
        return None;
    }
    let mut dots = label.match_indices('.');
    let (_, _) = dots.next()?;
    match dots.next() {
        Some((i, _)) => Some(&label[..i]),
        None => Some(label),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: Family,
    pub width: Width,
    pub num_classes: usize,
    pub r: f64,
    pub madds: u64,
    pub params: u64,
}

/// One count per ratio, all other settings from `cfg`.
pub fn sweep_ratio(cfg: &ArchConfig, ratios: &[SplitRatio]) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&r| {
            let report = count_config(&cfg.clone().with_ratio(r)?)?;
            Ok(SweepRow {
                family: cfg.family,
                width: cfg.width,
                num_classes: cfg.num_classes,
                r: r.value(),
                madds: report.total_madds,
                params: report.total_params,
            })
        })
        .collect()
}

/// CSV with header `family,width,num_classes,r,madds,params`.
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(input: impl std::io::Read) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{aug_block, shuffle_block, BlockParams};
    use rand::SeedableRng;

    fn r(v: f64) -> SplitRatio {
        SplitRatio::new(v).unwrap()
    }

    #[test]
    fn block_cost_examples() {
        let cm = CostModel::new(240, 8, 3, SplitRatio::DEFAULT).unwrap();
        assert_eq!(cm.block_cost(), 518_400 + 51_840 + 921_600);
        assert_eq!(cm.block_params(), 8100 + 810 + 14_400);
        assert_eq!(
            CostModel::new(4, 1, 3, SplitRatio::HALF)
                .unwrap()
                .block_cost(),
            26
        );
        assert!(CostModel::new(116, 8, 3, SplitRatio::DEFAULT).is_err());
    }

    #[test]
    fn ratio_examples() {
        let (exact, approx) = CostModel::new(240, 8, 3, SplitRatio::DEFAULT)
            .unwrap()
            .cost_ratio();
        assert!((exact - 388.5 / 498.0).abs() < 1e-15);
        assert_eq!(approx, 0.78125);
        let (e, a) = CostModel::new(240, 8, 3, SplitRatio::HALF)
            .unwrap()
            .cost_ratio();
        assert_eq!((e, a), (1.0, 1.0));
        let (e, a) = CostModel::new(100_000, 8, 3, SplitRatio::DEFAULT)
            .unwrap()
            .cost_ratio();
        assert!((e - a).abs() < 1e-3);
    }

    #[test]
    fn cost_is_monotone_in_ratio() {
        let mut last = (0, 0);
        for k in 1..=120 {
            let cm = CostModel::new(240, 8, 3, r(k as f64 / 240.0)).unwrap();
            let now = (cm.block_cost(), cm.block_params());
            assert!(now.0 > last.0 && now.1 > last.1);
            last = now;
        }
    }

    #[test]
    fn lone_blocks_match_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (m, df, ratio) in [
            (240, 8, 0.375),
            (48, 16, 0.125),
            (352, 8, 0.25),
            (8, 4, 0.375),
        ] {
            let ratio = r(ratio);
            let p = BlockParams::<f32>::augmented(&mut rng, "b", m, ratio).unwrap();
            let mut tape = Tape::inference();
            let x = tape.input(Tensor::zeros([1, m, df, df]), "x");
            aug_block(&mut tape, x, &p, ratio, Default::default(), false).unwrap();
            let layers = count_tape(&tape);
            let cm = CostModel::new(m, df, 3, ratio).unwrap();
            assert_eq!(layers.iter().map(|l| l.madds).sum::<u64>(), cm.block_cost());
            assert_eq!(
                layers.iter().map(|l| l.weight_params).sum::<u64>(),
                cm.block_params()
            );
            for l in layers
                .iter()
                .filter(|l| l.kind != "conv" && l.kind != "batch_norm")
            {
                assert_eq!(l.params() + l.madds, 0, "{} should be free", l.name);
            }

            let q = BlockParams::<f32>::shuffle(&mut rng, "v", m).unwrap();
            let mut tape = Tape::inference();
            let x = tape.input(Tensor::zeros([1, m, df, df]), "x");
            shuffle_block(&mut tape, x, &q, false).unwrap();
            let base = CostModel::new(m, df, 3, SplitRatio::HALF).unwrap();
            assert_eq!(
                count_tape(&tape).iter().map(|l| l.madds).sum::<u64>(),
                base.block_cost()
            );
        }
    }

    #[test]
    fn block_label_grouping() {
        assert_eq!(block_of("stage3.4.conv1"), Some("stage3.4"));
        assert_eq!(block_of("stage2.0.left.dwconv"), Some("stage2.0"));
        assert_eq!(block_of("stem.conv"), None);
        assert_eq!(block_of("fc"), None);
    }

    #[test]
    fn sweep_csv_round_trip() {
        let rows = vec![SweepRow {
            family: Family::AugShuffleNet,
            width: Width::OneAndHalf,
            num_classes: 10,
            r: 0.125,
            madds: 1,
            params: 2,
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "family,width,num_classes,r,madds,params"
        );
        assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
    }
}
