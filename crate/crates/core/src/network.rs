//! Whole networks for 32x32 inputs at widths 0.5x, 1.0x and 1.5x.
//!
//! Layout: 3x3 stem conv (stride 1) with BN and ReLU, three stages of one
//! downsample block plus 3, 7 and 3 normal blocks, a 1x1 head conv to 1024
//! channels with BN and ReLU, 4x4 global average pooling and a classifier.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    aug_block, downsample_block, init_conv, shuffle_block, AugVariant, BlockParams,
};
use crate::channel_ops::SplitRatio;
use crate::error::{config_err, dim_err, Error, Result};
use crate::params::{ParamView, ParamViewMut, Parameters};
use crate::tape::{Tape, Var};
use crate::tensor::{ConvParams, LinearParams, NormParams, Scalar, Tensor};

pub const INPUT_SIZE: usize = 32;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    AugShuffleNet,
    ShuffleNetV2,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::AugShuffleNet => "AugShuffleNet",
            Family::ShuffleNetV2 => "ShuffleNetV2",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aug" | "augshufflenet" => Ok(Family::AugShuffleNet),
            "v2" | "shufflenetv2" | "shufflenet" => Ok(Family::ShuffleNetV2),
            _ => config_err(format!("unknown family {s:?} (expected aug or v2)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.0")]
    One,
    #[serde(rename = "1.5")]
    OneAndHalf,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::Half, Width::One, Width::OneAndHalf];

    pub fn multiplier(self) -> f64 {
        match self {
            Width::Half => 0.5,
            Width::One => 1.0,
            Width::OneAndHalf => 1.5,
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}x", self.multiplier())
    }
}

impl FromStr for Width {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim_end_matches(['x', 'X']) {
            "0.5" | ".5" => Ok(Width::Half),
            "1" | "1.0" => Ok(Width::One),
            "1.5" => Ok(Width::OneAndHalf),
            _ => config_err(format!(
                "unsupported width {s:?} (expected 0.5, 1.0 or 1.5)"
            )),
        }
    }
}

/// Everything needed to lay out a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub width: Width,
    pub stage_channels: [usize; 3],
    pub stage_repeats: [usize; 3],
    pub stem_channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    /// Present only for the augmented family.
    pub split_ratio: Option<SplitRatio>,
}

impl ArchConfig {
    pub fn standard_channels(family: Family, width: Width) -> [usize; 3] {
        match (family, width) {
            (_, Width::Half) => [48, 96, 192],
            (Family::AugShuffleNet, Width::One) => [120, 240, 480],
            (Family::ShuffleNetV2, Width::One) => [116, 232, 464],
            (_, Width::OneAndHalf) => [176, 352, 704],
        }
    }

    /// Standard layout; validated.
    pub fn new(
        family: Family,
        width: Width,
        num_classes: usize,
        split_ratio: Option<SplitRatio>,
    ) -> Result<Self> {
        let split_ratio = match family {
            Family::AugShuffleNet => Some(split_ratio.unwrap_or(SplitRatio::DEFAULT)),
            Family::ShuffleNetV2 => {
                if split_ratio.is_some_and(|r| r != SplitRatio::HALF) {
                    return config_err("ShuffleNetV2 uses a fixed split ratio of 0.5");
                }
                None
            }
        };
        let cfg = Self {
            family,
            width,
            stage_channels: Self::standard_channels(family, width),
            stage_repeats: [3, 7, 3],
            stem_channels: 24,
            head_channels: 1024,
            num_classes,
            split_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn aug(width: Width, num_classes: usize) -> Self {
        Self::new(Family::AugShuffleNet, width, num_classes, None)
            .expect("standard layout is valid")
    }

    pub fn v2(width: Width, num_classes: usize) -> Self {
        Self::new(Family::ShuffleNetV2, width, num_classes, None).expect("standard layout is valid")
    }

    pub fn with_ratio(mut self, r: SplitRatio) -> Result<Self> {
        if self.family != Family::AugShuffleNet {
            return config_err("only the augmented family has a variable split ratio");
        }
        self.split_ratio = Some(r);
        self.validate()?;
        Ok(self)
    }

    pub fn with_stage_channels(mut self, channels: [usize; 3]) -> Result<Self> {
        self.stage_channels = channels;
        self.validate()?;
        Ok(self)
    }

    pub fn with_classes(mut self, num_classes: usize) -> Result<Self> {
        self.num_classes = num_classes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return config_err("num_classes must be positive");
        }
        if self.stem_channels == 0 || self.head_channels == 0 {
            return config_err("stem and head widths must be positive");
        }
        for &c in &self.stage_channels {
            if c == 0 || c % 2 != 0 {
                return config_err(format!("stage width {c} must be positive and even"));
            }
        }
        match (self.family, self.split_ratio) {
            (Family::AugShuffleNet, Some(r)) => {
                for &c in &self.stage_channels {
                    r.branch_channels(c)?;
                }
            }
            (Family::AugShuffleNet, None) => {
                return config_err("augmented family needs a split ratio")
            }
            (Family::ShuffleNetV2, Some(_)) => {
                return config_err("ShuffleNetV2 has no variable split ratio")
            }
            (Family::ShuffleNetV2, None) => {}
        }
        Ok(())
    }

    /// Short identifier such as `aug-1.5x-r0.375-c10`.
    pub fn tag(&self) -> String {
        let fam = match self.family {
            Family::AugShuffleNet => "aug",
            Family::ShuffleNetV2 => "v2",
        };
        match self.split_ratio {
            Some(r) => format!("{fam}-{}-r{r}-c{}", self.width, self.num_classes),
            None => format!("{fam}-{}-c{}", self.width, self.num_classes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Downsample,
    Augmented,
    Shuffle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub name: String,
    pub kind: BlockKind,
    pub params: BlockParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T = f32> {
    pub name: String,
    pub blocks: Vec<Block<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ArchConfig,
    pub stem: ConvParams<T>,
    pub stem_norm: NormParams<T>,
    pub stages: Vec<Stage<T>>,
    pub head: ConvParams<T>,
    pub head_norm: NormParams<T>,
    pub fc: LinearParams<T>,
}

/// Handles to the interesting intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// `(row label, value)` in network order, one per Table-style row.
    pub checkpoints: Vec<(String, Var)>,
}

/// One row of a shape trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: String,
    pub output_size: usize,
    pub channels: usize,
    pub stride: Option<usize>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation from `seed`.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = init_conv(
            &mut rng,
            "stem.conv",
            INPUT_CHANNELS,
            config.stem_channels,
            3,
            1,
            1,
        );
        let stem_norm = NormParams::identity("stem.norm", config.stem_channels);

        let mut stages = Vec::with_capacity(3);
        let mut c_in = config.stem_channels;
        for (i, (&c, &repeats)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_repeats)
            .enumerate()
        {
            let stage_name = format!("stage{}", i + 2);
            let mut blocks = Vec::with_capacity(repeats + 1);
            let name = format!("{stage_name}.0");
            blocks.push(Block {
                params: BlockParams::downsample(&mut rng, &name, c_in, c)?,
                name,
                kind: BlockKind::Downsample,
            });
            for j in 1..=repeats {
                let name = format!("{stage_name}.{j}");
                let (kind, params) = match config.split_ratio {
                    Some(r) => (
                        BlockKind::Augmented,
                        BlockParams::augmented(&mut rng, &name, c, r)?,
                    ),
                    None => (
                        BlockKind::Shuffle,
                        BlockParams::shuffle(&mut rng, &name, c)?,
                    ),
                };
                blocks.push(Block { name, kind, params });
            }
            stages.push(Stage {
                name: stage_name,
                blocks,
            });
            c_in = c;
        }

        let head = init_conv(&mut rng, "head.conv", c_in, config.head_channels, 1, 1, 1);
        let head_norm = NormParams::identity("head.norm", config.head_channels);
        let f = config.head_channels;
        let bound = (3.0 / f as f64).sqrt();
        let weight = (0..f * config.num_classes)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        let fc = LinearParams::new(
            "fc",
            f,
            config.num_classes,
            weight,
            vec![T::zero(); config.num_classes],
        )?;
        Ok(Self {
            config,
            stem,
            stem_norm,
            stages,
            head,
            head_norm,
            fc,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    fn check_input(x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if (c, h, w) != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE) {
            return dim_err(format!(
                "expected (N, 3, 32, 32) input, got {:?}",
                x.shape()
            ));
        }
        Ok(())
    }

    /// Run the network on `x` (already on `tape`).
    pub fn forward_on(&self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<ForwardVars> {
        Self::check_input(tape.value(x))?;
        let mut checkpoints = vec![("Image".to_string(), x)];
        let y = tape.conv2d(x, &self.stem)?;
        let y = tape.batch_norm(y, &self.stem_norm, training)?;
        let mut y = tape.relu(y);
        checkpoints.push(("Conv".into(), y));
        for stage in &self.stages {
            for block in &stage.blocks {
                y = match block.kind {
                    BlockKind::Downsample => downsample_block(tape, y, &block.params, training)?,
                    BlockKind::Shuffle => shuffle_block(tape, y, &block.params, training)?,
                    BlockKind::Augmented => {
                        let r = self
                            .config
                            .split_ratio
                            .ok_or_else(|| Error::Config("missing split ratio".into()))?;
                        aug_block(tape, y, &block.params, r, AugVariant::default(), training)?
                    }
                };
                checkpoints.push((block.name.clone(), y));
            }
        }
        let y = tape.conv2d(y, &self.head)?;
        let y = tape.batch_norm(y, &self.head_norm, training)?;
        let y = tape.relu(y);
        checkpoints.push(("Conv5".into(), y));
        let y = tape.global_avg_pool(y);
        checkpoints.push(("GlobalPool".into(), y));
        let logits = tape.linear(y, &self.fc)?;
        checkpoints.push(("FC".into(), logits));
        Ok(ForwardVars {
            logits,
            checkpoints,
        })
    }

    /// Inference-mode logits, shape `(N, num_classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let input = tape.input(x.clone(), "input");
        let out = self.forward_on(&mut tape, input, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Training-mode forward that also folds the batch statistics into the
    /// running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let input = tape.input(x.clone(), "input");
        let out = self.forward_on(&mut tape, input, true)?;
        let logits = tape.value(out.logits).clone();
        self.commit_stats(&tape.take_stat_updates());
        Ok(logits)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }

    /// Output size and channel count after every stage-level layer, for a
    /// single 32x32 image.
    pub fn trace(&self) -> Result<Vec<TraceRow>> {
        let mut tape = Tape::inference();
        let x = tape.input(
            Tensor::zeros([1, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]),
            "input",
        );
        let vars = self.forward_on(&mut tape, x, false)?;
        Ok(vars
            .checkpoints
            .iter()
            .map(|(label, v)| {
                let [_, c, h, _] = tape.value(*v).shape();
                let stride = match label.as_str() {
                    "Conv" | "Conv5" => Some(1),
                    l if l.ends_with(".0") => Some(2),
                    l if l.starts_with("stage") => Some(1),
                    _ => None,
                };
                TraceRow {
                    layer: label.clone(),
                    output_size: h,
                    channels: c,
                    stride,
                }
            })
            .collect())
    }
}

/// One row of the architecture table: the stages are folded into a
/// downsample row and a repeated normal-block row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchRow {
    pub layer: String,
    pub output_size: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub repeat: Option<usize>,
    pub channels: usize,
}

impl<T: Scalar> Model<T> {
    /// The traced shapes grouped like the published architecture table.
    pub fn architecture(&self) -> Result<Vec<ArchRow>> {
        let trace = self.trace()?;
        let find = |label: &str| {
            trace
                .iter()
                .find(|r| r.layer == label)
                .ok_or_else(|| Error::Config(format!("trace has no {label} row")))
        };
        let row = |layer: &str, t: &TraceRow, kernel, stride, repeat| ArchRow {
            layer: layer.to_string(),
            output_size: Some(t.output_size),
            kernel,
            stride,
            repeat,
            channels: t.channels,
        };
        let image = find("Image")?;
        let mut rows = vec![row("Image", image, None, None, None)];
        rows.push(row(
            "Conv",
            find("Conv")?,
            Some(self.stem.kernel()),
            Some(self.stem.stride),
            Some(1),
        ));
        for stage in &self.stages {
            let label = format!("Stage{}", &stage.name["stage".len()..]);
            let (first, rest) = stage
                .blocks
                .split_first()
                .expect("every stage has a downsample block");
            let k = first.params.dwconv.kernel();
            rows.push(row(&label, find(&first.name)?, Some(k), Some(2), Some(1)));
            if let Some(last) = rest.last() {
                let end = find(&last.name)?;
                for b in rest {
                    let t = find(&b.name)?;
                    if (t.output_size, t.channels) != (end.output_size, end.channels) {
                        return config_err(format!("{} changes shape inside a stage", b.name));
                    }
                }
                rows.push(row(&label, end, Some(k), Some(1), Some(rest.len())));
            }
        }
        let head = find("Conv5")?;
        rows.push(row(
            "Conv",
            head,
            Some(self.head.kernel()),
            Some(self.head.stride),
            Some(1),
        ));
        rows.push(row(
            "GlobalPool",
            find("GlobalPool")?,
            Some(head.output_size),
            None,
            None,
        ));
        rows.push(ArchRow {
            layer: "FC".into(),
            output_size: None,
            kernel: None,
            stride: None,
            repeat: None,
            channels: find("FC")?.channels,
        });
        Ok(rows)
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(ParamView<'_, T>)) {
        self.stem.visit(f);
        self.stem_norm.visit(f);
        for b in self.blocks() {
            b.params.visit(f);
        }
        self.head.visit(f);
        self.head_norm.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamViewMut<'_, T>)) {
        self.stem.visit_mut(f);
        self.stem_norm.visit_mut(f);
        for s in &mut self.stages {
            for b in &mut s.blocks {
                b.params.visit_mut(f);
            }
        }
        self.head.visit_mut(f);
        self.head_norm.visit_mut(f);
        self.fc.visit_mut(f);
    }

    fn norms_mut(&mut self) -> Vec<&mut NormParams<T>> {
        let mut out = vec![&mut self.stem_norm];
        for s in &mut self.stages {
            for b in &mut s.blocks {
                out.extend(b.params.norms_mut());
            }
        }
        out.push(&mut self.head_norm);
        out
    }
}

/// Index of the largest entry per sample; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.channels() * logits.plane();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layouts() {
        let aug1 = ArchConfig::aug(Width::One, 10);
        assert_eq!(aug1.stage_channels, [120, 240, 480]);
        assert_eq!((aug1.stem_channels, aug1.head_channels), (24, 1024));
        assert_eq!(aug1.split_ratio, Some(SplitRatio::DEFAULT));
        assert_eq!(
            ArchConfig::aug(Width::OneAndHalf, 10).stage_channels,
            [176, 352, 704]
        );
        assert_eq!(
            ArchConfig::v2(Width::One, 10).stage_channels,
            [116, 232, 464]
        );
    }

    #[test]
    fn augmented_on_baseline_widths_is_rejected() {
        let err = ArchConfig::aug(Width::One, 10).with_stage_channels([116, 232, 464]);
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(ArchConfig::v2(Width::One, 10)
            .with_ratio(SplitRatio::DEFAULT)
            .is_err());
        assert!(ArchConfig::aug(Width::One, 10).with_classes(0).is_err());
    }

    #[test]
    fn parse_family_and_width() {
        assert_eq!("aug".parse::<Family>().unwrap(), Family::AugShuffleNet);
        assert_eq!(
            "ShuffleNetV2".parse::<Family>().unwrap(),
            Family::ShuffleNetV2
        );
        assert_eq!("1.5x".parse::<Width>().unwrap(), Width::OneAndHalf);
        assert_eq!("1".parse::<Width>().unwrap(), Width::One);
        assert!("2.0".parse::<Width>().is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let t = Tensor::<f32>::new([3, 2, 1, 1], vec![0.1, 0.9, 0.5, 0.5, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0, 0]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = Model::<f32>::build(ArchConfig::aug(Width::Half, 10), 0).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros([1, 3, 28, 28])),
            Err(Error::Dimension(_))
        ));
        assert!(m.forward(&Tensor::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ArchConfig::aug(Width::OneAndHalf, 100)
            .with_ratio(SplitRatio::new(0.125).unwrap())
            .unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ArchConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<ArchConfig>(&text.replace("0.125", "0.75")).is_err());
    }
}
