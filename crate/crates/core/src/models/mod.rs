//! PointNet model family: architecture descriptors, spatial/feature
//! transform nets, the shared trunk, and the classifier / segmenter heads
//! built on it, plus binary checkpoints.

mod block;
mod checkpoint;
mod pointnet;
mod tnet;

pub use checkpoint::{
    Checkpoint, ModelKind, load_classifier, load_segmenter, read_checkpoint, save_classifier,
    save_segmenter, write_checkpoint,
};
pub use pointnet::{
    ClsCache, PointNetClassifier, PointNetSegmenter, PointNetTrunk, SegCache, TrunkCache, TrunkOut,
};
pub use tnet::{TNet, TNetCache, orthogonality_penalty};

use crate::error::{Error, Result};
use crate::preprocess::FEATURE_DIM;

/// Width preset of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Light,
    Full,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Light => write!(f, "light"),
            Variant::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "light" => Ok(Variant::Light),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}, expected \"light\" or \"full\""
            ))),
        }
    }
}

/// Complete shape description of a model, serialized into checkpoints as a
/// single descriptor string so a saved network can be rebuilt exactly.
///
/// `widths` holds the per-point MLP widths `[a1, a2, b1, b2, b3]`: the two
/// layers before the feature transform and the three after it. `head` holds
/// the two hidden widths of the classifier head; the segmentation head is
/// derived from it as `(head[0], head[1], head[1]/2)`. Transform nets reuse
/// `[b1, b2, b3]` as their trunk and `head` as their regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub k: usize,
    pub widths: [usize; 5],
    pub head: [usize; 2],
    pub dropout: f64,
    /// Batch normalization after every hidden layer (on by default).
    pub batchnorm: bool,
    /// Whether the model was trained with the color/NDVI channels intact.
    /// When false, inference must zero those channels the same way.
    pub color: bool,
}

impl ArchitectureSpec {
    /// Half-width network: the default for this toolkit.
    pub fn light(k: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            variant: Variant::Light,
            k,
            widths: [32, 32, 32, 64, 512],
            head: [256, 128],
            dropout: 0.3,
            batchnorm: true,
            color: true,
        }
    }

    /// Original-width network, kept for capacity comparisons.
    pub fn full(k: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            variant: Variant::Full,
            k,
            widths: [64, 64, 64, 128, 1024],
            head: [512, 256],
            dropout: 0.3,
            batchnorm: true,
            color: true,
        }
    }

    /// Number of per-point input features the models consume.
    pub fn point_feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    /// Hidden widths of the segmentation head.
    pub fn seg_head(&self) -> [usize; 3] {
        [self.head[0], self.head[1], self.head[1] / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got k={}",
                self.k
            )));
        }
        if self.widths.iter().chain(&self.head).any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.head[1] / 2 == 0 {
            return Err(Error::Config(
                "head[1] must be at least 2 to derive the segmentation head".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Canonical descriptor string, e.g.
    /// `pnl-v1;variant=light;k=2;widths=32,32,32,64,512;head=256,128;dropout=0.3`.
    /// Flags depart from the default as `;bn=0` / `;color=0` suffixes.
    pub fn descriptor(&self) -> String {
        let widths = self
            .widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = format!(
            "pnl-v1;variant={};k={};widths={widths};head={},{};dropout={}",
            self.variant, self.k, self.head[0], self.head[1], self.dropout
        );
        if !self.batchnorm {
            s.push_str(";bn=0");
        }
        if !self.color {
            s.push_str(";color=0");
        }
        s
    }

    /// Parse a descriptor produced by [`ArchitectureSpec::descriptor`].
    pub fn parse(descriptor: &str) -> Result<ArchitectureSpec> {
        let bad = |msg: String| Error::Checkpoint(format!("descriptor {descriptor:?}: {msg}"));
        let mut parts = descriptor.split(';');
        match parts.next() {
            Some("pnl-v1") => {}
            other => {
                return Err(bad(format!(
                    "expected leading \"pnl-v1\" tag, found {other:?}"
                )));
            }
        }

        let mut variant = None;
        let mut k = None;
        let mut widths = None;
        let mut head = None;
        let mut dropout = None;
        let mut batchnorm = true;
        let mut color = true;
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("field {part:?} is not key=value")))?;
            match key {
                "variant" => variant = Some(value.parse::<Variant>()?),
                "k" => {
                    k = Some(value.parse::<usize>().map_err(|e| bad(format!("k: {e}")))?);
                }
                "widths" => {
                    let parsed: Vec<usize> = value
                        .split(',')
                        .map(|v| v.parse().map_err(|e| bad(format!("widths: {e}"))))
                        .collect::<Result<_>>()?;
                    let arr: [usize; 5] = parsed
                        .try_into()
                        .map_err(|v: Vec<usize>| bad(format!("widths has {} entries, expected 5", v.len())))?;
                    widths = Some(arr);
                }
                "head" => {
                    let parsed: Vec<usize> = value
                        .split(',')
                        .map(|v| v.parse().map_err(|e| bad(format!("head: {e}"))))
                        .collect::<Result<_>>()?;
                    let arr: [usize; 2] = parsed
                        .try_into()
                        .map_err(|v: Vec<usize>| bad(format!("head has {} entries, expected 2", v.len())))?;
                    head = Some(arr);
                }
                "dropout" => {
                    dropout = Some(
                        value
                            .parse::<f64>()
                            .map_err(|e| bad(format!("dropout: {e}")))?,
                    );
                }
                "bn" => batchnorm = value != "0",
                "color" => color = value != "0",
                other => return Err(bad(format!("unknown field {other:?}"))),
            }
        }

        let spec = ArchitectureSpec {
            variant: variant.ok_or_else(|| bad("missing variant".into()))?,
            k: k.ok_or_else(|| bad("missing k".into()))?,
            widths: widths.ok_or_else(|| bad("missing widths".into()))?,
            head: head.ok_or_else(|| bad("missing head".into()))?,
            dropout: dropout.ok_or_else(|| bad("missing dropout".into()))?,
            batchnorm,
            color,
        };
        spec.validate()?;
        Ok(spec)
    }
}
