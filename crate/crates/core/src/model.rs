//! Model configuration and the assembled DeFusion network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{total_loss, FusionHead, FusionOutput};
use crate::image::{ImageExtractor, ImageTrace};
use crate::nn::{Linear, ParamBuilder};
use crate::table::{TableExtractor, TableTrace};
use crate::tensor::{ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeVariant {
    None,
    Sincos,
    Learnable,
    Stpe,
    #[serde(rename = "stpe-no-spe")]
    StpeNoSpatial,
    #[serde(rename = "stpe-no-tpe")]
    StpeNoTemporal,
    #[serde(rename = "stpe-no-att")]
    StpeNoAttention,
}

impl PeVariant {
    pub const ALL: [PeVariant; 7] = [
        PeVariant::None,
        PeVariant::Sincos,
        PeVariant::Learnable,
        PeVariant::Stpe,
        PeVariant::StpeNoSpatial,
        PeVariant::StpeNoTemporal,
        PeVariant::StpeNoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeVariant::None => "none",
            PeVariant::Sincos => "sincos",
            PeVariant::Learnable => "learnable",
            PeVariant::Stpe => "stpe",
            PeVariant::StpeNoSpatial => "stpe-no-spe",
            PeVariant::StpeNoTemporal => "stpe-no-tpe",
            PeVariant::StpeNoAttention => "stpe-no-att",
        }
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, PeVariant::Stpe | PeVariant::StpeNoTemporal | PeVariant::StpeNoAttention)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, PeVariant::Stpe | PeVariant::StpeNoSpatial | PeVariant::StpeNoAttention)
    }
}

fn valid_names<I: IntoIterator<Item = &'static str>>(names: I) -> String {
    names.into_iter().collect::<Vec<_>>().join(", ")
}

impl FromStr for PeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVariant {
            name: s.to_string(),
            valid: valid_names(PeVariant::ALL.map(PeVariant::name)),
        })
    }
}

impl fmt::Display for PeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// No decoupling module: the classifier reads the aligned features directly.
    Add,
    Decoupling,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 2] = [FusionVariant::Add, FusionVariant::Decoupling];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Add => "add",
            FusionVariant::Decoupling => "decoupling",
        }
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVariant {
            name: s.to_string(),
            valid: valid_names(FusionVariant::ALL.map(FusionVariant::name)),
        })
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. `days` are 1-based day indices fed to the
/// image extractor, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub channels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub d_img: usize,
    pub d_tab: usize,
    pub d_f: usize,
    pub feature_dim: usize,
    pub fusion_hidden: usize,
    pub classifier_hidden: usize,
    pub img_heads: usize,
    pub img_layers: usize,
    pub tab_heads: usize,
    pub tab_layers: usize,
    pub mlp_ratio: usize,
    pub num_indicators: usize,
    pub days: Vec<usize>,
    pub pe: PeVariant,
    pub fusion: FusionVariant,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            stride: 8,
            channels: 32,
            stem_channels: 8,
            block_channels: vec![16, 32],
            d_img: 32,
            d_tab: 32,
            d_f: 32,
            feature_dim: 32,
            fusion_hidden: 32,
            classifier_hidden: 32,
            img_heads: 4,
            img_layers: 2,
            tab_heads: 4,
            tab_layers: 2,
            mlp_ratio: 2,
            num_indicators: 22,
            days: vec![1, 2, 3],
            pe: PeVariant::Stpe,
            fusion: FusionVariant::Decoupling,
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            stride: 32,
            channels: 64,
            stem_channels: 16,
            block_channels: vec![16, 32, 64, 64],
            d_img: 32,
            ..ModelConfig::desk()
        }
    }

    /// Smallest configuration used by gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            stride: 8,
            channels: 4,
            stem_channels: 4,
            block_channels: vec![4, 4],
            d_img: 8,
            d_tab: 8,
            d_f: 8,
            feature_dim: 8,
            fusion_hidden: 8,
            classifier_hidden: 8,
            img_heads: 2,
            img_layers: 1,
            tab_heads: 2,
            tab_layers: 1,
            mlp_ratio: 2,
            num_indicators: 4,
            days: vec![1, 2, 3],
            pe: PeVariant::Stpe,
            fusion: FusionVariant::Decoupling,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    /// Length of the image token sequence including the class token.
    pub fn image_sequence_len(&self) -> usize {
        let (h, w) = self.grid();
        1 + self.days.len() * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("stem_channels", self.stem_channels),
            ("d_img", self.d_img),
            ("d_tab", self.d_tab),
            ("d_f", self.d_f),
            ("feature_dim", self.feature_dim),
            ("fusion_hidden", self.fusion_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("mlp_ratio", self.mlp_ratio),
            ("num_indicators", self.num_indicators),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return bad("block_channels must be a nonempty list of positive widths".into());
        }
        let stride = 1usize << (1 + self.block_channels.len());
        if self.stride != stride {
            return bad(format!(
                "stride {} does not match {} residual blocks (total stride {stride})",
                self.stride,
                self.block_channels.len()
            ));
        }
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return bad(format!("image {}x{} not divisible by stride {stride}", self.height, self.width));
        }
        if self.block_channels.last() != Some(&self.channels) {
            return bad(format!(
                "channels {} must equal the last block width {:?}",
                self.channels, self.block_channels
            ));
        }
        for (name, dim, heads) in [("image", self.d_img, self.img_heads), ("table", self.d_tab, self.tab_heads)] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} heads {heads} do not divide model dim {dim}"));
            }
        }
        if self.days.is_empty() || self.days.contains(&0) || !self.days.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("days {:?} must be increasing 1-based indices", self.days));
        }
        Ok(())
    }
}

/// One mini-batch in the training precision.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, T, 1, H, W]`.
    pub images: Tensor<T>,
    /// `[B, N]`.
    pub table: Tensor<T>,
    pub labels: Vec<T>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub f_img: Var,
    pub f_tab: Var,
    pub image: ImageTrace,
    pub table: TableTrace,
    pub fusion: FusionOutput,
    /// `[B, 1]`.
    pub prob: Var,
    pub ce: Var,
    pub loss: Var,
}

/// Single-logit heads on each extractor used by staged pretraining.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub image: Linear,
    pub table: Linear,
}

#[derive(Clone, Debug)]
pub struct DeFusion {
    pub config: ModelConfig,
    pub image: ImageExtractor,
    pub table: TableExtractor,
    pub head: FusionHead,
    pub pretrain: Option<PretrainHeads>,
}

impl DeFusion {
    /// Builds the network and its double-precision parameters from `seed`.
    pub fn new(config: &ModelConfig, seed: u64, pretrain_heads: bool) -> Result<(Self, ParamStore<f64>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let image = ImageExtractor::new(&mut pb, config)?;
        let table = TableExtractor::new(&mut pb, config)?;
        let head = FusionHead::new(&mut pb, config)?;
        let pretrain = if pretrain_heads {
            Some(pb.scope("pretrain", |pb| {
                Ok(PretrainHeads {
                    image: Linear::new(pb, "image", config.d_img, 1)?,
                    table: Linear::new(pb, "table", config.d_tab, 1)?,
                })
            })?)
        } else {
            None
        };
        let model = DeFusion { config: config.clone(), image, table, head, pretrain };
        Ok((model, store))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &Batch<T>,
        lambda: f64,
    ) -> Result<Forward> {
        let images = tape.constant(batch.images.clone());
        let table = tape.constant(batch.table.clone());
        let (f_img, image) = self.image.forward(tape, store, images)?;
        let (f_tab, table) = self.table.forward(tape, store, table)?;
        let fusion = self.head.forward(tape, store, f_img, f_tab)?;
        let prob = fusion.prob.expect("fusion head yields probabilities");
        let (loss, ce) = total_loss(tape, prob, &batch.labels, fusion.recon, lambda)?;
        Ok(Forward { f_img, f_tab, image, table, fusion, prob, ce, loss })
    }

    /// Unimodal loss `BCE(image head) + BCE(table head)` for staged
    /// pretraining of the extractors.
    pub fn pretrain_loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &Batch<T>) -> Result<Var> {
        let heads =
            self.pretrain.as_ref().ok_or_else(|| Error::Config("model was built without pretraining heads".into()))?;
        let images = tape.constant(batch.images.clone());
        let table = tape.constant(batch.table.clone());
        let (f_img, _) = self.image.forward(tape, store, images)?;
        let (f_tab, _) = self.table.forward(tape, store, table)?;
        let eps = T::of(crate::fusion::BCE_EPS);
        let li = heads.image.forward(tape, store, f_img)?;
        let li = tape.sigmoid(li);
        let li = tape.binary_cross_entropy(li, &batch.labels, eps)?;
        let lt = heads.table.forward(tape, store, f_tab)?;
        let lt = tape.sigmoid(lt);
        let lt = tape.binary_cross_entropy(lt, &batch.labels, eps)?;
        tape.add(li, lt)
    }
}

/// Learning-rate group of a parameter, decided by its name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Image,
    Table,
    Fusion,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("image_extractor.") {
        ParamGroup::Image
    } else if name.starts_with("table_extractor.") {
        ParamGroup::Table
    } else {
        ParamGroup::Fusion
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::desk().image_sequence_len(), 49);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::desk();
        c.height = 36;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.stride = 16;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.tab_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.days = vec![2, 1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in PeVariant::ALL {
            assert_eq!(v.name().parse::<PeVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        match "rope".parse::<PeVariant>() {
            Err(Error::UnknownVariant { valid, .. }) => assert!(valid.contains("stpe-no-att")),
            other => panic!("{other:?}"),
        }
        assert_eq!("add".parse::<FusionVariant>().unwrap(), FusionVariant::Add);
    }

    #[test]
    fn parameter_prefixes() {
        let (_, store) = DeFusion::new(&ModelConfig::tiny(), 0, false).unwrap();
        for id in store.ids() {
            let name = store.name(id);
            assert!(
                ["image_extractor.", "table_extractor.", "align.", "decouple.", "classifier."]
                    .iter()
                    .any(|p| name.starts_with(p)),
                "{name}"
            );
        }
        assert_eq!(param_group("image_extractor.class_token"), ParamGroup::Image);
        assert_eq!(param_group("table_extractor.embedding.weight"), ParamGroup::Table);
        assert_eq!(param_group("decouple.common.fc1.weight"), ParamGroup::Fusion);
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::tiny();
        let (model, store) = DeFusion::new(&cfg, 1, true).unwrap();
        let mut rng = Rng::new(2);
        let batch = Batch {
            images: Tensor::new(&[2, 3, 1, 16, 16], (0..1536).map(|_| rng.normal()).collect()).unwrap(),
            table: Tensor::new(&[2, 4], (0..8).map(|_| rng.uniform()).collect()).unwrap(),
            labels: vec![1.0, 0.0],
        };
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &store, &batch, 1.0).unwrap();
        assert_eq!(tape.shape(out.prob), &[2, 1]);
        let recon = tape.value(out.fusion.recon.unwrap()).item();
        let (l, ce) = (tape.value(out.loss).item(), tape.value(out.ce).item());
        assert!((l - ce - recon).abs() < 1e-12);
        let mut tape = Tape::new();
        let pl = model.pretrain_loss(&mut tape, &store, &batch).unwrap();
        assert!(tape.value(pl).item() > 0.0);
    }
}
