//! Builders for the eight small-patch architectures, with parameter
//! counting and tape-based forward passes.

mod cnn;
mod convnext;
mod efficientnet;
pub(crate) mod layers;
mod mlp;
mod resnet;
mod vit;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use layers::Ctx;

pub const INPUT_SIZE: usize = 40;
pub const INPUT_CHANNELS: usize = 3;
pub const DEFAULT_NUM_CLASSES: usize = 16;
/// Parameter-name prefix of every classification head.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "CNN")]
    Cnn,
    ResNetD4,
    #[serde(rename = "NIN")]
    Nin,
    SEResNetD4,
    EfficientNetB0,
    ConvNeXtTiny,
    CustomViT,
}

impl ArchKind {
    pub const ALL: [ArchKind; 8] = [
        ArchKind::Mlp,
        ArchKind::Cnn,
        ArchKind::ResNetD4,
        ArchKind::Nin,
        ArchKind::SEResNetD4,
        ArchKind::EfficientNetB0,
        ArchKind::ConvNeXtTiny,
        ArchKind::CustomViT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp => "MLP",
            ArchKind::Cnn => "CNN",
            ArchKind::ResNetD4 => "ResNetD4",
            ArchKind::Nin => "NIN",
            ArchKind::SEResNetD4 => "SEResNetD4",
            ArchKind::EfficientNetB0 => "EfficientNetB0",
            ArchKind::ConvNeXtTiny => "ConvNeXtTiny",
            ArchKind::CustomViT => "CustomViT",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = TensorError;

    /// Case-insensitive; `-` and `_` are ignored (`resnet-d4` == `ResNetD4`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        ArchKind::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == key)
            .ok_or_else(|| TensorError::Config(format!("unknown architecture `{s}`")))
    }
}

/// Optional departures from the default hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchOverrides {
    pub input_dropout: Option<f64>,
    pub hidden_dropout: Option<f64>,
    pub conv_dropout: Option<f64>,
    pub se_dropout: Option<f64>,
    pub drop_path: Option<f64>,
    pub vit_dropout: Option<f64>,
    pub vit_depth: Option<usize>,
}

/// Hyperparameters after applying overrides to the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    pub conv_dropout: f64,
    pub se_dropout: f64,
    pub drop_path: f64,
    pub vit_dropout: f64,
    pub vit_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchKind,
    pub num_classes: usize,
    pub input_size: usize,
    pub channels: usize,
    pub init_seed: u64,
    #[serde(default)]
    pub overrides: ArchOverrides,
}

impl ModelSpec {
    pub fn new(arch: ArchKind, num_classes: usize, init_seed: u64) -> Self {
        Self {
            arch,
            num_classes,
            input_size: INPUT_SIZE,
            channels: INPUT_CHANNELS,
            init_seed,
            overrides: ArchOverrides::default(),
        }
    }

    pub fn resolved(&self) -> Resolved {
        let o = &self.overrides;
        Resolved {
            input_dropout: o.input_dropout.unwrap_or(0.1),
            hidden_dropout: o.hidden_dropout.unwrap_or(0.5),
            conv_dropout: o.conv_dropout.unwrap_or(0.0),
            se_dropout: o.se_dropout.unwrap_or(0.1),
            drop_path: o.drop_path.unwrap_or(0.2),
            vit_dropout: o.vit_dropout.unwrap_or(0.2),
            vit_depth: o.vit_depth.unwrap_or(6),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(TensorError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_size != INPUT_SIZE || self.channels != INPUT_CHANNELS {
            return Err(TensorError::Config(format!(
                "models are defined for {INPUT_CHANNELS}x{INPUT_SIZE}x{INPUT_SIZE} inputs, got {}x{}x{}",
                self.channels, self.input_size, self.input_size
            )));
        }
        let r = self.resolved();
        for (name, p) in [
            ("input_dropout", r.input_dropout),
            ("hidden_dropout", r.hidden_dropout),
            ("conv_dropout", r.conv_dropout),
            ("se_dropout", r.se_dropout),
            ("drop_path", r.drop_path),
            ("vit_dropout", r.vit_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(TensorError::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        if r.vit_depth == 0 {
            return Err(TensorError::Config("vit_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Values recorded during a forward pass for inspection.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `(layer, [H, W])` after each spatial stage.
    pub spatial: Vec<(String, [usize; 2])>,
    /// Attention weights `[B, heads, T, T]` per transformer block.
    pub attention: Vec<Var>,
    /// Sigmoid gates `[B, C]` per squeeze-and-excitation block.
    pub se_gates: Vec<Var>,
}

pub struct Forward<T> {
    pub logits: Var,
    /// Input to the classification head.
    pub features: Var,
    pub bound: Bound,
    pub trace: Trace,
    /// Batch-norm running statistics computed by a training-mode pass.
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

pub(crate) enum Net {
    Mlp(mlp::Mlp),
    Cnn(cnn::Cnn),
    ResNet(resnet::ResNet),
    Nin(resnet::Nin),
    EfficientNet(efficientnet::EfficientNet),
    ConvNeXt(convnext::ConvNeXt),
    Vit(vit::Vit),
}

pub struct Model<T: Scalar> {
    spec: ModelSpec,
    store: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let r = spec.resolved();
        let c = spec.num_classes;
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let net = match spec.arch {
            ArchKind::Mlp => Net::Mlp(mlp::Mlp::build(&mut pb, &r, c)?),
            ArchKind::Cnn => Net::Cnn(cnn::Cnn::build(&mut pb, &r, c)?),
            ArchKind::ResNetD4 => Net::ResNet(resnet::ResNet::build(&mut pb, &r, c, false)?),
            ArchKind::SEResNetD4 => Net::ResNet(resnet::ResNet::build(&mut pb, &r, c, true)?),
            ArchKind::Nin => Net::Nin(resnet::Nin::build(&mut pb, &r, c)?),
            ArchKind::EfficientNetB0 => Net::EfficientNet(efficientnet::EfficientNet::build(&mut pb, &r, c)?),
            ArchKind::ConvNeXtTiny => Net::ConvNeXt(convnext::ConvNeXt::build(&mut pb, &r, c)?),
            ArchKind::CustomViT => Net::Vit(vit::Vit::build(&mut pb, &r, c)?),
        };
        Ok(Self { spec, store, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn arch(&self) -> ArchKind {
        self.spec.arch
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Dimension of the vector fed to the classification head.
    pub fn feature_dim(&self) -> usize {
        match &self.net {
            Net::Mlp(_) => mlp::HIDDEN[mlp::HIDDEN.len() - 1],
            Net::Cnn(_) | Net::ResNet(_) => 256,
            Net::Nin(_) => 256 + mlp::HIDDEN[mlp::HIDDEN.len() - 1],
            Net::EfficientNet(_) => efficientnet::HEAD_CHANNELS,
            Net::ConvNeXt(_) => convnext::DIMS[3],
            Net::Vit(_) => vit::EMBED,
        }
    }

    /// Freezes everything except the classification head.
    pub fn freeze_backbone(&mut self) {
        self.store.freeze_except(&[HEAD_PREFIX]);
    }

    /// Records the forward pass of `x[B, 3, 40, 40]` on `tape`. Training tapes
    /// enable dropout/drop-path and batch statistics.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Forward<T>> {
        let s = tape.shape(x);
        let want = [INPUT_CHANNELS, self.spec.input_size, self.spec.input_size];
        if s.len() != 4 || s[1..] != want || s[0] == 0 {
            return Err(TensorError::dim(
                "forward",
                format!("expected [B, {}, {}, {}], got {s:?}", want[0], want[1], want[2]),
            ));
        }
        let bound = self.store.bind(tape);
        let mut cx = Ctx {
            tape,
            store: &self.store,
            bound: &bound,
            updates: Vec::new(),
            trace: Trace::default(),
        };
        let (features, logits) = match &self.net {
            Net::Mlp(n) => n.forward(&mut cx, x)?,
            Net::Cnn(n) => n.forward(&mut cx, x)?,
            Net::ResNet(n) => n.forward(&mut cx, x)?,
            Net::Nin(n) => n.forward(&mut cx, x)?,
            Net::EfficientNet(n) => n.forward(&mut cx, x)?,
            Net::ConvNeXt(n) => n.forward(&mut cx, x)?,
            Net::Vit(n) => n.forward(&mut cx, x)?,
        };
        let Ctx { updates, trace, .. } = cx;
        tape.set_scope("");
        Ok(Forward {
            logits,
            features,
            bound,
            trace,
            updates,
        })
    }

    /// Writes running statistics produced by a training-mode forward.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            *self.store.get_mut(id) = t;
        }
    }

    /// Inference-mode logits `[B, C]`.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let f = self.forward(&mut tape, x)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Inference-mode head inputs `[B, feature_dim]`.
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let f = self.forward(&mut tape, x)?;
        Ok(tape.value(f.features).clone())
    }
}

/// Spatial sizes produced by a chain of `(kernel, stride, pad)` stages.
pub(crate) fn spatial_chain(input: usize, stages: &[(usize, usize, usize)]) -> Option<Vec<usize>> {
    let mut out = vec![input];
    let mut s = input;
    for &(k, stride, pad) in stages {
        s = crate::tensor::ConvGeometry::new(stride, pad).output_size(s, k)?;
        out.push(s);
    }
    Some(out)
}

pub(crate) fn expect_chain(arch: &str, got: Option<Vec<usize>>, want: &[usize]) -> Result<()> {
    match got {
        Some(g) if g == want => Ok(()),
        other => Err(TensorError::Config(format!(
            "{arch}: spatial chain {other:?} differs from {want:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_parse_loosely() {
        assert_eq!("resnet-d4".parse::<ArchKind>().unwrap(), ArchKind::ResNetD4);
        assert_eq!("custom_vit".parse::<ArchKind>().unwrap(), ArchKind::CustomViT);
        assert!("alexnet".parse::<ArchKind>().is_err());
        for a in ArchKind::ALL {
            assert_eq!(a.name().parse::<ArchKind>().unwrap(), a);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::new(ArchKind::Cnn, 1, 0);
        assert!(s.validate().is_err());
        s.num_classes = 2;
        assert!(s.validate().is_ok());
        s.overrides.hidden_dropout = Some(1.0);
        assert!(s.validate().is_err());
        let mut s = ModelSpec::new(ArchKind::Cnn, 4, 0);
        s.input_size = 32;
        assert!(Model::<f32>::build(s).is_err());
    }

    #[test]
    fn spec_serde_round_trip() {
        let mut s = ModelSpec::new(ArchKind::SEResNetD4, 16, 7);
        s.overrides.vit_depth = Some(2);
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"SEResNetD4\""));
        assert_eq!(serde_json::from_str::<ModelSpec>(&j).unwrap(), s);
    }
}
