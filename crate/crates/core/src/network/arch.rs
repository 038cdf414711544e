//! Declarative layer lists and the HighRes3DNet builder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        extent: usize,
        dilation: usize,
        c_in: usize,
        c_out: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Dropout {
        keep: f64,
    },
    Softmax,
    ResidualBegin,
    ResidualEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, extent: usize, dilation: usize, c_in: usize, c_out: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv {
                extent,
                dilation,
                c_in,
                c_out,
            },
        }
    }

    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::BatchNorm { channels },
        }
    }

    pub fn relu(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn dropout(name: impl Into<String>, keep: f64) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Dropout { keep },
        }
    }

    pub fn softmax(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Softmax,
        }
    }

    pub fn residual_begin(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::ResidualBegin,
        }
    }

    pub fn residual_end(name: impl Into<String>) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::ResidualEnd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Residual network ending in a 1x1x1 classifier.
    #[default]
    Default,
    /// Adds a 1x1x1 conv and dropout before the classifier.
    Dropout,
    /// The default layer stack without skip connections.
    Nores,
}

/// Knobs of the HighRes3DNet family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Feature widths of the dilation-1, -2 and -4 stages.
    pub widths: [usize; 3],
    pub blocks_per_stage: usize,
    /// Kernels in the 1x1x1 layer inserted by the dropout variant.
    pub dropout_width: usize,
    pub dropout_keep: f64,
}

impl ArchConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ArchConfig {
            variant,
            num_classes,
            in_channels: 1,
            widths: [16, 32, 64],
            blocks_per_stage: 3,
            dropout_width: 80,
            dropout_keep: 0.5,
        }
    }

    pub fn with_widths(mut self, widths: [usize; 3]) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_dropout_width(mut self, width: usize) -> Self {
        self.dropout_width = width;
        self
    }
}

pub const STAGE_DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    in_channels: usize,
    num_classes: usize,
    layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Validates channel flow, balanced non-nested residual markers, unique
    /// layer names and a final softmax over `num_classes`.
    pub fn new(in_channels: usize, num_classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let bad = |m: String| Err(Error::ArchitectureMismatch(m));
        if num_classes < 2 {
            return bad(format!("need at least two classes, got {num_classes}"));
        }
        let mut channels = in_channels;
        let mut open: Option<usize> = None;
        let mut names = std::collections::HashSet::new();
        for layer in &layers {
            if !names.insert(layer.name.as_str()) {
                return bad(format!("duplicate layer name {}", layer.name));
            }
            match &layer.kind {
                LayerKind::Conv {
                    extent,
                    dilation,
                    c_in,
                    c_out,
                } => {
                    if *c_in != channels {
                        return bad(format!("{}: expects {c_in} channels, receives {channels}", layer.name));
                    }
                    if !matches!(extent, 1 | 3) || *dilation == 0 || *c_out == 0 {
                        return bad(format!("{}: unsupported conv geometry", layer.name));
                    }
                    channels = *c_out;
                }
                LayerKind::BatchNorm { channels: c } => {
                    if *c != channels {
                        return bad(format!("{}: normalises {c} channels, receives {channels}", layer.name));
                    }
                }
                LayerKind::Dropout { keep } => {
                    if !(*keep > 0.0 && *keep <= 1.0) {
                        return bad(format!("{}: keep probability {keep}", layer.name));
                    }
                    if open.is_some() {
                        return bad(format!("{}: dropout inside a residual block", layer.name));
                    }
                }
                LayerKind::Relu | LayerKind::Softmax => {}
                LayerKind::ResidualBegin => {
                    if open.is_some() {
                        return bad(format!("{}: nested residual block", layer.name));
                    }
                    open = Some(channels);
                }
                LayerKind::ResidualEnd => match open.take() {
                    Some(c) if c <= channels => {}
                    Some(c) => {
                        return bad(format!("{}: block narrows {c} -> {channels} channels", layer.name));
                    }
                    None => return bad(format!("{}: unmatched residual end", layer.name)),
                },
            }
        }
        if open.is_some() {
            return bad("unterminated residual block".into());
        }
        match layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Softmax,
                ..
            }) if channels == num_classes => {}
            _ => return bad(format!("network must end in a softmax over {num_classes} channels")),
        }
        Ok(ArchitectureSpec {
            in_channels,
            num_classes,
            layers,
        })
    }

    /// HighRes3DNet: a standalone 3x3x3 conv, then `blocks_per_stage`
    /// pre-activation residual blocks (BN, ReLU, conv, twice) per dilation
    /// stage 1/2/4, then BN, ReLU and a 1x1x1 classifier with softmax. Each
    /// stage widens in the first conv of its first block.
    pub fn highres3dnet(config: &ArchConfig) -> Result<Self> {
        let [w1, _, _] = config.widths;
        let residual = config.variant != Variant::Nores;
        let mut layers = vec![
            LayerSpec::conv("conv0", 3, 1, config.in_channels, w1),
            LayerSpec::batchnorm("conv0_bn", w1),
            LayerSpec::relu("conv0_relu"),
        ];
        let mut channels = w1;
        for (s, (&dilation, &width)) in STAGE_DILATIONS.iter().zip(&config.widths).enumerate() {
            for b in 0..config.blocks_per_stage {
                let p = format!("s{}b{}", s + 1, b);
                if residual {
                    layers.push(LayerSpec::residual_begin(format!("{p}_begin")));
                }
                layers.push(LayerSpec::batchnorm(format!("{p}_bn_a"), channels));
                layers.push(LayerSpec::relu(format!("{p}_relu_a")));
                layers.push(LayerSpec::conv(format!("{p}_conv_a"), 3, dilation, channels, width));
                layers.push(LayerSpec::batchnorm(format!("{p}_bn_b"), width));
                layers.push(LayerSpec::relu(format!("{p}_relu_b")));
                layers.push(LayerSpec::conv(format!("{p}_conv_b"), 3, dilation, width, width));
                if residual {
                    layers.push(LayerSpec::residual_end(format!("{p}_end")));
                }
                channels = width;
            }
        }
        layers.push(LayerSpec::batchnorm("head_bn", channels));
        layers.push(LayerSpec::relu("head_relu"));
        if config.variant == Variant::Dropout {
            layers.push(LayerSpec::conv("head_conv", 1, 1, channels, config.dropout_width));
            layers.push(LayerSpec::relu("head_conv_relu"));
            layers.push(LayerSpec::dropout("head_dropout", config.dropout_keep));
            channels = config.dropout_width;
        }
        layers.push(LayerSpec::conv("classifier", 1, 1, channels, config.num_classes));
        layers.push(LayerSpec::softmax("softmax"));
        Self::new(config.in_channels, config.num_classes, layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&str, usize, usize, usize, usize)> {
        self.layers.iter().filter_map(|l| match l.kind {
            LayerKind::Conv {
                extent,
                dilation,
                c_in,
                c_out,
            } => Some((l.name.as_str(), extent, dilation, c_in, c_out)),
            _ => None,
        })
    }

    pub fn residual_block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::ResidualBegin)
            .count()
    }

    /// Index of the dropout layer, if any.
    pub fn dropout_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::Dropout { .. }))
    }

    pub fn has_dropout(&self) -> bool {
        self.dropout_index().is_some()
    }

    /// Largest dilated reach `(k/2)*r` over all conv layers.
    pub fn max_reach(&self) -> usize {
        self.conv_layers()
            .map(|(_, k, r, _, _)| (k / 2) * r)
            .max()
            .unwrap_or(0)
    }

    /// Half-width of the full-path receptive field: `sum (k/2)*r`.
    pub fn receptive_radius(&self) -> usize {
        self.conv_layers().map(|(_, k, r, _, _)| (k / 2) * r).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_audit() {
        let spec = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Default, 160)).unwrap();
        let convs: Vec<_> = spec.conv_layers().collect();
        assert_eq!(convs.len(), 20);
        let count = |r: usize| convs.iter().filter(|c| c.1 == 3 && c.2 == r).count();
        assert_eq!((count(1), count(2), count(4)), (7, 6, 6));
        assert_eq!(convs.iter().filter(|c| c.1 == 1).count(), 1);
        assert_eq!(spec.residual_block_count(), 9);
        // Dilation schedule is monotone: seven r=1 layers, six r=2, six r=4.
        let schedule: Vec<usize> = convs.iter().filter(|c| c.1 == 3).map(|c| c.2).collect();
        assert_eq!(schedule, [vec![1; 7], vec![2; 6], vec![4; 6]].concat());
        assert_eq!(spec.receptive_radius(), 43);
        assert!(!spec.has_dropout());
    }

    #[test]
    fn pre_activation_order_inside_blocks() {
        let spec = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Default, 4)).unwrap();
        let layers = spec.layers();
        for (i, l) in layers.iter().enumerate() {
            if l.kind == LayerKind::ResidualBegin {
                let kinds: Vec<&str> = layers[i + 1..i + 8]
                    .iter()
                    .map(|l| match l.kind {
                        LayerKind::BatchNorm { .. } => "bn",
                        LayerKind::Relu => "relu",
                        LayerKind::Conv { .. } => "conv",
                        LayerKind::ResidualEnd => "end",
                        _ => "other",
                    })
                    .collect();
                assert_eq!(kinds, ["bn", "relu", "conv", "bn", "relu", "conv", "end"]);
            }
        }
    }

    #[test]
    fn dropout_and_nores_variants() {
        let d = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Dropout, 160)).unwrap();
        let convs: Vec<_> = d.conv_layers().collect();
        assert_eq!(convs.len(), 21);
        assert_eq!(convs[19], ("head_conv", 1, 1, 64, 80));
        assert_eq!(convs[20], ("classifier", 1, 1, 80, 160));
        assert!(d.has_dropout());
        let n = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Nores, 2)).unwrap();
        assert_eq!(n.residual_block_count(), 0);
        assert_eq!(n.conv_layers().count(), 20);
        let two = ArchitectureSpec::highres3dnet(&ArchConfig::new(Variant::Default, 2)).unwrap();
        assert_eq!(two.conv_layers().last().unwrap(), ("classifier", 1, 1, 64, 2));
    }

    #[test]
    fn validation_rejects_malformed_specs() {
        let end = || vec![LayerSpec::conv("c", 1, 1, 1, 2), LayerSpec::softmax("s")];
        assert!(ArchitectureSpec::new(1, 2, end()).is_ok());
        assert!(ArchitectureSpec::new(1, 1, end()).is_err());
        let mut nested = vec![LayerSpec::residual_begin("a"), LayerSpec::residual_begin("b")];
        nested.extend(end());
        assert!(ArchitectureSpec::new(1, 2, nested).is_err());
        let mut unmatched = vec![LayerSpec::residual_end("a")];
        unmatched.extend(end());
        assert!(ArchitectureSpec::new(1, 2, unmatched).is_err());
        let wrong_channels = vec![LayerSpec::conv("c", 3, 1, 2, 2), LayerSpec::softmax("s")];
        assert!(ArchitectureSpec::new(1, 2, wrong_channels).is_err());
        let dup = vec![LayerSpec::conv("c", 1, 1, 1, 2), LayerSpec::softmax("c")];
        assert!(ArchitectureSpec::new(1, 2, dup).is_err());
    }
}
