use serde::{Deserialize, Serialize};

use super::ModelError;

/// One row of the bottleneck table: `repeats` inverted-residual blocks with
/// the given expansion factor and output width. Only the first block of the
/// row uses `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub repeats: usize,
}

impl BottleneckSpec {
    pub const fn new(expansion: usize, out_channels: usize, stride: usize, repeats: usize) -> Self {
        Self {
            expansion,
            out_channels,
            stride,
            repeats,
        }
    }
}

/// MobileNet-v2 bottleneck table at width multiplier 1.0.
pub const MOBILENET_V2_BOTTLENECKS: [BottleneckSpec; 7] = [
    BottleneckSpec::new(1, 16, 1, 1),
    BottleneckSpec::new(6, 24, 2, 2),
    BottleneckSpec::new(6, 32, 2, 3),
    BottleneckSpec::new(6, 64, 2, 4),
    BottleneckSpec::new(6, 96, 1, 3),
    BottleneckSpec::new(6, 160, 2, 3),
    BottleneckSpec::new(6, 320, 1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub stem_channels: usize,
    pub bottlenecks: Vec<BottleneckSpec>,
    pub head_width: usize,
    pub input_resolution: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mobilenet_v2(num_classes: usize) -> Self {
        Self {
            stem_channels: 32,
            bottlenecks: MOBILENET_V2_BOTTLENECKS.to_vec(),
            head_width: 1280,
            input_resolution: 224,
            num_classes,
        }
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.input_resolution = resolution;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| Err(ModelError::InvalidSpec { block: None, reason });
        if self.stem_channels == 0 {
            return invalid("stem_channels must be positive".into());
        }
        if self.head_width == 0 {
            return invalid("head_width must be positive".into());
        }
        if self.input_resolution == 0 {
            return invalid("input_resolution must be positive".into());
        }
        if self.num_classes == 0 {
            return invalid("num_classes must be positive".into());
        }
        for (i, b) in self.bottlenecks.iter().enumerate() {
            let reason = if !matches!(b.stride, 1 | 2) {
                format!("stride {} is not 1 or 2", b.stride)
            } else if b.expansion == 0 {
                "expansion factor must be at least 1".into()
            } else if b.out_channels == 0 {
                "out_channels must be positive".into()
            } else if b.repeats == 0 {
                "repeat count must be positive".into()
            } else {
                continue;
            };
            return Err(ModelError::InvalidSpec { block: Some(i), reason });
        }
        Ok(())
    }

    /// Expanded list of inverted-residual blocks.
    pub fn blocks(&self) -> Vec<BlockLayout> {
        let mut out = Vec::new();
        let mut in_c = self.stem_channels;
        for b in &self.bottlenecks {
            for r in 0..b.repeats {
                let stride = if r == 0 { b.stride } else { 1 };
                out.push(BlockLayout {
                    in_channels: in_c,
                    out_channels: b.out_channels,
                    hidden: in_c * b.expansion,
                    expansion: b.expansion,
                    stride,
                    residual: stride == 1 && in_c == b.out_channels,
                });
                in_c = b.out_channels;
            }
        }
        out
    }

    /// Stem, every inverted-residual block, and the final 1x1 conv.
    pub fn backbone_stages(&self) -> usize {
        self.blocks().len() + 2
    }

    pub fn last_channels(&self) -> usize {
        self.bottlenecks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    /// Ordered parameter layout. Names carry the stage index.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::new();
        let stages = self.backbone_stages();
        conv_bn_slots(&mut slots, 0, stage_name(0, None), [self.stem_channels, 3, 3, 3]);
        for (i, b) in self.blocks().into_iter().enumerate() {
            let stage = i + 1;
            if b.expansion != 1 {
                conv_bn_slots(&mut slots, stage, stage_name(stage, Some("expand")), [b.hidden, b.in_channels, 1, 1]);
            }
            conv_bn_slots(&mut slots, stage, stage_name(stage, Some("depthwise")), [b.hidden, 1, 3, 3]);
            conv_bn_slots(&mut slots, stage, stage_name(stage, Some("project")), [b.out_channels, b.hidden, 1, 1]);
        }
        let last = stages - 1;
        conv_bn_slots(&mut slots, last, stage_name(last, None), [self.head_width, self.last_channels(), 1, 1]);
        slots.push(ParamSlot {
            name: "classifier.weight".into(),
            shape: vec![self.num_classes, self.head_width],
            stage: Stage::Classifier,
            kind: ParamKind::Trainable,
        });
        slots.push(ParamSlot {
            name: "classifier.bias".into(),
            shape: vec![self.num_classes],
            stage: Stage::Classifier,
            kind: ParamKind::Trainable,
        });
        slots
    }

    pub fn parameter_counts(&self, policy: FreezePolicy) -> Result<ParamCounts, ModelError> {
        let stages = self.backbone_stages();
        if policy.frozen_block_count > stages {
            return Err(ModelError::InvalidFreeze {
                frozen: policy.frozen_block_count,
                stages,
            });
        }
        let mut counts = ParamCounts::default();
        for slot in self.param_layout() {
            if slot.kind == ParamKind::Buffer {
                continue;
            }
            let n = slot.elements();
            counts.total += n;
            let frozen = matches!(slot.stage, Stage::Backbone(i) if i < policy.frozen_block_count);
            if !frozen {
                counts.trainable += n;
            }
        }
        Ok(counts)
    }
}

fn stage_name(stage: usize, part: Option<&str>) -> String {
    match part {
        Some(p) => format!("features.{stage:02}.{p}"),
        None => format!("features.{stage:02}"),
    }
}

fn conv_bn_slots(slots: &mut Vec<ParamSlot>, stage: usize, prefix: String, conv_shape: [usize; 4]) {
    let c = conv_shape[0];
    let st = Stage::Backbone(stage);
    slots.push(ParamSlot {
        name: format!("{prefix}.conv.weight"),
        shape: conv_shape.to_vec(),
        stage: st,
        kind: ParamKind::Trainable,
    });
    for (suffix, kind) in [
        ("weight", ParamKind::Trainable),
        ("bias", ParamKind::Trainable),
        ("running_mean", ParamKind::Buffer),
        ("running_var", ParamKind::Buffer),
    ] {
        slots.push(ParamSlot {
            name: format!("{prefix}.bn.{suffix}"),
            shape: vec![c],
            stage: st,
            kind,
        });
    }
}

/// Geometry of one inverted-residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub expansion: usize,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Backbone(usize),
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics: stored, never trained.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub stage: Stage,
    pub kind: ParamKind,
}

impl ParamSlot {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Number of leading backbone stages (stem, inverted-residual blocks, final
/// conv) whose weights are frozen. The classifier head is always trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub frozen_block_count: usize,
}

impl FreezePolicy {
    /// Stem plus the first nine inverted-residual blocks.
    pub const FIRST_TEN: Self = Self { frozen_block_count: 10 };

    pub fn all(spec: &ModelSpec) -> Self {
        Self {
            frozen_block_count: spec.backbone_stages(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}
