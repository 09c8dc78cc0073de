//! Parameter tables of larger reference architectures, used to compare
//! serialized model sizes without implementing their forward passes.

use serde::Serialize;

use super::spec::{ParamKind, ParamSlot, Stage};
use crate::container::{self, Entry, FORMAT_VERSION};

fn conv_bn(slots: &mut Vec<ParamSlot>, prefix: &str, shape: [usize; 4]) {
    let st = Stage::Backbone(0);
    slots.push(ParamSlot {
        name: format!("{prefix}.conv.weight"),
        shape: shape.to_vec(),
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
            shape: vec![shape[0]],
            stage: st,
            kind,
        });
    }
}

/// ResNet-50 layer table: a 7x7 stem and bottleneck stages of
/// (3, 4, 6, 3) blocks with expansion 4.
pub fn resnet50_layout(num_classes: usize) -> Vec<ParamSlot> {
    let mut slots = Vec::new();
    conv_bn(&mut slots, "stem", [64, 3, 7, 7]);
    let mut in_c = 64;
    for (layer, (blocks, planes)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        for b in 0..blocks {
            let p = format!("layer{}.{b}", layer + 1);
            conv_bn(&mut slots, &format!("{p}.reduce"), [planes, in_c, 1, 1]);
            conv_bn(&mut slots, &format!("{p}.spatial"), [planes, planes, 3, 3]);
            conv_bn(&mut slots, &format!("{p}.expand"), [planes * 4, planes, 1, 1]);
            if b == 0 {
                conv_bn(&mut slots, &format!("{p}.downsample"), [planes * 4, in_c, 1, 1]);
            }
            in_c = planes * 4;
        }
    }
    for (name, shape) in [("fc.weight", vec![num_classes, in_c]), ("fc.bias", vec![num_classes])] {
        slots.push(ParamSlot {
            name: name.into(),
            shape,
            stage: Stage::Classifier,
            kind: ParamKind::Trainable,
        });
    }
    slots
}

/// Trainable parameters, excluding batch-norm running statistics.
pub fn count_parameters(slots: &[ParamSlot]) -> usize {
    slots
        .iter()
        .filter(|s| s.kind == ParamKind::Trainable)
        .map(ParamSlot::elements)
        .sum()
}

/// Byte size of a weight file holding `slots` (running statistics included),
/// computed without materializing the blob.
pub fn synthesized_file_size(kind: &str, slots: &[ParamSlot]) -> u64 {
    #[derive(Serialize)]
    struct Manifest<'a> {
        format_version: u32,
        kind: &'a str,
        entries: Vec<Entry>,
    }
    let entries = container::layout_entries(slots.iter().map(|s| (s.name.as_str(), s.shape.as_slice())));
    let blob: u64 = entries.iter().map(Entry::byte_len).sum();
    let manifest = serde_json::to_vec(&Manifest {
        format_version: FORMAT_VERSION,
        kind,
        entries,
    })
    .expect("manifest serializes");
    12 + manifest.len() as u64 + blob
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_has_its_well_known_parameter_count() {
        assert_eq!(count_parameters(&resnet50_layout(1000)), 25_557_032);
    }
}
