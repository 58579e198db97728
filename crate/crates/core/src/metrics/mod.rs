//! Interpretability metrics for part-prototype networks.
//!
//! A prototype's corresponding object parts on an image are the annotated
//! parts inside a fixed-size box centred on the peak of its (upsampled)
//! activation map. Consistency asks whether a prototype keeps hitting the same
//! part across its class's images; stability asks whether the hit parts
//! survive input noise.

mod diagnostics;
mod oracle;
mod parts;
mod perturb;
mod report;
mod scores;

use crate::error::{Error, Result};
use crate::model::{maps_from_similarities, unit_similarities, ClassAllocation, ProtoNet};
use crate::numerics::{Tape, Tensor, Var};

pub use diagnostics::{
    consistency_over_checkpoints, cross_class_similar_count, image_structures, per_class_consistency_vs_accuracy,
    sdfa_similarity, structure_similarity, ClassBreakdown, CrossClassCounts,
};
pub use oracle::AnnotationOracle;
pub use parts::{locate, part_vector, BoundingBox, BoxSize, PartVector, DEFAULT_BOX_RATIO};
pub use perturb::{attack_objective, gaussian_perturb, pgd_perturb, Noise, PgdConfig};
pub use report::{evaluate, method_name, MetricsConfig, MetricsReport, REPORT_SCHEMA_VERSION};
pub use scores::{
    consistency_score, observe, own_class_parts, perturbed_input, stability_score, ConsistencyResult, Observations,
    StabilityResult,
};

/// What the metrics need from a model: prototype allocation and activation maps.
pub trait PrototypeNetwork: Sync {
    fn allocation(&self) -> ClassAllocation;

    /// Normalized input `[B, 3, S, S]` -> activation maps `[B, M, H, W]`.
    fn activation_maps(&self, tape: &mut Tape, input: Var) -> Result<Var>;

    /// Maps `[M, H, W]` of one normalized image `[3, S, S]`.
    fn maps(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("image must be [3, H, W], got {s:?}")));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        let maps = self.activation_maps(&mut tape, x)?;
        let ms = tape.shape(maps).to_vec();
        tape.value(maps).reshape(&ms[1..])
    }
}

impl PrototypeNetwork for ProtoNet {
    fn allocation(&self) -> ClassAllocation {
        ProtoNet::allocation(self)
    }

    fn activation_maps(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let bound = self.bind(tape, |_| false);
        let (_, deep) = self.backbone(tape, &bound, input)?;
        let (h, w) = (tape.shape(deep)[2], tape.shape(deep)[3]);
        let sims = unit_similarities(tape, deep, bound.prototypes())?;
        maps_from_similarities(tape, sims, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{prototype_activations, HeadKind, ModelConfig};

    #[test]
    fn trait_maps_match_prototype_activations() {
        let cfg = ModelConfig {
            image_size: 16,
            num_classes: 2,
            protos_per_class: 2,
            proto_dim: 4,
            widths: [3, 4, 5],
            shallow_block: 1,
            head: HeadKind::Sa,
        };
        let net = ProtoNet::new(cfg, 4).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i as f64 * 0.37).sin());
        let maps = net.maps(&img).unwrap();
        let deep = net.forward_backbone(&img).unwrap().deep;
        let rec = prototype_activations(&deep, &net.bank()).unwrap();
        assert_eq!(maps, rec.maps);
    }
}
