//! The part-prototype network.
//!
//! Backbone: four `conv3×3 → relu` blocks (the first three followed by a 2×2
//! max-pool), then a `1×1` add-on projection with a sigmoid. The shallow
//! feature map is tapped after a configurable block; the deep map is the
//! add-on output. Prototypes score every deep unit by inner product and a
//! head turns the per-prototype maxima into class logits.

mod checkpoint;
mod heads;
mod prototypes;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{self, streams};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use heads::{fc_logits, sa_logits, FCHead, SAHead};
pub use prototypes::{
    maps_from_similarities, prototype_activations, unit_similarities, ActivationRecord, ClassAllocation, PrototypeBank,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Score aggregation.
    Sa,
    /// Fully connected.
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    AddOn,
    Prototypes,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub protos_per_class: usize,
    pub proto_dim: usize,
    /// Output channels of the first three conv blocks; the fourth emits `proto_dim`.
    pub widths: [usize; 3],
    /// Block (1-based) after which the shallow map is tapped.
    pub shallow_block: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn new(image_size: usize, num_classes: usize, head: HeadKind) -> Self {
        Self {
            image_size,
            num_classes,
            protos_per_class: 10,
            proto_dim: 64,
            widths: [32, 64, 128],
            shallow_block: 1,
            head,
        }
    }

    pub fn allocation(&self) -> ClassAllocation {
        ClassAllocation::new(self.num_classes, self.protos_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return bad(format!("image size {} must be a positive multiple of 8", self.image_size));
        }
        if self.num_classes < 2 || self.protos_per_class == 0 || self.proto_dim == 0 {
            return bad(format!("degenerate model config {self:?}"));
        }
        if self.widths.contains(&0) {
            return bad("conv widths must be positive".into());
        }
        if !(1..=4).contains(&self.shallow_block) {
            return bad(format!("shallow tap block {} not in 1..=4", self.shallow_block));
        }
        Ok(())
    }

    pub fn deep_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn shallow_size(&self) -> usize {
        self.image_size >> self.shallow_block.min(3)
    }

    pub fn shallow_channels(&self) -> usize {
        match self.shallow_block {
            1..=3 => self.widths[self.shallow_block - 1],
            _ => self.proto_dim,
        }
    }

    /// Name, group and shape of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, ParamGroup, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let d = self.proto_dim;
        let m = self.allocation().num_prototypes();
        let mut specs = Vec::new();
        for (i, (cin, cout)) in [(3, w1), (w1, w2), (w2, w3), (w3, d)].into_iter().enumerate() {
            specs.push((format!("conv{}.weight", i + 1), ParamGroup::Backbone, vec![cout, cin, 3, 3]));
            specs.push((format!("conv{}.bias", i + 1), ParamGroup::Backbone, vec![cout]));
        }
        specs.push(("addon.weight".into(), ParamGroup::AddOn, vec![d, d, 1, 1]));
        specs.push(("addon.bias".into(), ParamGroup::AddOn, vec![d]));
        specs.push(("prototypes".into(), ParamGroup::Prototypes, vec![m, d]));
        let head_shape = match self.head {
            HeadKind::Sa => vec![m],
            HeadKind::Fc => vec![self.num_classes, m],
        };
        specs.push(("head.weight".into(), ParamGroup::Head, head_shape));
        specs
    }
}

const PROTOTYPES: usize = 10;
const HEAD: usize = 11;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Shallow and deep feature maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// `[D_s, H_s, W_s]`.
    pub shallow: Tensor,
    /// `[D, H_d, W_d]`.
    pub deep: Tensor,
}

/// Parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn prototypes(&self) -> Var {
        self.vars[PROTOTYPES]
    }

    pub fn head(&self) -> Var {
        self.vars[HEAD]
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, D_s, H_s, W_s]`.
    pub shallow: Var,
    /// `[B, D, H_d, W_d]`.
    pub deep: Var,
    /// `[B, H_d·W_d, M]`.
    pub similarities: Var,
    /// `[B, M]`.
    pub activations: Var,
    /// `[B, K]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoNet {
    config: ModelConfig,
    params: Vec<Param>,
    /// Free-form record of how the model was produced; round-trips through checkpoints.
    pub provenance: serde_json::Value,
}

impl ProtoNet {
    /// Seeded initialization: He-normal convolutions, zero biases, unit-norm
    /// non-negative prototypes, and a head matching `config.head`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let alloc = config.allocation();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, group, shape)| {
                let tensor = match (group, name.ends_with("bias")) {
                    (_, true) => Tensor::zeros(&shape),
                    (ParamGroup::Backbone | ParamGroup::AddOn, false) => {
                        let fan_in: usize = shape[1..].iter().product();
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                    }
                    (ParamGroup::Prototypes, false) => {
                        let unif = Uniform::new(0.0, 1.0);
                        let mut t = Tensor::from_fn(&shape, |_| unif.sample(&mut rng));
                        for row in t.data_mut().chunks_mut(shape[1]) {
                            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                            row.iter_mut().for_each(|v| *v /= n);
                        }
                        t
                    }
                    (ParamGroup::Head, false) => match config.head {
                        HeadKind::Sa => SAHead::uniform(alloc).weights,
                        HeadKind::Fc => FCHead::class_connected(alloc).weights,
                    },
                };
                Param { name, group, tensor }
            })
            .collect();
        Ok(Self { config, params, provenance: serde_json::Value::Null })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn allocation(&self) -> ClassAllocation {
        self.config.allocation()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bank(&self) -> PrototypeBank {
        PrototypeBank { vectors: self.params[PROTOTYPES].tensor.clone(), allocation: self.allocation() }
    }

    pub fn sa_head(&self) -> Option<SAHead> {
        (self.config.head == HeadKind::Sa).then(|| SAHead { weights: self.params[HEAD].tensor.clone() })
    }

    pub fn fc_head(&self) -> Option<FCHead> {
        (self.config.head == HeadKind::Fc).then(|| FCHead { weights: self.params[HEAD].tensor.clone() })
    }

    /// Bind every parameter onto `tape`; `trainable` picks which groups get gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self.params.iter().enumerate().map(|(i, p)| tape.param(i, &p.tensor, trainable(p.group))).collect();
        Bound { vars }
    }

    fn conv_block(&self, tape: &mut Tape, bound: &Bound, x: Var, block: usize, pad: usize) -> Result<Var> {
        let (w, b) = (bound.vars[2 * block], bound.vars[2 * block + 1]);
        tape.conv2d_bias(x, w, b, 1, pad)
    }

    /// Backbone and add-on on `input[B, 3, S, S]`; returns (shallow, deep).
    pub fn backbone(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<(Var, Var)> {
        let s = self.config.image_size;
        if tape.shape(input).len() != 4 || tape.shape(input)[1..] != [3, s, s] {
            return Err(Error::shape(format!("model expects [B, 3, {s}, {s}] input, got {:?}", tape.shape(input))));
        }
        let mut x = input;
        let mut shallow = None;
        for block in 0..4 {
            x = self.conv_block(tape, bound, x, block, 1)?;
            x = tape.relu(x);
            if block < 3 {
                x = tape.max_pool2d(x, 2)?;
            }
            if block + 1 == self.config.shallow_block {
                shallow = Some(x);
            }
        }
        let x = self.conv_block(tape, bound, x, 4, 0)?;
        let deep = tape.sigmoid(x);
        Ok((shallow.expect("validated shallow block"), deep))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Forward> {
        let (shallow, deep) = self.backbone(tape, bound, input)?;
        let similarities = unit_similarities(tape, deep, bound.prototypes())?;
        let activations = tape.max_dim(similarities, 1)?;
        let logits = match self.config.head {
            HeadKind::Sa => sa_logits(tape, activations, bound.head(), self.allocation())?,
            HeadKind::Fc => fc_logits(tape, activations, bound.head())?,
        };
        Ok(Forward { shallow, deep, similarities, activations, logits })
    }

    /// Forward pass of a batch of normalized images without gradient tracking.
    pub fn forward_frozen(&self, inputs: &[&Tensor]) -> Result<(Tape, Forward)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let batch = Tensor::stack(&inputs.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        let x = tape.constant(batch);
        let fwd = self.forward(&mut tape, &bound, x)?;
        Ok((tape, fwd))
    }

    pub fn forward_backbone(&self, image: &Tensor) -> Result<BackboneOutput> {
        let (tape, fwd) = self.forward_frozen(&[image])?;
        Ok(BackboneOutput { shallow: tape.value(fwd.shallow).select(0)?, deep: tape.value(fwd.deep).select(0)? })
    }

    /// Class logits of one normalized image.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let (tape, fwd) = self.forward_frozen(&[image])?;
        Ok(tape.data(fwd.logits).to_vec())
    }

    /// Predicted classes for a batch of normalized images.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let (tape, fwd) = self.forward_frozen(images)?;
        let k = self.config.num_classes;
        Ok(tape.data(fwd.logits).chunks(k).map(|row| crate::numerics::argmax_slice(row).unwrap_or(0)).collect())
    }

    pub fn head_weights_mut(&mut self) -> &mut Tensor {
        &mut self.params[HEAD].tensor
    }
}
