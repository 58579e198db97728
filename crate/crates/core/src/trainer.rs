//! Warm-up then joint training with per-group Adam, plus the convex
//! last-layer fine-tuning of a fully connected head.

use std::io::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossValues, LossWeights};
use crate::model::{fc_logits, HeadKind, ModelConfig, ParamGroup, ProtoNet};
use crate::numerics::{AdamState, Tape, Tensor};
use crate::synthdata::{AnnotatedImage, Dataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Keep the backbone fixed during warm-up.
    pub freeze_backbone_in_warmup: bool,
    pub lr_backbone: f64,
    pub lr_addon: f64,
    pub lr_prototypes: f64,
    pub lr_head: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub head: HeadKind,
    pub sdfa: bool,
    pub protos_per_class: usize,
    pub proto_dim: usize,
    pub widths: [usize; 3],
    pub shallow_block: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            warmup_epochs: 5,
            freeze_backbone_in_warmup: true,
            lr_backbone: 1e-4,
            lr_addon: 3e-3,
            lr_prototypes: 3e-3,
            lr_head: 3e-3,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            head: HeadKind::Sa,
            sdfa: true,
            protos_per_class: 10,
            proto_dim: 64,
            widths: [32, 64, 128],
            shallow_block: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!("warm-up epochs {} exceed epochs {}", self.warmup_epochs, self.epochs));
        }
        let lrs = [self.lr_backbone, self.lr_addon, self.lr_prototypes, self.lr_head];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad(format!("learning rates must be positive: {lrs:?}"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        self.weights.validate()
    }

    /// Loss weights with the alignment term switched off when SDFA is disabled.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights { align: if self.sdfa { self.weights.align } else { 0.0 }, ..self.weights }
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            image_size: dataset.image_size,
            num_classes: dataset.num_classes,
            protos_per_class: self.protos_per_class,
            proto_dim: self.proto_dim,
            widths: self.widths,
            shallow_block: self.shallow_block,
            head: self.head,
        }
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::AddOn => self.lr_addon,
            ParamGroup::Prototypes => self.lr_prototypes,
            ParamGroup::Head => self.lr_head,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Means over the epoch's training examples.
    pub losses: LossValues,
    pub test_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_ce,loss_clst,loss_sep,loss_ortho,loss_align,test_acc";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ProtoNet,
    /// Serialized model after each epoch.
    pub checkpoints: Vec<Vec<u8>>,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for row in &self.log {
            let l = &row.losses;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.epoch, l.ce, l.clst, l.sep, l.ortho, l.align, row.test_acc
            ));
        }
        out
    }
}

const GROUPS: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::AddOn, ParamGroup::Prototypes, ParamGroup::Head];

fn batch_tensor(images: &[&AnnotatedImage]) -> Result<Tensor> {
    Tensor::stack(&images.iter().map(|im| im.normalized()).collect::<Vec<_>>())
}

/// Rescale every row of a `[M, D]` matrix to unit length.
fn normalize_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Fraction of `images` the model classifies correctly.
pub fn accuracy(model: &ProtoNet, images: &[AnnotatedImage]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in images.chunks(32) {
        let inputs: Vec<Tensor> = chunk.iter().map(|im| im.normalized()).collect();
        let pred = model.predict(&inputs.iter().collect::<Vec<_>>())?;
        correct += pred.iter().zip(chunk).filter(|(p, im)| **p == im.label).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

fn check_dataset(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if dataset.num_classes != model.num_classes || dataset.image_size != model.image_size {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes at {}px, model expects {} at {}px",
            dataset.num_classes, dataset.image_size, model.num_classes, model.image_size
        )));
    }
    if dataset.train().is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    Ok(())
}

/// Train a freshly initialized model on the dataset's training split.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, config, |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    crate::numerics::retain_freed_memory();
    let model_cfg = config.model_config(dataset);
    check_dataset(&model_cfg, dataset)?;
    let mut model = ProtoNet::new(model_cfg, config.seed)?;
    model.provenance = serde_json::json!({
        "tool_version": crate::TOOL_VERSION,
        "train": config,
        "epoch": 0,
    });
    let weights = config.effective_weights();
    let alloc = model.allocation();
    let mut adam: Vec<AdamState> = GROUPS.iter().map(|&g| AdamState::new(config.lr(g))).collect();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut log = Vec::with_capacity(config.epochs);
    let train = dataset.train();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        let trainable = |g: ParamGroup| !(warmup && config.freeze_backbone_in_warmup && g == ParamGroup::Backbone);
        let order = dataset.shuffled(Split::Train, config.seed, epoch);
        let mut sums = LossValues::default();
        for idx in order.chunks(config.batch_size) {
            let images: Vec<&AnnotatedImage> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = images.iter().map(|im| im.label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, trainable);
            let x = tape.constant(batch_tensor(&images)?);
            let fwd = model.forward(&mut tape, &bound, x)?;
            let terms = losses::total_loss(&mut tape, &fwd, bound.prototypes(), &labels, alloc, &weights)?;
            let v = terms.values(&tape);
            if !v.total.is_finite() {
                return Err(Error::NonFinite { step, what: format!("training loss {v:?}") });
            }
            tape.backward(terms.total)?;
            for p in model.params_mut() {
                p.tensor.zero_grad();
            }
            for (key, g) in tape.param_grads() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { step, what: format!("gradient of parameter {key}") });
                }
                model.params_mut()[key].tensor.accumulate_grad(g)?;
            }
            for (gi, &group) in GROUPS.iter().enumerate() {
                if !trainable(group) {
                    continue;
                }
                let mut ps: Vec<&mut Tensor> =
                    model.params_mut().iter_mut().filter(|p| p.group == group).map(|p| &mut p.tensor).collect();
                for p in ps.iter_mut() {
                    if p.grad().is_none() {
                        let z = vec![0.0; p.numel()];
                        p.accumulate_grad(&z)?;
                    }
                }
                adam[gi].step(&mut ps)?;
                if group == ParamGroup::Prototypes {
                    ps.iter_mut().for_each(|p| normalize_rows(p));
                }
            }
            let n = labels.len() as f64;
            sums.ce += v.ce * n;
            sums.clst += v.clst * n;
            sums.sep += v.sep * n;
            sums.ortho += v.ortho * n;
            sums.align += v.align * n;
            sums.total += v.total * n;
            step += 1;
        }
        for p in model.params_mut() {
            p.tensor.zero_grad();
        }
        let n = train.len() as f64;
        let losses = LossValues {
            ce: sums.ce / n,
            clst: sums.clst / n,
            sep: sums.sep / n,
            ortho: sums.ortho / n,
            align: sums.align / n,
            total: sums.total / n,
        };
        let row = EpochLog { epoch: epoch + 1, losses, test_acc: accuracy(&model, dataset.test())? };
        model.provenance["epoch"] = serde_json::json!(epoch + 1);
        checkpoints.push(model.to_bytes()?);
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, checkpoints, log })
}

/// Maximum activation values `[N, M]` of `images` under a frozen model.
pub fn activation_values(model: &ProtoNet, images: &[AnnotatedImage]) -> Result<Tensor> {
    let m = model.allocation().num_prototypes();
    let mut data = Vec::with_capacity(images.len() * m);
    for chunk in images.chunks(32) {
        let inputs: Vec<Tensor> = chunk.iter().map(|im| im.normalized()).collect();
        let (tape, fwd) = model.forward_frozen(&inputs.iter().collect::<Vec<_>>())?;
        data.extend_from_slice(tape.data(fwd.activations));
    }
    Tensor::new(&[images.len(), m], data)
}

/// Cross-entropy of `g · wᵀ` and its gradient in `w`.
fn ce_and_grad(g: &Tensor, w: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let gv = tape.constant(g.clone());
    let wv = tape.leaf(w.clone().with_grad());
    let logits = fc_logits(&mut tape, gv, wv)?;
    let ce = tape.cross_entropy(logits, labels)?;
    tape.backward(ce)?;
    Ok((tape.data(ce)[0], tape.grad(wv).expect("head requires grad").to_vec()))
}

fn ce_only(g: &Tensor, w: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = tape.constant(g.clone());
    let wv = tape.constant(w.clone());
    let logits = fc_logits(&mut tape, gv, wv)?;
    let ce = tape.cross_entropy(logits, labels)?;
    Ok(tape.data(ce)[0])
}

/// Result of [`finetune_fc_last_layer`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: ProtoNet,
    /// Objective before the first step and after each step.
    pub objective: Vec<f64>,
}

/// Minimize `L_ce + Σ |off-class w|` over the head alone, everything else fixed.
///
/// Proximal gradient with backtracking: a gradient step on the cross-entropy
/// followed by soft-thresholding of the off-class entries. Backtracking keeps
/// the step inside the region where the quadratic upper bound holds, so the
/// objective never increases.
pub fn finetune_fc_last_layer(model: &ProtoNet, dataset: &Dataset, steps: usize) -> Result<FinetuneOutcome> {
    let Some(head) = model.fc_head() else {
        return Err(Error::InvalidConfig("last-layer fine-tuning needs a fully connected head".into()));
    };
    let alloc = model.allocation();
    let train = dataset.train();
    let labels: Vec<usize> = train.iter().map(|im| im.label).collect();
    let g = activation_values(model, train)?;
    let mask = losses::off_class_mask(alloc);
    let l1 = |w: &Tensor| -> f64 { w.data().iter().zip(mask.data()).map(|(v, m)| v.abs() * m).sum() };

    let mut w = head.weights;
    let mut objective = vec![ce_only(&g, &w, &labels)? + l1(&w)];
    let mut eta = 1.0;
    for step in 0..steps {
        let (ce, grad) = ce_and_grad(&g, &w, &labels)?;
        loop {
            let cand = Tensor::from_fn(w.shape(), |i| {
                let z = w.data()[i] - eta * grad[i];
                if mask.data()[i] == 1.0 {
                    z.signum() * (z.abs() - eta).max(0.0)
                } else {
                    z
                }
            });
            let delta: Vec<f64> = cand.data().iter().zip(w.data()).map(|(a, b)| a - b).collect();
            let lin: f64 = delta.iter().zip(&grad).map(|(d, g)| d * g).sum();
            let quad: f64 = delta.iter().map(|d| d * d).sum::<f64>() / (2.0 * eta);
            let ce_new = ce_only(&g, &cand, &labels)?;
            if !ce_new.is_finite() {
                return Err(Error::NonFinite { step, what: "fine-tuning cross-entropy".into() });
            }
            if ce_new <= ce + lin + quad || eta < 1e-12 {
                let f_new = ce_new + l1(&cand);
                if f_new <= *objective.last().expect("non-empty") {
                    w = cand;
                    objective.push(f_new);
                } else {
                    objective.push(*objective.last().expect("non-empty"));
                }
                break;
            }
            eta *= 0.5;
        }
    }
    let mut out = model.clone();
    *out.head_weights_mut() = w;
    Ok(FinetuneOutcome { model: out, objective })
}

/// Write the training log CSV.
pub fn write_log(path: &std::path::Path, outcome: &TrainOutcome) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(outcome.log_csv().as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, GeneratorConfig};

    fn tiny_data() -> Dataset {
        generate(&GeneratorConfig {
            classes: 2,
            parts: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 32,
            seed: 1,
            occlusion_prob: 0.0,
        })
        .unwrap()
        .dataset
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            protos_per_class: 2,
            proto_dim: 8,
            widths: [4, 6, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 0, warmup_epochs: 0, ..tiny_config() };
        let out = train(&data, &cfg).unwrap();
        let init = ProtoNet::new(cfg.model_config(&data), cfg.seed).unwrap();
        assert_eq!(out.model.params(), init.params());
        assert!(out.checkpoints.is_empty() && out.log.is_empty());
    }

    #[test]
    fn warmup_keeps_backbone_and_logs_in_order() {
        let data = tiny_data();
        let cfg = tiny_config();
        let out = train(&data, &cfg).unwrap();
        let init = ProtoNet::new(cfg.model_config(&data), cfg.seed).unwrap();
        let after_warmup = ProtoNet::from_bytes(&out.checkpoints[0]).unwrap();
        for (a, b) in init.params().iter().zip(after_warmup.params()) {
            assert_eq!(a.tensor == b.tensor, a.group == ParamGroup::Backbone, "{}", a.name);
        }
        assert_ne!(after_warmup.params()[0], out.model.params()[0]);
        assert_eq!(out.log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(out.log_csv().lines().next(), Some(LOG_HEADER));
        assert_eq!(out.log_csv().lines().count(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let a = train(&data, &tiny_config()).unwrap();
        let b = train(&data, &tiny_config()).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn sdfa_off_logs_align_without_using_it() {
        let data = tiny_data();
        let cfg = TrainConfig { sdfa: false, ..tiny_config() };
        let out = train(&data, &cfg).unwrap();
        assert!(out.log[0].losses.align > 0.0);
        assert_eq!(cfg.effective_weights().align, 0.0);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let data = tiny_data();
        // One Adam step moves every weight by about the learning rate, so the
        // second conv layer's products overflow with mixed signs and sum to NaN.
        let cfg = TrainConfig {
            lr_backbone: 1e300,
            lr_head: 1e300,
            lr_prototypes: 1e300,
            lr_addon: 1e300,
            warmup_epochs: 0,
            ..tiny_config()
        };
        match train(&data, &cfg) {
            Err(Error::NonFinite { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn finetune_descends_and_rejects_sa() {
        let data = tiny_data();
        let cfg = TrainConfig { head: HeadKind::Fc, ..tiny_config() };
        let model = train(&data, &cfg).unwrap().model;
        let zero = finetune_fc_last_layer(&model, &data, 0).unwrap();
        assert_eq!(zero.model, model);
        let ft = finetune_fc_last_layer(&model, &data, 30).unwrap();
        assert!(ft.objective.windows(2).all(|w| w[1] <= w[0]));
        let alloc = model.allocation();
        assert!(ft.model.fc_head().unwrap().off_class_l1(alloc) < model.fc_head().unwrap().off_class_l1(alloc));
        let sa = train(&data, &tiny_config()).unwrap().model;
        assert!(finetune_fc_last_layer(&sa, &data, 1).is_err());
    }
}
