//! Ablation diagnostics: structure similarity, cross-class prototype
//! similarity, per-class breakdowns and training trends.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::parts::BoxSize;
use crate::metrics::scores::{consistency_score, ConsistencyResult};
use crate::model::{ProtoNet, PrototypeBank};
use crate::numerics::{Tape, Tensor};
use crate::synthdata::AnnotatedImage;

/// `(1/Z) Σ_i exp(−‖t_i(a) − t_i(b)‖²)` for two `Z × Z` structures.
pub fn structure_similarity(a: &[f64], b: &[f64], z: usize) -> Result<f64> {
    if a.len() != z * z || b.len() != z * z || z == 0 {
        return Err(Error::shape(format!("structures of {} and {} entries for Z = {z}", a.len(), b.len())));
    }
    let total: f64 = (0..z)
        .map(|i| {
            let d2: f64 =
                a[i * z..(i + 1) * z].iter().zip(&b[i * z..(i + 1) * z]).map(|(x, y)| (x - y) * (x - y)).sum();
            (-d2).exp()
        })
        .sum();
    Ok(total / z as f64)
}

/// Shallow and deep spatial structures `[Z, Z]` of one image.
pub fn image_structures(model: &ProtoNet, image: &AnnotatedImage) -> Result<(Tensor, Tensor)> {
    let out = model.forward_backbone(&image.normalized())?;
    let mut tape = Tape::new();
    let s = out.shallow.shape().to_vec();
    let d = out.deep.shape().to_vec();
    let sv = tape.constant(out.shallow.reshape(&[1, s[0], s[1], s[2]])?);
    let dv = tape.constant(out.deep.reshape(&[1, d[0], d[1], d[2]])?);
    let (ts, td) = losses::structures(&mut tape, sv, dv)?;
    let z = d[1] * d[2];
    Ok((tape.value(ts).reshape(&[z, z])?, tape.value(td).reshape(&[z, z])?))
}

/// Mean over `images` of the shallow-deep structure similarity.
pub fn sdfa_similarity(model: &ProtoNet, images: &[AnnotatedImage]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("structure similarity needs at least one image".into()));
    }
    let per: Vec<f64> = images
        .par_iter()
        .map(|im| {
            let (ts, td) = image_structures(model, im)?;
            structure_similarity(ts.data(), td.data(), ts.shape()[0])
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossClassCounts {
    pub threshold: f64,
    /// Prototypes of other classes with cosine similarity above the threshold.
    pub per_prototype: Vec<usize>,
    pub mean: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn cross_class_similar_count(bank: &PrototypeBank, threshold: f64) -> CrossClassCounts {
    let alloc = bank.allocation;
    let m = alloc.num_prototypes();
    let per_prototype: Vec<usize> = (0..m)
        .map(|i| {
            (0..m)
                .filter(|&j| alloc.class_of(j) != alloc.class_of(i))
                .filter(|&j| cosine(bank.vector(i), bank.vector(j)) > threshold)
                .count()
        })
        .collect();
    let mean = per_prototype.iter().sum::<usize>() as f64 / m.max(1) as f64;
    CrossClassCounts { threshold, per_prototype, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    /// Consistent share of the class's prototypes; `None` without images.
    pub consistent_ratio: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Per-class consistent-prototype ratio next to per-class accuracy.
pub fn per_class_consistency_vs_accuracy(
    model: &ProtoNet,
    images: &[AnnotatedImage],
    consistency: &ConsistencyResult,
) -> Result<Vec<ClassBreakdown>> {
    let alloc = model.allocation();
    let preds: Vec<usize> = images
        .par_chunks(16)
        .map(|chunk| {
            let inputs: Vec<Tensor> = chunk.iter().map(|im| im.normalized()).collect();
            model.predict(&inputs.iter().collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok((0..alloc.classes)
        .map(|k| {
            let flags: Vec<bool> = alloc.range(k).filter_map(|j| consistency.consistent[j]).collect();
            let consistent_ratio =
                (!flags.is_empty()).then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64);
            let (mut n, mut hit) = (0usize, 0usize);
            for (im, &p) in images.iter().zip(&preds) {
                if im.label == k {
                    n += 1;
                    hit += (p == k) as usize;
                }
            }
            ClassBreakdown { class: k, consistent_ratio, accuracy: (n > 0).then(|| hit as f64 / n as f64) }
        })
        .collect())
}

/// Consistency score of every checkpoint, in order.
pub fn consistency_over_checkpoints(
    checkpoints: &[Vec<u8>],
    images: &[AnnotatedImage],
    num_parts: usize,
    mu: f64,
    size: BoxSize,
) -> Result<Vec<f64>> {
    checkpoints
        .iter()
        .map(|bytes| {
            let model = ProtoNet::from_bytes(bytes)?;
            Ok(consistency_score(&model, images, num_parts, mu, size)?.score)
        })
        .collect()
}
