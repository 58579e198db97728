//! Consistency and stability scores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::parts::{locate, part_vector, BoxSize, PartVector};
use crate::metrics::perturb::{gaussian_perturb, pgd_perturb, Noise};
use crate::metrics::PrototypeNetwork;
use crate::model::ClassAllocation;
use crate::numerics::Tensor;
use crate::rng;
use crate::synthdata::AnnotatedImage;

/// Part vectors of the own-class prototypes of every image, clean and under
/// each requested noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub allocation: ClassAllocation,
    pub num_parts: usize,
    pub labels: Vec<usize>,
    /// `clean[i][n]`: image `i`, prototype `n` of its class.
    pub clean: Vec<Vec<PartVector>>,
    /// `noisy[k][i][n]` for `noises[k]`.
    pub noisy: Vec<Vec<Vec<PartVector>>>,
    pub noises: Vec<Noise>,
}

/// Part vectors of the prototypes of class `label` on a normalized input.
pub fn own_class_parts<N: PrototypeNetwork + ?Sized>(
    model: &N,
    input: &Tensor,
    image: &AnnotatedImage,
    num_parts: usize,
    size: BoxSize,
) -> Result<Vec<PartVector>> {
    let maps = model.maps(input)?;
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    let (ih, iw) = (image.height(), image.width());
    model
        .allocation()
        .range(image.label)
        .map(|j| {
            let bbox = locate(&maps.data()[j * h * w..(j + 1) * h * w], h, w, ih, iw, size)?;
            Ok(part_vector(&bbox, &image.parts, num_parts))
        })
        .collect()
}

/// The input `noise` turns image `index` into; seeded per image.
pub fn perturbed_input<N: PrototypeNetwork + ?Sized>(
    model: &N,
    image: &AnnotatedImage,
    noise: &Noise,
    seed: u64,
    index: usize,
) -> Result<Tensor> {
    let clean = image.normalized();
    let s = rng::split(seed, index as u64);
    match noise {
        Noise::Gauss { sigma } => gaussian_perturb(&clean, *sigma, s),
        Noise::Pgd(cfg) => pgd_perturb(model, &clean, image.label, cfg, s),
    }
}

/// Evaluate every image (in parallel on the current rayon pool; results keep
/// image order).
pub fn observe<N: PrototypeNetwork + ?Sized>(
    model: &N,
    images: &[AnnotatedImage],
    num_parts: usize,
    size: BoxSize,
    noises: &[Noise],
    seed: u64,
) -> Result<Observations> {
    let alloc = model.allocation();
    if let Some(im) = images.iter().find(|im| im.label >= alloc.classes) {
        return Err(Error::shape(format!("image label {} >= {} classes", im.label, alloc.classes)));
    }
    for n in noises {
        n.validate()?;
    }
    let per_image: Vec<(Vec<PartVector>, Vec<Vec<PartVector>>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            let clean = own_class_parts(model, &im.normalized(), im, num_parts, size)?;
            let noisy = noises
                .iter()
                .map(|n| {
                    let x = perturbed_input(model, im, n, seed, i)?;
                    own_class_parts(model, &x, im, num_parts, size)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((clean, noisy))
        })
        .collect::<Result<_>>()?;
    let mut noisy = vec![Vec::with_capacity(images.len()); noises.len()];
    let mut clean = Vec::with_capacity(images.len());
    for (c, ns) in per_image {
        clean.push(c);
        for (k, v) in ns.into_iter().enumerate() {
            noisy[k].push(v);
        }
    }
    Ok(Observations {
        allocation: alloc,
        num_parts,
        labels: images.iter().map(|im| im.label).collect(),
        clean,
        noisy,
        noises: noises.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub mu: f64,
    /// Averaged part vector `a` of every prototype; `None` when its class has
    /// no evaluation images.
    pub averaged_parts: Vec<Option<Vec<f64>>>,
    pub consistent: Vec<Option<bool>>,
    /// Consistent share of the defined prototypes.
    pub score: f64,
    pub undefined_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub noise: Noise,
    /// Share of each prototype's class images whose part vector is unchanged.
    pub match_rates: Vec<Option<f64>>,
    pub score: f64,
    pub undefined_classes: Vec<usize>,
}

impl Observations {
    fn class_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.allocation.classes];
        for &l in &self.labels {
            n[l] += 1;
        }
        n
    }

    fn undefined(&self) -> Vec<usize> {
        self.class_sizes().iter().enumerate().filter(|(_, &n)| n == 0).map(|(k, _)| k).collect()
    }

    fn defined_mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        for v in values.flatten() {
            sum += v;
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidConfig("no class has evaluation images".into()));
        }
        Ok(sum / count as f64)
    }

    pub fn consistency(&self, mu: f64) -> Result<ConsistencyResult> {
        let alloc = self.allocation;
        let sizes = self.class_sizes();
        let mut counts = vec![vec![0usize; self.num_parts]; alloc.num_prototypes()];
        for (label, vectors) in self.labels.iter().zip(&self.clean) {
            for (j, o) in alloc.range(*label).zip(vectors) {
                for (c, &bit) in counts[j].iter_mut().zip(o) {
                    *c += bit as usize;
                }
            }
        }
        let averaged_parts: Vec<Option<Vec<f64>>> = counts
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let n = sizes[alloc.class_of(j)];
                (n > 0).then(|| c.iter().map(|&v| v as f64 / n as f64).collect())
            })
            .collect();
        let consistent: Vec<Option<bool>> =
            averaged_parts.iter().map(|a| a.as_ref().map(|a| a.iter().any(|&v| v >= mu))).collect();
        let score = Self::defined_mean(consistent.iter().map(|f| f.map(|b| b as u8 as f64)))?;
        Ok(ConsistencyResult { mu, averaged_parts, consistent, score, undefined_classes: self.undefined() })
    }

    pub fn stability(&self, noise_index: usize) -> Result<StabilityResult> {
        let alloc = self.allocation;
        let sizes = self.class_sizes();
        let noisy = self
            .noisy
            .get(noise_index)
            .ok_or_else(|| Error::InvalidConfig(format!("no noise #{noise_index} was observed")))?;
        let mut same = vec![0usize; alloc.num_prototypes()];
        for ((label, clean), perturbed) in self.labels.iter().zip(&self.clean).zip(noisy) {
            for ((j, a), b) in alloc.range(*label).zip(clean).zip(perturbed) {
                same[j] += (a == b) as usize;
            }
        }
        let match_rates: Vec<Option<f64>> = same
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let n = sizes[alloc.class_of(j)];
                (n > 0).then(|| s as f64 / n as f64)
            })
            .collect();
        let score = Self::defined_mean(match_rates.iter().copied())?;
        Ok(StabilityResult { noise: self.noises[noise_index], match_rates, score, undefined_classes: self.undefined() })
    }
}

pub fn consistency_score<N: PrototypeNetwork + ?Sized>(
    model: &N,
    images: &[AnnotatedImage],
    num_parts: usize,
    mu: f64,
    size: BoxSize,
) -> Result<ConsistencyResult> {
    observe(model, images, num_parts, size, &[], 0)?.consistency(mu)
}

pub fn stability_score<N: PrototypeNetwork + ?Sized>(
    model: &N,
    images: &[AnnotatedImage],
    num_parts: usize,
    noise: Noise,
    size: BoxSize,
    seed: u64,
) -> Result<StabilityResult> {
    observe(model, images, num_parts, size, &[noise], seed)?.stability(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(labels: Vec<usize>, clean: Vec<Vec<PartVector>>, noisy: Vec<Vec<PartVector>>) -> Observations {
        Observations {
            allocation: ClassAllocation::new(1, 2),
            num_parts: 2,
            labels,
            clean,
            noisy: vec![noisy],
            noises: vec![Noise::Gauss { sigma: 0.0 }],
        }
    }

    #[test]
    fn hand_enumerated_consistency() {
        // Prototype A always on the head; B alternates head / belly.
        let o = obs(
            vec![0, 0],
            vec![vec![vec![true, false], vec![true, false]], vec![vec![true, false], vec![false, true]]],
            vec![],
        );
        let r = o.consistency(0.8).unwrap();
        assert_eq!(r.averaged_parts[1], Some(vec![0.5, 0.5]));
        assert_eq!(r.consistent, vec![Some(true), Some(false)]);
        assert_eq!(r.score, 0.5);
        assert_eq!(o.consistency(0.5).unwrap().score, 1.0);
        assert_eq!(o.consistency(0.0).unwrap().score, 1.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let t = vec![vec![true]];
        let f = vec![vec![false]];
        let o = Observations {
            allocation: ClassAllocation::new(1, 1),
            num_parts: 1,
            labels: vec![0; 5],
            clean: vec![t.clone(), t.clone(), t.clone(), t, f],
            noisy: vec![],
            noises: vec![],
        };
        assert_eq!(o.consistency(0.8).unwrap().score, 1.0);
    }

    #[test]
    fn stability_needs_whole_vector_equality() {
        let o = obs(
            vec![0, 0],
            vec![vec![vec![true, false]; 2], vec![vec![true, false]; 2]],
            vec![vec![vec![true, false]; 2], vec![vec![true, true]; 2]],
        );
        let r = o.stability(0).unwrap();
        assert_eq!(r.match_rates, vec![Some(0.5), Some(0.5)]);
        assert_eq!(r.score, 0.5);
    }

    #[test]
    fn empty_classes_are_reported() {
        let o = Observations {
            allocation: ClassAllocation::new(2, 1),
            num_parts: 1,
            labels: vec![1],
            clean: vec![vec![vec![true]]],
            noisy: vec![],
            noises: vec![],
        };
        let r = o.consistency(0.8).unwrap();
        assert_eq!(r.undefined_classes, vec![0]);
        assert_eq!(r.consistent, vec![None, Some(true)]);
        assert_eq!(r.score, 1.0);
    }
}
