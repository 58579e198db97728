//! Classification heads over prototype activation values.

use crate::error::{Error, Result};
use crate::model::ClassAllocation;
use crate::numerics::{Tape, Tensor, Var};

/// Score aggregation: each class logit is a softmax-weighted mean of its own
/// prototypes' activation values only.
#[derive(Clone, Debug, PartialEq)]
pub struct SAHead {
    /// Importance logits, one per prototype.
    pub weights: Tensor,
}

/// Fully connected head over all `M` activation values.
#[derive(Clone, Debug, PartialEq)]
pub struct FCHead {
    /// `[K, M]`.
    pub weights: Tensor,
}

impl SAHead {
    pub fn uniform(alloc: ClassAllocation) -> Self {
        Self { weights: Tensor::zeros(&[alloc.num_prototypes()]) }
    }

    /// Per-class softmax of the importance logits.
    pub fn normalized_weights(&self, alloc: ClassAllocation) -> Vec<f64> {
        let w = self.weights.data();
        let mut out = vec![0.0; w.len()];
        for k in 0..alloc.classes {
            let r = alloc.range(k);
            let mx = w[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = w[r.clone()].iter().map(|v| (v - mx).exp()).sum();
            for j in r {
                out[j] = (w[j] - mx).exp() / z;
            }
        }
        out
    }

    pub fn logits(&self, g: &[f64], alloc: ClassAllocation) -> Result<Vec<f64>> {
        check_len(g, alloc)?;
        let wn = self.normalized_weights(alloc);
        Ok((0..alloc.classes).map(|k| alloc.range(k).map(|j| wn[j] * g[j]).sum()).collect())
    }
}

impl FCHead {
    /// `+1` for a prototype's own class, `-0.5` elsewhere.
    pub fn class_connected(alloc: ClassAllocation) -> Self {
        let m = alloc.num_prototypes();
        let weights = Tensor::from_fn(&[alloc.classes, m], |i| if alloc.class_of(i % m) == i / m { 1.0 } else { -0.5 });
        Self { weights }
    }

    pub fn logits(&self, g: &[f64]) -> Result<Vec<f64>> {
        let (k, m) = (self.weights.shape()[0], self.weights.shape()[1]);
        if g.len() != m {
            return Err(Error::shape(format!("{} activation values for a head over {m}", g.len())));
        }
        let w = self.weights.data();
        Ok((0..k).map(|c| w[c * m..(c + 1) * m].iter().zip(g).map(|(a, b)| a * b).sum()).collect())
    }

    /// Entries `w[k, j]` with `c(j) == k` that are negative.
    pub fn negative_on_class(&self, alloc: ClassAllocation) -> usize {
        let m = alloc.num_prototypes();
        self.weights.data().iter().enumerate().filter(|&(i, &v)| alloc.class_of(i % m) == i / m && v < 0.0).count()
    }

    /// Sum of `|w[k, j]|` over `c(j) != k`.
    pub fn off_class_l1(&self, alloc: ClassAllocation) -> f64 {
        let m = alloc.num_prototypes();
        self.weights
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| alloc.class_of(i % m) != i / m)
            .map(|(_, v)| v.abs())
            .sum()
    }
}

fn check_len(g: &[f64], alloc: ClassAllocation) -> Result<()> {
    if g.len() != alloc.num_prototypes() {
        return Err(Error::shape(format!("{} activation values for {} prototypes", g.len(), alloc.num_prototypes())));
    }
    Ok(())
}

/// Tape form of [`SAHead::logits`]: `g[B, M]`, `weights[M]` -> `[B, K]`.
pub fn sa_logits(tape: &mut Tape, g: Var, weights: Var, alloc: ClassAllocation) -> Result<Var> {
    let b = tape.shape(g)[0];
    let (k, n) = (alloc.classes, alloc.per_class);
    let w = tape.reshape(weights, &[k, n])?;
    let wn = tape.softmax(w, 1)?;
    let gk = tape.reshape(g, &[b, k, n])?;
    let weighted = tape.mul(gk, wn)?;
    tape.sum_dim(weighted, 2)
}

/// Tape form of [`FCHead::logits`]: `g[B, M]`, `weights[K, M]` -> `[B, K]`.
pub fn fc_logits(tape: &mut Tape, g: Var, weights: Var) -> Result<Var> {
    let wt = tape.transpose(weights, 0, 1)?;
    tape.matmul(g, wt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alloc(k: usize, n: usize) -> ClassAllocation {
        ClassAllocation::new(k, n)
    }

    #[test]
    fn uniform_weights_average() {
        let head = SAHead::uniform(alloc(1, 2));
        let l = head.logits(&[0.4, 0.8], alloc(1, 2)).unwrap();
        assert!((l[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn weighted_softmax_by_hand() {
        let head = SAHead { weights: Tensor::new(&[2], vec![3f64.ln(), 0.0]).unwrap() };
        let wn = head.normalized_weights(alloc(1, 2));
        assert!((wn[0] - 0.75).abs() < 1e-15 && (wn[1] - 0.25).abs() < 1e-15);
        let l = head.logits(&[1.0, 0.0], alloc(1, 2)).unwrap();
        assert!((l[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn other_class_values_do_not_leak() {
        let a = alloc(3, 2);
        let head = SAHead { weights: Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 0.5) };
        let g = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let base = head.logits(&g, a).unwrap();
        let mut g2 = g;
        g2[4] = 100.0;
        let moved = head.logits(&g2, a).unwrap();
        assert_eq!(base[0].to_bits(), moved[0].to_bits());
        assert_eq!(base[1].to_bits(), moved[1].to_bits());
        assert_ne!(base[2], moved[2]);
    }

    #[test]
    fn fc_matches_hand_product() {
        let head = FCHead { weights: Tensor::new(&[2, 2], vec![1.0, -0.5, -0.5, 1.0]).unwrap() };
        assert_eq!(head.logits(&[1.0, 0.0]).unwrap(), vec![1.0, -0.5]);
        assert_eq!(head.logits(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(head.off_class_l1(alloc(2, 1)), 1.0);
    }

    #[test]
    fn fc_init_sign_structure() {
        let a = alloc(3, 2);
        let head = FCHead::class_connected(a);
        for k in 0..3 {
            for j in 0..6 {
                let w = head.weights.at(&[k, j]);
                assert_eq!(w > 0.0, a.class_of(j) == k);
                assert!(w != 0.0);
            }
        }
        assert_eq!(head.negative_on_class(a), 0);
    }

    #[test]
    fn tape_heads_agree_with_plain() {
        let a = alloc(2, 3);
        let g = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.77).cos());
        let sa = SAHead { weights: Tensor::from_fn(&[6], |i| i as f64 * 0.2) };
        let fc = FCHead::class_connected(a);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let sw = tape.constant(sa.weights.clone());
        let fw = tape.constant(fc.weights.clone());
        let ls = sa_logits(&mut tape, gv, sw, a).unwrap();
        let lf = fc_logits(&mut tape, gv, fw).unwrap();
        for b in 0..2 {
            let row = &g.data()[b * 6..(b + 1) * 6];
            let ps = sa.logits(row, a).unwrap();
            let pf = fc.logits(row).unwrap();
            for k in 0..2 {
                assert!((tape.data(ls)[b * 2 + k] - ps[k]).abs() < 1e-14);
                assert!((tape.data(lf)[b * 2 + k] - pf[k]).abs() < 1e-14);
            }
        }
    }
}
