//! Training objectives.
//!
//! Every loss is built on a [`Tape`] so the trainer can backpropagate the
//! weighted sum. Batch losses are means over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassAllocation, Forward};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clst: f64,
    pub sep: f64,
    pub ortho: f64,
    pub align: f64,
    /// Tolerance below which structure differences are not penalized.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { clst: 1.0, sep: 1.0, ortho: 1.0, align: 0.5, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.clst, self.sep, self.ortho, self.align, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits[B, K]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `[B, M]` constant holding 0 where `c(j)` matches (`own`) or differs from
/// (`!own`) the label, and `-inf` elsewhere.
fn class_mask(labels: &[usize], alloc: ClassAllocation, own: bool) -> Tensor {
    let m = alloc.num_prototypes();
    Tensor::from_fn(&[labels.len(), m], |i| {
        if (alloc.class_of(i % m) == labels[i / m]) == own {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

fn masked_max_mean(tape: &mut Tape, g: Var, labels: &[usize], alloc: ClassAllocation, own: bool) -> Result<Var> {
    let shape = tape.shape(g).to_vec();
    if shape != [labels.len(), alloc.num_prototypes()] {
        return Err(Error::shape(format!(
            "activations {shape:?} for {} labels and {} prototypes",
            labels.len(),
            alloc.num_prototypes()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= alloc.classes) {
        return Err(Error::shape(format!("label {bad} >= {} classes", alloc.classes)));
    }
    let mask = tape.constant(class_mask(labels, alloc, own));
    let masked = tape.add(g, mask)?;
    let best = tape.max_dim(masked, 1)?;
    Ok(tape.mean(best))
}

/// `-max_{c(j) = y} g_j`, batch mean.
pub fn cluster_loss(tape: &mut Tape, activations: Var, labels: &[usize], alloc: ClassAllocation) -> Result<Var> {
    let m = masked_max_mean(tape, activations, labels, alloc, true)?;
    Ok(tape.scale(m, -1.0))
}

/// `max_{c(j) != y} g_j`, batch mean.
pub fn separation_loss(tape: &mut Tape, activations: Var, labels: &[usize], alloc: ClassAllocation) -> Result<Var> {
    masked_max_mean(tape, activations, labels, alloc, false)
}

/// `Σ_k ‖P_k P_kᵀ − I‖²_F` over the class blocks of `prototypes[M, D]`.
pub fn ortho_loss(tape: &mut Tape, prototypes: Var, alloc: ClassAllocation) -> Result<Var> {
    let [m, d] = *tape.shape(prototypes) else {
        return Err(Error::shape(format!("prototypes must be [M, D], got {:?}", tape.shape(prototypes))));
    };
    if m != alloc.num_prototypes() {
        return Err(Error::shape(format!("{m} prototypes for allocation {alloc:?}")));
    }
    let n = alloc.per_class;
    let blocks = tape.reshape(prototypes, &[alloc.classes, n, d])?;
    let bt = tape.transpose(blocks, 1, 2)?;
    let gram = tape.bmm(blocks, bt)?;
    let eye = tape.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// Groups each `H_s/H_d × W_s/W_d` patch of `shallow[B, D_s, H_s, W_s]` into
/// one unit: `[B, H_d·W_d, D_s·(H_s/H_d)·(W_s/W_d)]`.
pub fn shallow_patches(tape: &mut Tape, shallow: Var, hd: usize, wd: usize) -> Result<Var> {
    let [b, ds, hs, ws] = *tape.shape(shallow) else {
        return Err(Error::shape(format!("shallow map must be [B,D,H,W], got {:?}", tape.shape(shallow))));
    };
    if hd == 0 || wd == 0 || hs % hd != 0 || ws % wd != 0 || hs < hd || ws < wd {
        return Err(Error::shape(format!("shallow map {hs}x{ws} is not an integer multiple of deep map {hd}x{wd}")));
    }
    let (rh, rw) = (hs / hd, ws / wd);
    let x = tape.reshape(shallow, &[b, ds, hd, rh, wd, rw])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b, hd * wd, ds * rh * rw])
}

/// Pairwise cosine similarities of the units of `units[B, Z, F]`: `[B, Z, Z]`.
pub fn spatial_structure(tape: &mut Tape, units: Var) -> Result<Var> {
    let n = tape.normalize(units)?;
    let nt = tape.transpose(n, 1, 2)?;
    tape.bmm(n, nt)
}

/// Deep `[B, D, H, W]` as units `[B, H·W, D]`.
pub fn deep_units(tape: &mut Tape, deep: Var) -> Result<Var> {
    let [b, d, h, w] = *tape.shape(deep) else {
        return Err(Error::shape(format!("deep map must be [B,D,H,W], got {:?}", tape.shape(deep))));
    };
    let flat = tape.reshape(deep, &[b, d, h * w])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Structures `(t(z_s), t(z_d))`, each `[B, Z, Z]`; the shallow side is detached.
pub fn structures(tape: &mut Tape, shallow: Var, deep: Var) -> Result<(Var, Var)> {
    let (hd, wd) = match *tape.shape(deep) {
        [_, _, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("deep map must be [B,D,H,W], got {s:?}"))),
    };
    if tape.shape(shallow).first() != tape.shape(deep).first() {
        return Err(Error::shape("shallow and deep batches differ"));
    }
    let fixed = tape.detach(shallow);
    let ps = shallow_patches(tape, fixed, hd, wd)?;
    let ts = spatial_structure(tape, ps)?;
    let ud = deep_units(tape, deep)?;
    let td = spatial_structure(tape, ud)?;
    Ok((ts, td))
}

/// `(1/Z²) Σ_ij relu(|t_ij(z_d) − t_ij(z_s)| − γ)`, batch mean.
pub fn align_loss(tape: &mut Tape, shallow: Var, deep: Var, gamma: f64) -> Result<Var> {
    let (ts, td) = structures(tape, shallow, deep)?;
    let [b, z, _] = *tape.shape(td) else { unreachable!("bmm output is 3-d") };
    let diff = tape.sub(td, ts)?;
    let dev = tape.abs(diff);
    let excess = tape.add_scalar(dev, -gamma);
    let hinge = tape.relu(excess);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, 1.0 / (b * z * z) as f64))
}

/// Handles of every term and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub clst: Var,
    pub sep: Var,
    pub ortho: Var,
    pub align: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub clst: f64,
    pub sep: f64,
    pub ortho: f64,
    pub align: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.data(x)[0];
        LossValues {
            ce: v(self.ce),
            clst: v(self.clst),
            sep: v(self.sep),
            ortho: v(self.ortho),
            align: v(self.align),
            total: v(self.total),
        }
    }
}

/// `L_ce + λ_clst L_clst + λ_sep L_sep + λ_ortho L_ortho + λ_align L_align`.
///
/// Terms with zero weight are still evaluated (for logging) but on detached
/// inputs, so they cost no backward work and add exactly nothing.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &Forward,
    prototypes: Var,
    labels: &[usize],
    alloc: ClassAllocation,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let pick = |tape: &mut Tape, v: Var, lambda: f64| if lambda == 0.0 { tape.detach(v) } else { v };
    let ce = cross_entropy(tape, fwd.logits, labels)?;
    let g = pick(tape, fwd.activations, w.clst);
    let clst = cluster_loss(tape, g, labels, alloc)?;
    let g = pick(tape, fwd.activations, w.sep);
    let sep = separation_loss(tape, g, labels, alloc)?;
    let p = pick(tape, prototypes, w.ortho);
    let ortho = ortho_loss(tape, p, alloc)?;
    let d = pick(tape, fwd.deep, w.align);
    let align = align_loss(tape, fwd.shallow, d, w.gamma)?;
    let mut total = ce;
    for (term, lambda) in [(clst, w.clst), (sep, w.sep), (ortho, w.ortho), (align, w.align)] {
        if lambda != 0.0 {
            let s = tape.scale(term, lambda);
            total = tape.add(total, s)?;
        }
    }
    Ok(LossTerms { ce, clst, sep, ortho, align, total })
}

/// `[K, M]` indicator of off-class head entries.
pub fn off_class_mask(alloc: ClassAllocation) -> Tensor {
    let m = alloc.num_prototypes();
    Tensor::from_fn(&[alloc.classes, m], |i| if alloc.class_of(i % m) != i / m { 1.0 } else { 0.0 })
}

/// `L_ce + Σ_k Σ_{c(j) != k} |w_kj|` for a fully connected head `weights[K, M]`.
pub fn fc_convex_objective(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: Var,
    alloc: ClassAllocation,
) -> Result<Var> {
    let ce = cross_entropy(tape, logits, labels)?;
    let mask = tape.constant(off_class_mask(alloc));
    let off = tape.mul(weights, mask)?;
    let a = tape.abs(off);
    let l1 = tape.sum(a);
    tape.add(ce, l1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.data(v)[0]
    }

    #[test]
    fn cluster_and_separation_by_hand() {
        let alloc = ClassAllocation::new(2, 2);
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::new(&[1, 4], vec![0.2, 0.9, 0.3, 0.1]).unwrap());
        let c = cluster_loss(&mut tape, g, &[0], alloc).unwrap();
        let s = separation_loss(&mut tape, g, &[0], alloc).unwrap();
        assert_eq!(scalar(&tape, c), -0.9);
        assert_eq!(scalar(&tape, s), 0.3);
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let c = cluster_loss(&mut tape, z, &[0, 1, 1], alloc).unwrap();
        let s = separation_loss(&mut tape, z, &[0, 1, 1], alloc).unwrap();
        assert_eq!((scalar(&tape, c), scalar(&tape, s)), (0.0, 0.0));
    }

    #[test]
    fn separation_ignores_non_maximal_other_class() {
        let alloc = ClassAllocation::new(3, 1);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 3], vec![0.5, 0.7, 0.4]).unwrap());
        let b = tape.constant(Tensor::new(&[1, 3], vec![0.5, 0.7, -2.0]).unwrap());
        let sa = separation_loss(&mut tape, a, &[0], alloc).unwrap();
        let sb = separation_loss(&mut tape, b, &[0], alloc).unwrap();
        assert_eq!(scalar(&tape, sa), scalar(&tape, sb));
    }

    #[test]
    fn ortho_identical_pair() {
        let s = 0.5f64.sqrt();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[2, 2], vec![s, s, s, s]).unwrap());
        let l = ortho_loss(&mut tape, p, ClassAllocation::new(1, 2)).unwrap();
        assert!((scalar(&tape, l) - 2.0).abs() < 1e-12);
        let q = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = ortho_loss(&mut tape, q, ClassAllocation::new(1, 2)).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    /// Two shallow units e1, e2 and deep units e1, (0.5, √0.75).
    fn toy_maps() -> (Tensor, Tensor) {
        let shallow = Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let deep = Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.5, 0.0, 0.75f64.sqrt()]).unwrap();
        (shallow, deep)
    }

    #[test]
    fn align_toy_value() {
        let (s, d) = toy_maps();
        let mut tape = Tape::new();
        let sv = tape.constant(s);
        let dv = tape.constant(d);
        let l = align_loss(&mut tape, sv, dv, 0.1).unwrap();
        assert!((scalar(&tape, l) - 0.2).abs() < 1e-12);
        let l = align_loss(&mut tape, sv, dv, 0.5).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);
        let l = align_loss(&mut tape, sv, sv, 0.0).unwrap();
        assert!(scalar(&tape, l).abs() < 1e-12);
    }

    #[test]
    fn align_detaches_shallow() {
        let (s, d) = toy_maps();
        let mut tape = Tape::new();
        let sv = tape.leaf(s.with_grad());
        let dv = tape.leaf(d.with_grad());
        let l = align_loss(&mut tape, sv, dv, 0.1).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(sv).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        assert!(tape.grad(dv).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn patches_group_aligned_blocks() {
        // One channel, 4x4 shallow onto 2x2 deep: unit 1 is the top-right 2x2 block.
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let p = shallow_patches(&mut tape, s, 2, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 4, 4]);
        assert_eq!(&tape.data(p)[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(shallow_patches(&mut tape, s, 3, 3).is_err());
    }

    #[test]
    fn fc_l1_by_hand() {
        let alloc = ClassAllocation::new(2, 1);
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(&[2, 2], vec![1.0, -0.5, -0.5, 1.0]).unwrap());
        let logits = tape.constant(Tensor::zeros(&[1, 2]));
        let obj = fc_convex_objective(&mut tape, logits, &[0], w, alloc).unwrap();
        assert!((scalar(&tape, obj) - (2f64.ln() + 1.0)).abs() < 1e-15);
    }
}
