//! Prototype bank and inner-product activation maps.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Block allocation of `classes × per_class` prototypes: prototype `j`
/// belongs to class `j / per_class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub classes: usize,
    pub per_class: usize,
}

impl ClassAllocation {
    pub fn new(classes: usize, per_class: usize) -> Self {
        Self { classes, per_class }
    }

    pub fn num_prototypes(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn class_of(&self, j: usize) -> usize {
        j / self.per_class
    }

    pub fn range(&self, class: usize) -> Range<usize> {
        class * self.per_class..(class + 1) * self.per_class
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[M, D]`.
    pub vectors: Tensor,
    pub allocation: ClassAllocation,
}

impl PrototypeBank {
    pub fn new(vectors: Tensor, allocation: ClassAllocation) -> Result<Self> {
        if vectors.ndim() != 2 || vectors.shape()[0] != allocation.num_prototypes() {
            return Err(Error::shape(format!(
                "prototype matrix {:?} for {} prototypes",
                vectors.shape(),
                allocation.num_prototypes()
            )));
        }
        Ok(Self { vectors, allocation })
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[j * d..(j + 1) * d]
    }
}

/// Activation maps and values of every prototype on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    /// `[M, H, W]`.
    pub maps: Tensor,
    /// Maximum of each map.
    pub values: Vec<f64>,
    /// `(row, col)` attaining each maximum; lowest row-major index on ties.
    pub argmax: Vec<(usize, usize)>,
}

impl ActivationRecord {
    pub fn map(&self, j: usize) -> &[f64] {
        let (h, w) = (self.maps.shape()[1], self.maps.shape()[2]);
        &self.maps.data()[j * h * w..(j + 1) * h * w]
    }
}

/// Inner product of every prototype with every unit of `deep[D, H, W]`.
pub fn prototype_activations(deep: &Tensor, bank: &PrototypeBank) -> Result<ActivationRecord> {
    let [d, h, w] = deep.shape() else {
        return Err(Error::shape(format!("deep features must be [D,H,W], got {:?}", deep.shape())));
    };
    let (d, h, w) = (*d, *h, *w);
    if d != bank.dim() {
        return Err(Error::shape(format!("features have {d} channels, prototypes {}", bank.dim())));
    }
    let mut tape = Tape::new();
    let z = tape.constant(deep.reshape(&[1, d, h, w])?);
    let p = tape.constant(bank.vectors.clone());
    let sims = unit_similarities(&mut tape, z, p)?;
    let g = tape.max_dim(sims, 1)?;
    let values = tape.data(g).to_vec();
    let argmax = tape.argmax_of(g).expect("max_dim records argmax").iter().map(|&u| (u / w, u % w)).collect();
    let maps = tape.permute(sims, &[0, 2, 1])?;
    let m = bank.allocation.num_prototypes();
    Ok(ActivationRecord { maps: tape.value(maps).reshape(&[m, h, w])?, values, argmax })
}

/// `deep[B, D, H, W]`, `prototypes[M, D]` -> similarities `[B, H·W, M]`.
pub fn unit_similarities(tape: &mut Tape, deep: Var, prototypes: Var) -> Result<Var> {
    let [b, d, h, w] = *tape.shape(deep) else {
        return Err(Error::shape(format!("deep features must be [B,D,H,W], got {:?}", tape.shape(deep))));
    };
    let flat = tape.reshape(deep, &[b, d, h * w])?;
    let units = tape.permute(flat, &[0, 2, 1])?;
    let pt = tape.transpose(prototypes, 0, 1)?;
    tape.matmul(units, pt)
}

/// Activation maps `[B, M, H, W]` from [`unit_similarities`] output.
pub fn maps_from_similarities(tape: &mut Tape, sims: Var, h: usize, w: usize) -> Result<Var> {
    let [b, _, m] = *tape.shape(sims) else {
        return Err(Error::shape("similarities must be [B, HW, M]"));
    };
    let t = tape.permute(sims, &[0, 2, 1])?;
    tape.reshape(t, &[b, m, h, w])
}
