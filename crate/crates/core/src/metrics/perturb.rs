//! Input perturbations for the stability score.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PrototypeNetwork;
use crate::numerics::{Tape, Tensor};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl PgdConfig {
    /// Step `eps / 4`, ten iterations.
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, alpha: eps / 4.0, steps: 10 }
    }
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self::with_eps(0.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Noise {
    Gauss { sigma: f64 },
    Pgd(PgdConfig),
}

impl Noise {
    pub fn name(&self) -> &'static str {
        match self {
            Noise::Gauss { .. } => "gauss",
            Noise::Pgd(_) => "pgd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Noise::Gauss { sigma } => sigma.is_finite() && *sigma >= 0.0,
            Noise::Pgd(p) => p.eps.is_finite() && p.eps >= 0.0 && p.alpha.is_finite() && p.alpha >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid noise {self:?}")))
        }
    }
}

/// `image + ξ`, `ξ ~ N(0, σ²)` i.i.d. per entry, no clamping.
pub fn gaussian_perturb(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(format!("sigma {sigma}: {e}")))?;
    let mut rng = rng::stream(seed, streams::GAUSSIAN);
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(out)
}

/// Own-class attack objective `Σ_{c(j)=label} ‖v_j(x) − v_j(clean)‖²`.
pub fn attack_objective<N: PrototypeNetwork + ?Sized>(
    model: &N,
    clean: &Tensor,
    image: &Tensor,
    label: usize,
) -> Result<f64> {
    let a = model.maps(clean)?;
    let b = model.maps(image)?;
    let m = model.allocation().num_prototypes();
    let per = a.numel() / m;
    let r = model.allocation().range(label);
    Ok(a.data()[r.start * per..r.end * per]
        .iter()
        .zip(&b.data()[r.start * per..r.end * per])
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Sign-gradient ascent on [`attack_objective`] within the L∞ ball of radius
/// `eps` around `image`, starting from a uniform random point in the ball.
pub fn pgd_perturb<N: PrototypeNetwork + ?Sized>(
    model: &N,
    image: &Tensor,
    label: usize,
    cfg: &PgdConfig,
    seed: u64,
) -> Result<Tensor> {
    let alloc = model.allocation();
    if label >= alloc.classes {
        return Err(Error::shape(format!("label {label} >= {} classes", alloc.classes)));
    }
    let clean = model.maps(image)?;
    let m = alloc.num_prototypes();
    let own = alloc.range(label);
    let mask = Tensor::from_fn(&[m, 1, 1], |j| if own.contains(&j) { 1.0 } else { 0.0 });
    let batched = image.reshape(&[1, 3, image.shape()[1], image.shape()[2]])?;
    let clean4 = clean.reshape(&[1, m, clean.shape()[1], clean.shape()[2]])?;

    let mut rng = rng::stream(seed, streams::PGD);
    let mut adv: Vec<f64> =
        batched.data().iter().map(|&v| if cfg.eps > 0.0 { v + rng.gen_range(-cfg.eps..=cfg.eps) } else { v }).collect();
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(batched.shape(), adv.clone())?.with_grad());
        let maps = model.activation_maps(&mut tape, x)?;
        let c = tape.constant(clean4.clone());
        let diff = tape.sub(maps, c)?;
        let sq = tape.square(diff);
        let mk = tape.constant(mask.clone());
        let masked = tape.mul(sq, mk)?;
        let obj = tape.sum(masked);
        tape.backward(obj)?;
        let grad = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; adv.len()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, what: "attack gradient".into() });
        }
        for ((a, g), &x0) in adv.iter_mut().zip(&grad).zip(batched.data()) {
            let s = if *g > 0.0 {
                1.0
            } else if *g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *a = (*a + cfg.alpha * s).clamp(x0 - cfg.eps, x0 + cfg.eps);
        }
    }
    Tensor::new(image.shape(), adv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let img = Tensor::from_fn(&[3, 4, 4], |i| i as f64);
        assert_eq!(gaussian_perturb(&img, 0.0, 5).unwrap(), img);
    }

    #[test]
    fn same_seed_same_noise() {
        let img = Tensor::zeros(&[3, 4, 4]);
        let a = gaussian_perturb(&img, 0.2, 5).unwrap();
        assert_eq!(a, gaussian_perturb(&img, 0.2, 5).unwrap());
        assert_ne!(a, gaussian_perturb(&img, 0.2, 6).unwrap());
    }

    #[test]
    fn noise_moments() {
        let n = 1_000_000;
        let img = Tensor::zeros(&[n]);
        let sigma = 0.2;
        let xi = gaussian_perturb(&img, sigma, 11).unwrap();
        let mean = xi.data().iter().sum::<f64>() / n as f64;
        let var = xi.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 * sigma / 1000.0, "mean {mean}");
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }
}
