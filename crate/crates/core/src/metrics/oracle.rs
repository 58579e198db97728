//! A hand-built "perfect" prototype network for sanity-checking the metrics.

use crate::error::{Error, Result};
use crate::metrics::PrototypeNetwork;
use crate::model::ClassAllocation;
use crate::numerics::{Tape, Tensor, Var};
use crate::synthdata::{AnnotatedImage, Point};

/// Recognizes the images it was built from (nearest neighbour in normalized
/// pixel space) and lights up, for prototype `n` of each class, the feature
/// grid cell holding part `n mod C` of the recognized image.
///
/// A small input-dependent term (`jitter` times the mean input of each cell)
/// keeps the maps sensitive to noise without moving the peak cell.
#[derive(Clone, Debug)]
pub struct AnnotationOracle {
    allocation: ClassAllocation,
    grid: usize,
    image_size: usize,
    num_parts: usize,
    jitter: f64,
    known: Vec<(Vec<f64>, Vec<Option<Point>>)>,
}

impl AnnotationOracle {
    pub fn new(
        images: &[AnnotatedImage],
        allocation: ClassAllocation,
        num_parts: usize,
        grid: usize,
        jitter: f64,
    ) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::InvalidConfig("oracle needs images".into()))?;
        let image_size = first.height();
        if grid == 0 || image_size % grid != 0 || num_parts == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {grid} must divide image size {image_size}; {num_parts} parts"
            )));
        }
        let known = images
            .iter()
            .map(|im| {
                let mut locs = vec![None; num_parts];
                for p in im.parts.iter().filter(|p| p.id < num_parts) {
                    locs[p.id] = p.location;
                }
                (im.normalized().data().to_vec(), locs)
            })
            .collect();
        Ok(Self { allocation, grid, image_size, num_parts, jitter, known })
    }

    fn nearest(&self, x: &[f64]) -> &[Option<Point>] {
        let d2 = |a: &[f64]| a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let mut best = (f64::INFINITY, 0);
        for (i, (px, _)) in self.known.iter().enumerate() {
            let d = d2(px);
            if d < best.0 {
                best = (d, i);
            }
        }
        &self.known[best.1].1
    }

    fn cell_means(&self, x: &[f64]) -> Vec<f64> {
        let (s, g) = (self.image_size, self.grid);
        let c = s / g;
        let mut sums = vec![0.0; g * g];
        for plane in x.chunks(s * s) {
            for (i, v) in plane.iter().enumerate() {
                sums[(i / s / c) * g + (i % s) / c] += v;
            }
        }
        let n = (x.len() / (s * s) * c * c) as f64;
        sums.iter().map(|v| v / n).collect()
    }
}

impl PrototypeNetwork for AnnotationOracle {
    fn allocation(&self) -> ClassAllocation {
        self.allocation
    }

    fn activation_maps(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        let s = self.image_size;
        if shape.len() != 4 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(format!("oracle expects [B, C, {s}, {s}], got {shape:?}")));
        }
        let (g, m, per) = (self.grid, self.allocation.num_prototypes(), self.allocation.per_class);
        let cell = s as f64 / g as f64;
        let mut out = Vec::with_capacity(shape[0] * m * g * g);
        for x in tape.data(input).chunks(shape[1] * s * s) {
            let locs = self.nearest(x);
            let base = self.cell_means(x);
            for j in 0..m {
                let mut map: Vec<f64> = base.iter().map(|v| self.jitter * v.tanh()).collect();
                if let Some(p) = locs[(j % per) % self.num_parts] {
                    let r = ((p.y / cell) as usize).min(g - 1);
                    let c = ((p.x / cell) as usize).min(g - 1);
                    map[r * g + c] += 1.0;
                }
                out.extend(map);
            }
        }
        Ok(tape.constant(Tensor::new(&[shape[0], m, g, g], out)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{PartAnnotation, Split};

    #[test]
    fn peak_sits_in_the_part_cell() {
        let img = AnnotatedImage {
            pixels: Tensor::full(&[3, 16, 16], 0.5),
            label: 0,
            parts: vec![PartAnnotation { id: 0, location: Some(Point::new(13.0, 2.0)) }],
            split: Split::Test,
        };
        let oracle = AnnotationOracle::new(std::slice::from_ref(&img), ClassAllocation::new(1, 1), 1, 4, 0.0).unwrap();
        let maps = oracle.maps(&img.normalized()).unwrap();
        let mut want = [0.0; 16];
        want[3] = 1.0;
        assert_eq!(maps.data(), &want[..]);
    }
}
