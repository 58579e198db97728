#![allow(dead_code)]

use partproto::metrics::{Noise, PrototypeNetwork};
use partproto::model::{HeadKind, ModelConfig, ProtoNet};
use partproto::synthdata::{AnnotatedImage, PartAnnotation, Point, Split};
use partproto::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(classes: usize, per_class: usize, head: HeadKind) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        num_classes: classes,
        protos_per_class: per_class,
        proto_dim: 4,
        widths: [3, 4, 5],
        shallow_block: 1,
        head,
    }
}

/// Random pixels and random part points, some parts hidden.
pub fn random_images(
    rng: &mut ChaCha8Rng,
    classes: usize,
    per_class: usize,
    size: usize,
    parts: usize,
) -> Vec<AnnotatedImage> {
    (0..classes * per_class)
        .map(|i| AnnotatedImage {
            pixels: Tensor::from_fn(&[3, size, size], |_| rng.gen_range(0.0..1.0)),
            label: i % classes,
            parts: (0..parts)
                .map(|id| PartAnnotation {
                    id,
                    location: rng
                        .gen_bool(0.85)
                        .then(|| Point::new(rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64))),
                })
                .collect(),
            split: Split::Test,
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(rng: &mut ChaCha8Rng, classes: usize, per_class: usize, head: HeadKind) -> ProtoNet {
    ProtoNet::new(tiny_config(classes, per_class, head), rng.gen()).unwrap()
}

/// Brute-force re-derivation of part vectors and both scores.
pub mod oracle {
    use super::*;

    /// Upsampled value at output pixel `(r, c)`, computed from scratch.
    fn upsampled(map: &[f64], h: usize, w: usize, out: usize, r: usize, c: usize) -> f64 {
        let coord = |o: usize, n: usize| {
            let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = if i0 + 1 < n { i0 + 1 } else { i0 };
            let t = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, t)
        };
        let (y0, y1, ty) = coord(r, h);
        let (x0, x1, tx) = coord(c, w);
        let top = map[y0 * w + x0] + tx * (map[y0 * w + x1] - map[y0 * w + x0]);
        let bot = map[y1 * w + x0] + tx * (map[y1 * w + x1] - map[y1 * w + x0]);
        top + ty * (bot - top)
    }

    /// Part vector: all-pixels box membership around the first maximum.
    pub fn part_vector(
        map: &[f64],
        h: usize,
        w: usize,
        size: usize,
        side: usize,
        image: &AnnotatedImage,
        c: usize,
    ) -> Vec<bool> {
        let (mut br, mut bc, mut best) = (0, 0, f64::NEG_INFINITY);
        for r in 0..size {
            for col in 0..size {
                let v = upsampled(map, h, w, size, r, col);
                if v > best {
                    (br, bc, best) = (r, col, v);
                }
            }
        }
        let start_r = br as i64 - (side / 2) as i64;
        let start_c = bc as i64 - (side / 2) as i64;
        let mut inside = vec![vec![false; size]; size];
        for (r, row) in inside.iter_mut().enumerate() {
            for (col, cell) in row.iter_mut().enumerate() {
                let (r, col) = (r as i64, col as i64);
                *cell = r >= start_r && r < start_r + side as i64 && col >= start_c && col < start_c + side as i64;
            }
        }
        let mut o = vec![false; c];
        for p in &image.parts {
            if let Some(pt) = p.location {
                let (r, col) = (pt.y.floor() as usize, pt.x.floor() as usize);
                if r < size && col < size && inside[r][col] {
                    o[p.id] = true;
                }
            }
        }
        o
    }

    fn own_vectors<N: PrototypeNetwork>(
        model: &N,
        input: &Tensor,
        im: &AnnotatedImage,
        c: usize,
        side: usize,
    ) -> Vec<Vec<bool>> {
        let maps = model.maps(input).unwrap();
        let (h, w) = (maps.shape()[1], maps.shape()[2]);
        let size = im.height();
        let alloc = model.allocation();
        (0..alloc.num_prototypes())
            .filter(|&j| alloc.class_of(j) == im.label)
            .map(|j| part_vector(&maps.data()[j * h * w..(j + 1) * h * w], h, w, size, side, im, c))
            .collect()
    }

    /// `S_con` over prototypes whose class has images.
    pub fn consistency<N: PrototypeNetwork>(
        model: &N,
        images: &[AnnotatedImage],
        c: usize,
        mu: f64,
        side: usize,
    ) -> f64 {
        let alloc = model.allocation();
        let (mut consistent, mut defined) = (0usize, 0usize);
        for k in 0..alloc.classes {
            let class_images: Vec<&AnnotatedImage> = images.iter().filter(|im| im.label == k).collect();
            if class_images.is_empty() {
                continue;
            }
            let vectors: Vec<Vec<Vec<bool>>> =
                class_images.iter().map(|im| own_vectors(model, &im.normalized(), im, c, side)).collect();
            for n in 0..alloc.per_class {
                defined += 1;
                let best = (0..c)
                    .map(|i| vectors.iter().filter(|v| v[n][i]).count() as f64 / vectors.len() as f64)
                    .fold(0.0, f64::max);
                if best >= mu {
                    consistent += 1;
                }
            }
        }
        consistent as f64 / defined as f64
    }

    /// `S_sta` for `noise`, re-using the library only to draw the perturbed input.
    pub fn stability<N: PrototypeNetwork>(
        model: &N,
        images: &[AnnotatedImage],
        c: usize,
        noise: &Noise,
        seed: u64,
        side: usize,
    ) -> f64 {
        let alloc = model.allocation();
        let mut same = vec![0usize; alloc.num_prototypes()];
        let mut count = vec![0usize; alloc.classes];
        for (i, im) in images.iter().enumerate() {
            count[im.label] += 1;
            let clean = own_vectors(model, &im.normalized(), im, c, side);
            let x = partproto::metrics::perturbed_input(model, im, noise, seed, i).unwrap();
            let noisy = own_vectors(model, &x, im, c, side);
            for n in 0..alloc.per_class {
                if clean[n] == noisy[n] {
                    same[im.label * alloc.per_class + n] += 1;
                }
            }
        }
        let rates: Vec<f64> = (0..alloc.num_prototypes())
            .filter(|&j| count[alloc.class_of(j)] > 0)
            .map(|j| same[j] as f64 / count[alloc.class_of(j)] as f64)
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// Engine vs oracle on one randomized fixture (M ≤ 6, ≤ 10 images per class, C ≤ 4).
pub fn oracle_fixture(seed: u64) -> Result<(f64, f64), String> {
    use partproto::metrics::{consistency_score, stability_score, BoxSize};
    let mut r = rng(seed);
    let classes = r.gen_range(2..=3);
    let per_class = r.gen_range(1..=2);
    let parts = r.gen_range(2..=4);
    let model = random_model(&mut r, classes, per_class, HeadKind::Sa);
    let per_image_class = r.gen_range(1..=10);
    let mut images = random_images(&mut r, classes, per_image_class, 16, parts);
    // Sometimes leave a class without images.
    if r.gen_bool(0.2) {
        images.retain(|im| im.label != 0);
    }
    let mu = [0.0, 0.5, 0.8, 1.0, r.gen_range(0.0..1.0)][r.gen_range(0..5)];
    let size = BoxSize::from_ratio(16, r.gen_range(0.1..0.7)).unwrap();
    let noise = Noise::Gauss { sigma: r.gen_range(0.0..0.5) };
    let noise_seed: u64 = r.gen();

    let engine = consistency_score(&model, &images, parts, mu, size).map_err(|e| e.to_string())?.score;
    let brute = oracle::consistency(&model, &images, parts, mu, size.height);
    if engine != brute {
        return Err(format!("fixture {seed}: consistency {engine} vs oracle {brute}"));
    }
    let con = engine;
    let engine = stability_score(&model, &images, parts, noise, size, noise_seed).map_err(|e| e.to_string())?.score;
    let brute = oracle::stability(&model, &images, parts, &noise, noise_seed, size.height);
    if engine != brute {
        return Err(format!("fixture {seed}: stability {engine} vs oracle {brute}"));
    }
    Ok((con, engine))
}

/// Autodiff against central finite differences.
pub mod fd {
    use partproto::model::{Bound, Forward, HeadKind, ProtoNet};
    use partproto::{Tape, Tensor, Var};
    use rand::Rng;

    pub type Build = fn(&mut Tape, &ProtoNet, &Bound, &Forward, &[usize]) -> Var;

    /// Loss value; with `shallow` given, the shallow map is replaced by that
    /// constant, which is what the alignment loss's detachment means.
    fn loss_value(
        model: &ProtoNet,
        input: &Tensor,
        labels: &[usize],
        build: Build,
        shallow: Option<&Tensor>,
    ) -> (f64, Tape, Tensor) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| true);
        let x = tape.constant(input.clone());
        let mut fwd = model.forward(&mut tape, &bound, x).unwrap();
        let base_shallow = tape.value(fwd.shallow).clone();
        if let Some(s) = shallow {
            fwd.shallow = tape.constant(s.clone());
        }
        let loss = build(&mut tape, model, &bound, &fwd, labels);
        let v = tape.data(loss)[0];
        tape.backward(loss).unwrap();
        (v, tape, base_shallow)
    }

    /// Relative error between autodiff and central differences over sampled coordinates.
    pub fn check(seed: u64, head: HeadKind, build: Build) -> f64 {
        let mut rng = super::rng(seed);
        let model = super::random_model(&mut rng, 3, 2, head);
        let input = Tensor::from_fn(&[3, 3, 16, 16], |_| rng.gen_range(-2.0..2.0));
        let labels = [0, 2, 1];
        let (_, tape, shallow) = loss_value(&model, &input, &labels, build, None);
        let grads: Vec<(usize, Vec<f64>)> = tape.param_grads().map(|(k, g)| (k, g.to_vec())).collect();

        let h = 1e-5;
        let (mut diff2, mut norm2) = (0.0f64, 0.0f64);
        for (slot, g) in grads {
            for _ in 0..6 {
                let i = rng.gen_range(0..g.len());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[slot].tensor.data_mut()[i] += delta;
                    loss_value(&m, &input, &labels, build, Some(&shallow)).0
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                diff2 += (numeric - g[i]).powi(2);
                norm2 += numeric.powi(2).max(g[i].powi(2));
            }
        }
        assert!(norm2 > 0.0, "loss has no gradient at all");
        (diff2 / norm2).sqrt()
    }

    /// Every training loss: cross-entropy, cluster, separation,
    /// orthogonality, alignment and the weighted total.
    pub fn losses() -> Vec<(&'static str, Build)> {
        use partproto::losses::{self, LossWeights};
        vec![
            ("ce", |t, _, _, f, y| losses::cross_entropy(t, f.logits, y).unwrap()),
            ("cluster", |t, m, _, f, y| losses::cluster_loss(t, f.activations, y, m.allocation()).unwrap()),
            ("separation", |t, m, _, f, y| losses::separation_loss(t, f.activations, y, m.allocation()).unwrap()),
            ("ortho", |t, m, b, _, _| losses::ortho_loss(t, b.prototypes(), m.allocation()).unwrap()),
            ("align", |t, _, _, f, _| losses::align_loss(t, f.shallow, f.deep, 0.02).unwrap()),
            ("total", |t, m, b, f, y| {
                let w = LossWeights { gamma: 0.02, ..LossWeights::default() };
                losses::total_loss(t, f, b.prototypes(), y, m.allocation(), &w).unwrap().total
            }),
        ]
    }

    /// Worst relative error of `loss` over the fixed seed/head grid.
    pub fn worst_error(build: Build) -> f64 {
        [(1, HeadKind::Sa), (2, HeadKind::Fc), (3, HeadKind::Sa)]
            .into_iter()
            .map(|(seed, head)| check(seed, head, build))
            .fold(0.0, f64::max)
    }
}
