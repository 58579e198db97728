//! Attack one test image's prototype activation maps with PGD and compare the
//! corresponding parts before and after, next to Gaussian noise.
//!
//! ```bash
//! cargo run --release --example pgd_attack [-- model.ckpt dataset-dir]
//! ```

mod support;

use partproto::metrics::{
    attack_objective, gaussian_perturb, own_class_parts, pgd_perturb, BoxSize, PgdConfig, PrototypeNetwork,
    DEFAULT_BOX_RATIO,
};
use partproto::model::HeadKind;
use partproto::numerics::argmax_slice;

fn main() -> partproto::Result<()> {
    let (model, data) = support::model_and_data(HeadKind::Sa, true);
    let image = &data.test()[0];
    let clean = image.normalized();
    let size = BoxSize::from_ratio(data.image_size, DEFAULT_BOX_RATIO)?;

    let pgd = PgdConfig::default();
    let attacked = pgd_perturb(&model, &clean, image.label, &pgd, 0)?;
    let noisy = gaussian_perturb(&clean, 0.2, 0)?;
    let linf = attacked.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("PGD eps {} alpha {} steps {}: max |delta| = {linf:.4}", pgd.eps, pgd.alpha, pgd.steps);
    println!(
        "map distance to clean: gaussian {:.4}, pgd {:.4}",
        attack_objective(&model, &clean, &noisy, image.label)?,
        attack_objective(&model, &clean, &attacked, image.label)?
    );

    let show = |v: &[bool]| v.iter().map(|&b| if b { '1' } else { '.' }).collect::<String>();
    let before = own_class_parts(&model, &clean, image, data.num_parts, size)?;
    let gauss = own_class_parts(&model, &noisy, image, data.num_parts, size)?;
    let after = own_class_parts(&model, &attacked, image, data.num_parts, size)?;
    println!("class {} prototypes: parts in box (clean | gaussian | pgd)", image.label);
    let maps = model.maps(&clean)?;
    let hw = maps.shape()[1] * maps.shape()[2];
    for (n, ((b, g), a)) in before.iter().zip(&gauss).zip(&after).enumerate() {
        let j = model.allocation().range(image.label).start + n;
        let peak = argmax_slice(&maps.data()[j * hw..(j + 1) * hw]).unwrap_or(0);
        let mark = if b == a { "" } else { "  <- moved" };
        println!("  {j:>2} (peak unit {peak:>2}): {} | {} | {}{mark}", show(b), show(g), show(a));
    }
    Ok(())
}
