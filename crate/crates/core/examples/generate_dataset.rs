//! Render the default synthetic dataset to disk and print a summary.
//!
//! ```bash
//! cargo run --release --example generate_dataset -- /tmp/creatures
//! ```

use partproto::synthdata::{generate, Dataset, GeneratorConfig, Split, PART_NAMES};

fn main() -> partproto::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "creatures".into());
    let out = std::path::Path::new(&out);
    let config = GeneratorConfig::default();
    let generated = generate(&config)?;
    let manifest = generated.write(out)?;
    println!(
        "wrote {} classes x {} parts, {} train / {} test images to {}",
        manifest.classes,
        manifest.parts,
        generated.dataset.train().len(),
        generated.dataset.test().len(),
        out.display()
    );

    let loaded = Dataset::load(&out.join("manifest.json"))?;
    assert!(loaded == generated.dataset, "reloaded dataset differs from the generated one");

    let mut hidden = vec![0usize; config.parts];
    for img in loaded.test() {
        for p in img.parts.iter().filter(|p| !p.visible()) {
            hidden[p.id] += 1;
        }
    }
    for (id, n) in hidden.iter().enumerate() {
        println!("  {:>5}: occluded in {n} of {} test images", PART_NAMES[id], loaded.test().len());
    }
    for k in 0..config.classes {
        println!("  class {k}: {} test images", loaded.class_indices(Split::Test, k).len());
    }
    Ok(())
}
