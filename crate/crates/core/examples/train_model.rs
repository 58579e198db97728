//! Train a prototype network on the default synthetic dataset.
//!
//! ```bash
//! cargo run --release --example train_model -- sa on 0 model.ckpt
//! ```
//!
//! Arguments: head (`sa` or `fc`), SDFA (`on` or `off`), seed, output path.

use partproto::model::HeadKind;
use partproto::synthdata::{generate, GeneratorConfig};
use partproto::trainer::{train_with_progress, TrainConfig, LOG_HEADER};

fn main() -> partproto::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let config = TrainConfig {
        head: if arg(0, "sa") == "fc" { HeadKind::Fc } else { HeadKind::Sa },
        sdfa: arg(1, "on") == "on",
        seed: arg(2, "0").parse().expect("seed must be an integer"),
        ..TrainConfig::default()
    };
    let data = generate(&GeneratorConfig::default())?.dataset;
    let start = std::time::Instant::now();
    println!("{LOG_HEADER},seconds");
    let out = train_with_progress(&data, &config, |r| {
        let l = &r.losses;
        println!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.0}",
            r.epoch,
            l.ce,
            l.clst,
            l.sep,
            l.ortho,
            l.align,
            r.test_acc,
            start.elapsed().as_secs_f64()
        );
    })?;
    let path = arg(3, "model.ckpt");
    out.model.save(std::path::Path::new(&path))?;
    println!("saved {path}");
    Ok(())
}
