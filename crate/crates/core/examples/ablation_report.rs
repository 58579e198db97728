//! Train the three ablation variants over a few seeds and print the table
//! the `report` subcommand produces.
//!
//! ```bash
//! cargo run --release --example ablation_report [-- seeds]
//! ```

mod support;

use partproto::cli::{benchmark_table, table_text};
use partproto::metrics::{evaluate, MetricsConfig, Noise};
use partproto::model::HeadKind;

fn main() -> partproto::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(2, |s| s.parse().expect("seed count must be an integer"));
    let data = support::small_dataset();
    // Gaussian noise only; PGD is the slow part of an evaluation.
    let cfg = MetricsConfig { noises: vec![Noise::Gauss { sigma: 0.2 }], ..MetricsConfig::default() };
    let mut reports = Vec::new();
    for seed in 0..seeds {
        for (head, sdfa) in [(HeadKind::Fc, false), (HeadKind::Sa, false), (HeadKind::Sa, true)] {
            let model = support::train_short(&data, head, sdfa, seed).model;
            reports.push(evaluate(&model, &data, &cfg)?);
        }
    }
    print!("{}", table_text(&benchmark_table(&reports)));
    Ok(())
}
