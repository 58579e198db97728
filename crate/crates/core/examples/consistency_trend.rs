//! Consistency of every per-epoch checkpoint of one training run.
//!
//! ```bash
//! cargo run --release --example consistency_trend [-- epochs]
//! ```

mod support;

use partproto::metrics::{consistency_over_checkpoints, BoxSize, DEFAULT_BOX_RATIO};
use partproto::model::HeadKind;
use partproto::trainer;

fn main() -> partproto::Result<()> {
    let epochs = std::env::args().nth(1).map_or(6, |s| s.parse().expect("epochs must be an integer"));
    let data = support::small_dataset();
    let cfg =
        trainer::TrainConfig { epochs, warmup_epochs: epochs.min(2), ..support::short_config(HeadKind::Sa, true, 0) };
    let out = trainer::train(&data, &cfg)?;
    let size = BoxSize::from_ratio(data.image_size, DEFAULT_BOX_RATIO)?;
    let series = consistency_over_checkpoints(&out.checkpoints, data.test(), data.num_parts, 0.8, size)?;
    println!("epoch,consistency,test_acc");
    for (row, con) in out.log.iter().zip(&series) {
        println!("{},{con:.3},{:.3}", row.epoch, row.test_acc);
    }
    Ok(())
}
