//! Consistency, stability, accuracy and the ablation diagnostics of one model.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics                 # short run on a small dataset
//! cargo run --release --example evaluate_metrics -- model.ckpt /tmp/creatures
//! ```

mod support;

use partproto::metrics::{evaluate, MetricsConfig};
use partproto::model::HeadKind;

fn main() -> partproto::Result<()> {
    let (model, data) = support::model_and_data(HeadKind::Sa, true);
    let report = evaluate(&model, &data, &MetricsConfig::default())?;

    println!("{} on {} test images", report.method.as_deref().unwrap_or("model"), report.images);
    println!("  consistency  {:.3}  (mu = {})", report.consistency.score, report.consistency.mu);
    for s in &report.stability {
        println!("  stability    {:.3}  ({:?})", s.score, s.noise);
    }
    println!("  accuracy     {:.3}", report.accuracy);
    println!("  shallow/deep structure similarity {:.3}", report.sdfa_similarity);
    println!("  prototypes with a similar other-class prototype: {:.2} on average", report.cross_class.mean);

    // Which part each prototype keeps landing on, for the first class.
    let alloc = model.allocation();
    for j in alloc.range(0) {
        if let Some(avg) = &report.consistency.averaged_parts[j] {
            let (part, share) = avg.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            println!("  prototype {j:>2}: part {part} in {:>3.0}% of class-0 images", 100.0 * share);
        }
    }
    println!("\n{}\n{}", partproto::metrics::MetricsReport::csv_header(), report.csv_row());
    Ok(())
}
