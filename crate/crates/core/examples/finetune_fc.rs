//! Fine-tune the last layer of a fully connected head with the sparse
//! off-class objective and watch the on-class weights.
//!
//! ```bash
//! cargo run --release --example finetune_fc [-- fc-model.ckpt dataset-dir]
//! ```

mod support;

use partproto::model::HeadKind;
use partproto::trainer::{accuracy, finetune_fc_last_layer};

fn main() -> partproto::Result<()> {
    let (model, data) = support::model_and_data(HeadKind::Fc, false);
    let alloc = model.allocation();
    let before = model.fc_head().expect("this example needs an FC-head model");
    let out = finetune_fc_last_layer(&model, &data, 300)?;
    let after = out.model.fc_head().expect("fine-tuning keeps the head");

    for (step, v) in out.objective.iter().enumerate().filter(|(i, _)| i % 50 == 0) {
        println!("step {step:>3}: objective {v:.5}");
    }
    println!("objective {:.5} -> {:.5}", out.objective[0], out.objective.last().unwrap());
    println!("off-class L1       {:.3} -> {:.3}", before.off_class_l1(alloc), after.off_class_l1(alloc));
    println!(
        "negative on-class  {} -> {} of {}",
        before.negative_on_class(alloc),
        after.negative_on_class(alloc),
        alloc.num_prototypes()
    );
    println!("test accuracy      {:.3} -> {:.3}", accuracy(&model, data.test())?, accuracy(&out.model, data.test())?);
    Ok(())
}
