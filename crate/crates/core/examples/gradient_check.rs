//! Compare the tape's gradient of the full training loss with central finite
//! differences on a tiny random model.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use partproto::losses::{total_loss, LossWeights};
use partproto::model::{HeadKind, ModelConfig, ProtoNet};
use partproto::{Tape, Tensor};

fn loss(model: &ProtoNet, x: &Tensor, labels: &[usize], shallow: Option<&Tensor>) -> (f64, Tape, Tensor) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| true);
    let input = tape.constant(x.clone());
    let mut fwd = model.forward(&mut tape, &bound, input).expect("shapes match");
    let base = tape.value(fwd.shallow).clone();
    // The alignment loss treats the shallow map as a constant.
    if let Some(s) = shallow {
        fwd.shallow = tape.constant(s.clone());
    }
    let w = LossWeights { gamma: 0.02, ..LossWeights::default() };
    let terms = total_loss(&mut tape, &fwd, bound.prototypes(), labels, model.allocation(), &w).expect("valid loss");
    let v = tape.data(terms.total)[0];
    tape.backward(terms.total).expect("scalar loss");
    (v, tape, base)
}

fn main() {
    let cfg = ModelConfig {
        image_size: 16,
        num_classes: 3,
        protos_per_class: 2,
        proto_dim: 4,
        widths: [3, 4, 5],
        shallow_block: 1,
        head: HeadKind::Sa,
    };
    let model = ProtoNet::new(cfg, 5).expect("valid config");
    let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7919) % 113) as f64 / 28.0 - 2.0);
    let labels = [0, 2];
    let (value, tape, shallow) = loss(&model, &x, &labels, None);
    println!("total loss {value:.6}");

    let h = 1e-5;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for (slot, grad) in tape.param_grads() {
        // The coordinate with the largest gradient, so dead ReLUs don't hide anything.
        let i = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap_or(0);
        let eval = |d: f64| {
            let mut m = model.clone();
            m.params_mut()[slot].tensor.data_mut()[i] += d;
            loss(&m, &x, &labels, Some(&shallow)).0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        println!("{:<16} [{i:>3}]  tape {:+.8e}  finite diff {numeric:+.8e}", names[slot], grad[i]);
    }
}
