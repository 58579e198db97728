//! Every loss against central finite differences on small random models.

mod common;

use common::fd;

fn assert_close(name: &str) {
    let (_, build) = fd::losses().into_iter().find(|(n, _)| *n == name).unwrap();
    let err = fd::worst_error(build);
    assert!(err < 1e-4, "{name}: relative error {err:e}");
}

#[test]
fn cross_entropy_gradient() {
    assert_close("ce");
}

#[test]
fn cluster_gradient() {
    assert_close("cluster");
}

#[test]
fn separation_gradient() {
    assert_close("separation");
}

#[test]
fn orthogonality_gradient() {
    assert_close("ortho");
}

#[test]
fn alignment_gradient() {
    assert_close("align");
}

#[test]
fn total_loss_gradient() {
    assert_close("total");
}
