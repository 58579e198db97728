//! Shared setup for the examples: a small dataset and a short training run,
//! or a checkpoint and dataset given on the command line.

#![allow(dead_code)]

use std::path::Path;

use partproto::model::{HeadKind, ProtoNet};
use partproto::synthdata::{generate, Dataset, GeneratorConfig};
use partproto::trainer::{self, TrainConfig, TrainOutcome};

/// Four classes, small enough to train in well under a minute.
pub fn small_dataset() -> Dataset {
    let cfg = GeneratorConfig { classes: 4, train_per_class: 40, test_per_class: 10, ..GeneratorConfig::default() };
    generate(&cfg).expect("default generator settings are valid").dataset
}

pub fn short_config(head: HeadKind, sdfa: bool, seed: u64) -> TrainConfig {
    TrainConfig { epochs: 6, warmup_epochs: 2, head, sdfa, seed, ..TrainConfig::default() }
}

pub fn train_short(data: &Dataset, head: HeadKind, sdfa: bool, seed: u64) -> TrainOutcome {
    eprintln!("training {head:?} head, alignment {}, seed {seed} ...", if sdfa { "on" } else { "off" });
    trainer::train(data, &short_config(head, sdfa, seed)).expect("training failed")
}

/// `[checkpoint dataset-dir]` from the command line, or a fresh short run.
pub fn model_and_data(head: HeadKind, sdfa: bool) -> (ProtoNet, Dataset) {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.as_slice() {
        [ckpt, data, ..] => {
            let model = ProtoNet::load(Path::new(ckpt)).expect("cannot load checkpoint");
            let data = Dataset::load(&Path::new(data).join("manifest.json")).expect("cannot load dataset");
            (model, data)
        }
        _ => {
            let data = small_dataset();
            (train_short(&data, head, sdfa, 0).model, data)
        }
    }
}
