//! Seeded training is reproducible, and resuming from a checkpoint continues
//! the same trajectory.

mod common;

use common::{tiny_config, toy_manifest};
use musa_core::checkpoint::Checkpoint;
use musa_core::data::Manifest;
use musa_core::trainer::{train, TrainOutputs};

fn run(steps: u64, resume: Option<&std::path::Path>, out: &std::path::Path) -> TrainOutputs {
    let mut c = tiny_config();
    c.training.total_steps = steps;
    let manifest = Manifest::load(&toy_manifest()).unwrap();
    train(c, &manifest, out, resume, |_| {}).unwrap().1
}

#[test]
fn same_seed_same_result() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = run(3, None, a.path());
    let ob = run(3, None, b.path());
    assert_eq!(std::fs::read(&oa.losses).unwrap(), std::fs::read(&ob.losses).unwrap());
    assert_eq!(std::fs::read(&oa.checkpoint).unwrap(), std::fs::read(&ob.checkpoint).unwrap());
    assert_eq!(std::fs::read(&oa.tokenizer).unwrap(), std::fs::read(&ob.tokenizer).unwrap());
}

#[test]
fn resume_continues_the_same_run() {
    let straight = tempfile::tempdir().unwrap();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let full = run(4, None, straight.path());
    let half = run(2, None, first.path());
    let rest = run(4, Some(&half.checkpoint), second.path());

    let a = Checkpoint::load(&full.checkpoint).unwrap();
    let b = Checkpoint::load(&rest.checkpoint).unwrap();
    assert_eq!(b.step, 4);
    assert_eq!(a.hash(), b.hash());
}
