#![allow(dead_code)]

use std::path::PathBuf;

use memshape::machine::load_machine;
use memshape::workload::load_model;
use memshape::{CnnModel, MachineConfig};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn model_path(name: &str) -> PathBuf {
    repo_root().join("models").join(format!("{name}.csv"))
}

pub fn machine_path() -> PathBuf {
    repo_root().join("machines/knl64.cfg")
}

pub fn model(name: &str) -> CnnModel {
    load_model(&model_path(name)).unwrap()
}

pub fn knl64() -> MachineConfig {
    load_machine(&machine_path()).unwrap()
}

pub const MODELS: [&str; 3] = ["resnet50", "googlenet", "vgg16"];
