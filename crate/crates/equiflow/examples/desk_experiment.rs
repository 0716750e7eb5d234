//! A desk-scale version of the digit experiment: three ensembles (one
//! with the symmetric support, two with the asymmetric support that
//! differ only in initialization) trained with randomly augmented SGD,
//! then scored with the orbit-same-prediction and symmetric-KL metrics.
//!
//! Run: `cargo run --release --example desk_experiment -- [members] [epochs]`
//! Data: reads the IDX files under `data/mnist` (or `EQUIFLOW_DATA_DIR`).

use std::path::PathBuf;
use std::sync::Arc;

use equiflow::config::Model;
use equiflow::data::{load_mnist_idx, Split};
use equiflow::ensemble::{evaluate, train_ensemble};
use equiflow::network::{NetworkSpec, Targets, LossKind};
use equiflow::tensor::Batch;
use equiflow::training::{DType, TrainConfig, TrainMode};

fn main() -> equiflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let members: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);

    let root = std::env::var("EQUIFLOW_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data/mnist"));
    let train = load_mnist_idx(&root, Split::Train)?.subset_stratified(2000, 100)?;
    let test = load_mnist_idx(&root, Split::Test)?.subset_stratified(1000, 100)?;
    eprintln!("train {} / test {} samples", train.len(), test.len());

    let cfg = TrainConfig {
        mode: TrainMode::RandomAugmentSgd,
        learning_rate: 0.01,
        batch_size: 32,
        epochs,
        seed: 7,
        dtype: DType::F32,
    };
    let images: Batch<f32> = train.images.clone();
    let targets: Targets<f32> = train.targets();

    println!("{:<16} {:>8} {:>12}", "model", "osp", "log10_kl");
    for model in [Model::Sym, Model::AsymInvariant, Model::AsymNaive] {
        let spec = Arc::new(NetworkSpec::mnist_c4(model.support(3)?, 16)?);
        let (ens, _) = train_ensemble(
            &spec,
            &cfg,
            &images,
            &targets,
            LossKind::CrossEntropy,
            model.init(),
            members,
            false,
            None,
        )?;
        let r = evaluate(&ens, &test.images)?;
        println!("{:<16} {:>8.4} {:>12.4}", model.name(), r.osp, r.sym_kl_log10);
    }
    Ok(())
}
