//! The exact coupled-run surrogate for equivariance in distribution of
//! SGD with random augmentation: a run from transported parameters with
//! left-composed group draws must track the transported original
//! trajectory on an invariant space, and visibly departs from it on a
//! non-invariant one.
//!
//! Run: `cargo run --release --example coupled_replay`

use equiflow::checks::{toy_conv_spec, toy_dataset};
use equiflow::network::LossKind;
use equiflow::paramspace::{FilterSupport, Padding};
use equiflow::training::{coupled_sgd_equivariance, InitKind};

fn main() -> equiflow::Result<()> {
    let (images, targets) = toy_dataset(24, 3);
    for (name, support, init) in [
        ("sym3x3", FilterSupport::sym_3x3(), InitKind::Invariant),
        ("asym3x3", FilterSupport::asym_3x3(), InitKind::InvariantAsym),
    ] {
        let spec = toy_conv_spec(support, Padding::Circular)?;
        let rep = spec.rotation_lifted_rep()?;
        let dev = coupled_sgd_equivariance(
            &spec,
            &rep,
            &images,
            &targets,
            LossKind::CrossEntropy,
            1,
            0.05,
            200,
            8,
            5,
            init,
        )?;
        println!("{name:<8} max deviation over 200 coupled SGD steps: {dev:.3e}");
    }
    Ok(())
}
