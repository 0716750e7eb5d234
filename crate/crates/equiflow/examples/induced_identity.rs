//! Evaluates the forward identity `Phi_A(rho_in(g) x) = rho_out(g)
//! Phi_{lift(g^-1) A}(x)` on the experiment architecture with random
//! parameters, inputs, and elements. The identity is exact mathematics,
//! so the residual is floating-point noise.
//!
//! Run: `cargo run --release --example induced_identity`

use equiflow::network::{check_induced_identity, NetworkSpec};
use equiflow::paramspace::FilterSupport;

fn main() -> equiflow::Result<()> {
    for (name, support) in [
        ("sym3x3", FilterSupport::sym_3x3()),
        ("asym3x3", FilterSupport::asym_3x3()),
    ] {
        let spec = NetworkSpec::mnist_c4(support, 16)?;
        let rep = spec.rotation_lifted_rep()?;
        let res = check_induced_identity(&spec, &rep, 25, 2)?;
        println!("mnist_c4 {name:<8} residual over 25 trials: {res:.3e}");
    }
    Ok(())
}
