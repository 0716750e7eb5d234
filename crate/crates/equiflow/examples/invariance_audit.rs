//! Audits the built-in filter supports for invariance of the architecture
//! space under rotations, and shows that the invariance verdict and the
//! projection-equivariance verdict always agree.
//!
//! Run: `cargo run --release --example invariance_audit`

use equiflow::group::FiniteGroup;
use equiflow::paramspace::{
    appendix_escape_check, check_g_invariance, check_projection_equivariance, AffineSpace,
    FilterSupport, LayerSpec, LiftedRep, Padding,
};

fn main() -> equiflow::Result<()> {
    let group = FiniteGroup::cyclic(4)?;
    println!(
        "{:<10} {:>16} {:>16}  {}",
        "support", "invariance", "projection", "verdict"
    );
    for (name, support) in [
        ("sym3x3", FilterSupport::sym_3x3()),
        ("asym3x3", FilterSupport::asym_3x3()),
        ("sym5x5", FilterSupport::sym_5x5()),
        ("asym5x5", FilterSupport::asym_5x5()),
    ] {
        let space = AffineSpace::new(vec![LayerSpec::conv(
            1,
            2,
            8,
            8,
            support.clone(),
            Padding::Circular,
        )?])?;
        let rep = LiftedRep::rotation_stack(&group, space.layers(), false)?;
        let inv = check_g_invariance(&space, &rep)?;
        let proj = check_projection_equivariance(&space, &rep, 3, 1)?;
        println!(
            "{:<10} {:>16.3e} {:>16.3e}  {}",
            name,
            inv.max_residual,
            proj,
            if inv.invariant { "invariant" } else { "not invariant" }
        );
    }

    // the transformed-support enumeration with an explicit witness
    let shift = equiflow::group::UnitaryRep::channel_shift(group, 4, 1, 1)?;
    let report = appendix_escape_check(&shift, &FilterSupport::asym_3x3())?;
    if let Some(w) = report.witness {
        println!(
            "\nescape witness: element {} moves the unit filter at {:?} (channel {}) to {:?}, outside the mask",
            w.element, w.basis_cell, w.basis_channel, w.escaped_cell
        );
    }
    Ok(())
}
