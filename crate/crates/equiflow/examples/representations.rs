//! Builds the built-in group representations and prints their law
//! residuals: homomorphism and unitarity over all element pairs.
//!
//! Run: `cargo run --release --example representations`

use equiflow::group::{homomorphism_residual, unitarity_residual, FiniteGroup, UnitaryRep};

fn main() -> equiflow::Result<()> {
    let c4 = FiniteGroup::cyclic(4)?;

    let reps: Vec<(&str, UnitaryRep)> = vec![
        ("trivial on R^10", UnitaryRep::trivial(c4.clone(), 10)),
        ("rotation on 2x8x8 stacks", UnitaryRep::rotation(c4.clone(), 2, 8, 8)?),
        ("channel shift on R^4", UnitaryRep::channel_shift(c4.clone(), 4, 1, 1)?),
        (
            "shift (x) rotation on 4x3x3 stacks",
            UnitaryRep::product(
                UnitaryRep::channel_shift(c4.clone(), 4, 1, 1)?,
                UnitaryRep::rotation(c4.clone(), 4, 3, 3)?,
            )?,
        ),
    ];

    println!("{:<36} {:>14} {:>14}", "representation", "homomorphism", "unitarity");
    for (name, rep) in &reps {
        println!(
            "{:<36} {:>14.3e} {:>14.3e}",
            name,
            homomorphism_residual(rep)?,
            unitarity_residual(rep)?
        );
    }

    // the fixed orientation convention on a 2x2 image
    let rot = UnitaryRep::rotation(c4, 1, 2, 2)?;
    let x = [1.0, 2.0, 3.0, 4.0];
    let mut out = [0.0; 4];
    rot.apply(1, &x, &mut out);
    println!("\none quarter turn of [[1,2],[3,4]] -> [[{},{}],[{},{}]]", out[0], out[1], out[2], out[3]);
    Ok(())
}
