//! The two-parameter picture: an ensemble of linear models trained on the
//! reflection-symmetric toy set. Individual members wander off the axis of
//! symmetric models, but a mirrored-pair initialization keeps the ensemble
//! mean on it for the whole run.
//!
//! Run: `cargo run --release --example toy2d`

use equiflow::config::toy_c2_network;
use equiflow::data::make_c2_toy;
use equiflow::network::{ParamPoint, Targets, LossKind};
use equiflow::rng::{Purpose, Stream};
use equiflow::tensor::Batch;
use equiflow::training::step_full_gd;

fn main() -> equiflow::Result<()> {
    let spec = toy_c2_network()?;
    let ds = make_c2_toy(256, 5);
    let images: Batch<f64> = ds.images.cast();
    let targets: Targets<f64> = ds.targets();

    let mut points = Vec::new();
    for m in 0..6u64 {
        let mut s = Stream::new(21, m, Purpose::Init);
        let (w1, w2) = (s.next_gaussian(), s.next_gaussian());
        points.push(ParamPoint::from_coords(&spec.space, vec![w1, w2]));
        points.push(ParamPoint::from_coords(&spec.space, vec![w1, -w2]));
    }

    println!("t,member,w1,w2");
    for t in 0..=40 {
        let mut mean = [0.0f64; 2];
        for (mi, p) in points.iter().enumerate() {
            if t % 10 == 0 {
                println!("{t},{mi},{:.6},{:.6}", p.coords[0], p.coords[1]);
            }
            mean[0] += p.coords[0];
            mean[1] += p.coords[1];
        }
        mean[0] /= points.len() as f64;
        mean[1] /= points.len() as f64;
        if t % 10 == 0 {
            println!("{t},mean,{:.6},{:.2e}", mean[0], mean[1]);
        }
        if t == 40 {
            break;
        }
        for p in points.iter_mut() {
            *p = step_full_gd(&spec, p, &images, &targets, LossKind::SquaredError, 0.1)?;
        }
    }
    Ok(())
}
