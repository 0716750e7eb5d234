//! Augmented risks, projected gradient descent in coordinates, invariant
//! initialization, and the trajectory-level symmetry tests.
//!
//! Descent always updates the coordinate vector c of A = base + L c, which
//! realizes the projected update in the ambient space because the basis is
//! orthonormal. Full augmentation averages the gradient over every group
//! element; random augmentation draws one element per sample per step.

use crate::error::{Error, Result};
use crate::network::{gradient, NetworkSpec, ParamPoint, Targets, LossKind};
use crate::paramspace::{lifted_apply, CoordinateInfo, FilterSupport, LayerKind, LiftedRep};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    FullAugmentGd,
    RandomAugmentSgd,
    NoAugmentSgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// How member coordinates are drawn at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Standard-normal coordinates. On an invariant space the induced
    /// ambient distribution is G-invariant.
    Invariant,
    /// Standard-normal coordinates on every mask cell of an asymmetric
    /// support; the induced distribution is not G-invariant.
    NaiveAsym,
    /// Standard-normal coordinates with the conv cells outside the
    /// support's rotation-orbit intersection set to zero, which restores
    /// invariance of the initial distribution.
    InvariantAsym,
}

/// Draws member coordinates. The zeroed cells of `InvariantAsym` are
/// computed from the mask and all of its rotations.
pub fn init_coords(spec: &NetworkSpec, kind: InitKind, stream: &mut Stream) -> Vec<f64> {
    let space = &spec.space;
    let mut coords = space.init_gaussian_coords(stream);
    if kind == InitKind::InvariantAsym {
        let intersections: Vec<Option<FilterSupport>> = space
            .layers()
            .iter()
            .map(|l| match &l.kind {
                LayerKind::Conv { support, .. } => Some(support.orbit_intersection()),
                LayerKind::Dense { .. } => None,
            })
            .collect();
        for (i, c) in coords.iter_mut().enumerate() {
            if let CoordinateInfo::ConvCell { layer, row, col, .. } = space.coordinate_cell(i) {
                if let Some(inter) = &intersections[layer] {
                    if !inter.contains(row, col) {
                        *c = 0.0;
                    }
                }
            }
        }
    }
    coords
}

pub fn init_param_point<F: Scalar>(spec: &NetworkSpec, kind: InitKind, stream: &mut Stream) -> ParamPoint<F> {
    let coords = init_coords(spec, kind, stream);
    ParamPoint::from_coords(&spec.space, coords.into_iter().map(F::from_f64).collect())
}

/// Applies the per-sample group draws to a batch: inputs through the input
/// representation, targets through the output representation (class labels
/// require a trivial output action and pass through unchanged).
pub fn augment_batch<F: Scalar>(
    spec: &NetworkSpec,
    images: &Batch<F>,
    targets: &Targets<F>,
    draws: &[usize],
) -> Result<(Batch<F>, Targets<F>)> {
    if draws.len() != images.n {
        return Err(Error::ShapeMismatch(format!(
            "{} draws for a batch of {}",
            draws.len(),
            images.n
        )));
    }
    let mut out = images.clone();
    for (i, &g) in draws.iter().enumerate() {
        spec.input_rep.apply(g, images.sample(i), out.sample_mut(i));
    }
    let targets = match targets {
        Targets::Classes(v) => {
            if !spec.output_rep.is_trivial_action() {
                return Err(Error::InvalidArgument(
                    "class labels need a trivial output action".into(),
                ));
            }
            Targets::Classes(v.clone())
        }
        Targets::Vectors { dim, data } => {
            let mut moved = vec![F::ZERO; data.len()];
            for (i, &g) in draws.iter().enumerate() {
                spec.output_rep
                    .apply(g, &data[i * dim..(i + 1) * dim], &mut moved[i * dim..(i + 1) * dim]);
            }
            Targets::Vectors { dim: *dim, data: moved }
        }
    };
    Ok((out, targets))
}

/// Where a batch's group draws came from, for exact replay.
#[derive(Clone, Debug)]
pub struct DrawProvenance {
    pub seed: u64,
    pub member: u64,
    pub counter_start: u64,
}

/// A minibatch with its group draws.
#[derive(Clone, Debug)]
pub struct AugmentedBatch<F> {
    pub images: Batch<F>,
    pub targets: Targets<F>,
    pub draws: Vec<usize>,
    pub provenance: Option<DrawProvenance>,
}

impl<F: Scalar> AugmentedBatch<F> {
    pub fn new(images: Batch<F>, targets: Targets<F>, draws: Vec<usize>) -> Result<Self> {
        if draws.len() != images.n {
            return Err(Error::ShapeMismatch("one draw per sample".into()));
        }
        Ok(AugmentedBatch {
            images,
            targets,
            draws,
            provenance: None,
        })
    }
}

/// Exact group-averaged risk over a finite sample set.
pub fn risk_augmented<F: Scalar>(
    spec: &NetworkSpec,
    op: &crate::paramspace::AmbientOperator<F>,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
) -> Result<f64> {
    if images.n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let group = spec.input_rep.group().clone();
    let mut acc = 0.0;
    for g in group.elements() {
        let draws = vec![g; images.n];
        let (ax, at) = augment_batch(spec, images, targets, &draws)?;
        acc += crate::network::batch_loss(spec, op, &ax, &at, loss)?;
    }
    Ok(acc / group.order() as f64)
}

/// Sampled risk of one augmented minibatch.
pub fn risk_sampled<F: Scalar>(
    spec: &NetworkSpec,
    op: &crate::paramspace::AmbientOperator<F>,
    batch: &AugmentedBatch<F>,
    loss: LossKind,
) -> Result<f64> {
    let (ax, at) = augment_batch(spec, &batch.images, &batch.targets, &batch.draws)?;
    crate::network::batch_loss(spec, op, &ax, &at, loss)
}

/// Loss and coordinate gradient of the group-averaged risk on a sample set.
pub fn grad_full_augmented<F: Scalar>(
    spec: &NetworkSpec,
    op: &crate::paramspace::AmbientOperator<F>,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
) -> Result<(f64, Vec<F>)> {
    let group = spec.input_rep.group().clone();
    let inv = F::from_f64(1.0 / group.order() as f64);
    let mut total = 0.0;
    let mut acc = vec![F::ZERO; spec.space.dim()];
    for g in group.elements() {
        let draws = vec![g; images.n];
        let (ax, at) = augment_batch(spec, images, targets, &draws)?;
        let (l, grad) = gradient(spec, op, &ax, &at, loss)?;
        total += l;
        for (a, gv) in acc.iter_mut().zip(&grad) {
            *a += *gv;
        }
    }
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok((total / group.order() as f64, acc))
}

fn descend<F: Scalar>(spec: &NetworkSpec, params: &ParamPoint<F>, grad: &[F], lr: f64) -> Result<ParamPoint<F>> {
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient has non-finite components".into()));
    }
    let lrf = F::from_f64(lr);
    let coords: Vec<F> = params
        .coords
        .iter()
        .zip(grad)
        .map(|(c, g)| *c - lrf * *g)
        .collect();
    Ok(ParamPoint::from_coords(&spec.space, coords))
}

/// One explicit-Euler step of the projected, fully augmented descent on the
/// given sample set (the whole dataset or any deterministic batch of it).
pub fn step_full_gd<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamPoint<F>,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
    lr: f64,
) -> Result<ParamPoint<F>> {
    let (_, grad) = grad_full_augmented(spec, &params.ambient, images, targets, loss)?;
    descend(spec, params, &grad, lr)
}

/// One projected SGD step on a sampled augmented batch.
pub fn step_sgd<F: Scalar>(
    spec: &NetworkSpec,
    params: &ParamPoint<F>,
    batch: &AugmentedBatch<F>,
    loss: LossKind,
    lr: f64,
) -> Result<ParamPoint<F>> {
    let (ax, at) = augment_batch(spec, &batch.images, &batch.targets, &batch.draws)?;
    let (_, grad) = gradient(spec, &params.ambient, &ax, &at, loss)?;
    descend(spec, params, &grad, lr)
}

/// Group-draw source for a training run.
#[derive(Clone, Debug)]
pub enum GroupDraws {
    /// Fresh draws from the member's group stream.
    Stream,
    /// Replayed draws, optionally composed on the left with a fixed
    /// element (the measure-preserving coupling).
    Replay { draws: Vec<usize>, compose_left: Option<usize> },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub params: ParamPoint<F>,
    pub epoch_losses: Vec<f64>,
    /// Coordinates at the end of each epoch (or at the step cut).
    pub epoch_coords: Vec<Vec<F>>,
    pub group_draws: Vec<usize>,
    pub steps: usize,
}

/// Trains one member. The batch order comes from the stream keyed by
/// `schedule_member`, so members can share a deterministic schedule while
/// keeping independent initializations and group draws.
#[allow(clippy::too_many_arguments)]
pub fn train_member_from<F: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
    init_coords: Vec<F>,
    member: u64,
    schedule_member: u64,
    draws: GroupDraws,
    max_steps: Option<usize>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if images.n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let group = spec.input_rep.group().clone();
    let mut params = ParamPoint::from_coords(&spec.space, init_coords);
    let mut order_stream = Stream::new(cfg.seed, schedule_member, Purpose::BatchOrder);
    let mut draw_stream = Stream::new(cfg.seed, member, Purpose::GroupDraw);
    let mut recorded: Vec<usize> = Vec::new();
    let mut replay_pos = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_coords: Vec<Vec<F>> = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    'outer: for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.n).collect();
        order_stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break; // drop-last partial batch
            }
            let len = images.shape.len();
            let mut bx = Batch::zeros(chunk.len(), images.shape);
            for (bi, &si) in chunk.iter().enumerate() {
                bx.sample_mut(bi).copy_from_slice(&images.data[si * len..(si + 1) * len]);
            }
            let bt = targets.select(chunk);
            let (l, grad) = match cfg.mode {
                TrainMode::FullAugmentGd => grad_full_augmented(spec, &params.ambient, &bx, &bt, loss)?,
                TrainMode::NoAugmentSgd => gradient(spec, &params.ambient, &bx, &bt, loss)?,
                TrainMode::RandomAugmentSgd => {
                    let gdraws: Vec<usize> = match &draws {
                        GroupDraws::Stream => (0..chunk.len())
                            .map(|_| draw_stream.next_index(group.order()))
                            .collect(),
                        GroupDraws::Replay { draws, compose_left } => {
                            let take = &draws[replay_pos..replay_pos + chunk.len()];
                            replay_pos += chunk.len();
                            match compose_left {
                                Some(h) => take.iter().map(|&g| group.mul(*h, g)).collect(),
                                None => take.to_vec(),
                            }
                        }
                    };
                    recorded.extend_from_slice(&gdraws);
                    let (ax, at) = augment_batch(spec, &bx, &bt, &gdraws)?;
                    gradient(spec, &params.ambient, &ax, &at, loss)?
                }
            };
            params = descend(spec, &params, &grad, cfg.learning_rate)?;
            epoch_loss += l;
            batches += 1;
            steps += 1;
            if let Some(ms) = max_steps {
                if steps >= ms {
                    if batches > 0 {
                        epoch_losses.push(epoch_loss / batches as f64);
                        epoch_coords.push(params.coords.clone());
                    }
                    break 'outer;
                }
            }
        }
        if batches == 0 {
            return Err(Error::InvalidArgument(
                "batch size exceeds the dataset; no full batch fits".into(),
            ));
        }
        epoch_losses.push(epoch_loss / batches as f64);
        epoch_coords.push(params.coords.clone());
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        epoch_coords,
        group_draws: recorded,
        steps,
    })
}

/// Standard entry: init from the member's init stream, then train.
#[allow(clippy::too_many_arguments)]
pub fn train_member<F: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
    init: InitKind,
    member: u64,
    shared_schedule: bool,
    max_steps: Option<usize>,
) -> Result<TrainOutcome<F>> {
    let mut init_stream = Stream::new(cfg.seed, member, Purpose::Init);
    let coords: Vec<F> = init_coords(spec, init, &mut init_stream)
        .into_iter()
        .map(F::from_f64)
        .collect();
    let schedule_member = if shared_schedule { u64::MAX } else { member };
    train_member_from(
        spec,
        cfg,
        images,
        targets,
        loss,
        coords,
        member,
        schedule_member,
        GroupDraws::Stream,
        max_steps,
    )
}

/// Lockstep comparison of two fully augmented descent trajectories, one
/// started at A and one at lift(g) A, sharing the deterministic schedule.
/// On an invariant space each step's vector field commutes with the
/// action, so the second trajectory tracks the image of the first.
#[allow(clippy::too_many_arguments)]
pub fn dual_trajectory_full_gd(
    spec: &NetworkSpec,
    rep: &LiftedRep,
    images: &Batch<f64>,
    targets: &Targets<f64>,
    loss: LossKind,
    g: usize,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
    init: InitKind,
) -> Result<f64> {
    rep.validate(spec.space.layers())?;
    let mut init_stream = Stream::new(seed, 0, Purpose::Init);
    let c1: Vec<f64> = init_coords(spec, init, &mut init_stream);
    let mut p1 = ParamPoint::from_coords(&spec.space, c1);
    let moved = lifted_apply(spec.space.layers(), rep, g, &p1.ambient)?;
    let mut p2 = ParamPoint::from_coords(&spec.space, spec.space.coords_of(&moved)?);
    let mut order_stream = Stream::new(seed, u64::MAX, Purpose::BatchOrder);
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < steps {
        let mut order: Vec<usize> = (0..images.n).collect();
        order_stream.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size || done >= steps {
                break;
            }
            let len = images.shape.len();
            let mut bx = Batch::zeros(chunk.len(), images.shape);
            for (bi, &si) in chunk.iter().enumerate() {
                bx.sample_mut(bi).copy_from_slice(&images.data[si * len..(si + 1) * len]);
            }
            let bt = targets.select(chunk);
            p1 = step_full_gd(spec, &p1, &bx, &bt, loss, lr)?;
            p2 = step_full_gd(spec, &p2, &bx, &bt, loss, lr)?;
            let image_of_p1 = lifted_apply(spec.space.layers(), rep, g, &p1.ambient)?;
            worst = worst.max(spec.space.ambient_distance(&p2.ambient, &image_of_p1)?);
            done += 1;
        }
    }
    Ok(worst)
}

/// The exact coupled-run surrogate for equivariance in distribution of
/// SGD: run one trajectory with draws g_k, a second from the transported
/// start with draws h g_k and the same batch order, and report the largest
/// ambient distance between the second trajectory and the image of the
/// first. The left-composed draws are equidistributed with the originals,
/// so on an invariant space the deviation is floating-point noise only.
#[allow(clippy::too_many_arguments)]
pub fn coupled_sgd_equivariance(
    spec: &NetworkSpec,
    rep: &LiftedRep,
    images: &Batch<f64>,
    targets: &Targets<f64>,
    loss: LossKind,
    h: usize,
    lr: f64,
    steps: usize,
    batch_size: usize,
    seed: u64,
    init: InitKind,
) -> Result<f64> {
    rep.validate(spec.space.layers())?;
    let group = spec.input_rep.group().clone();
    let mut init_stream = Stream::new(seed, 0, Purpose::Init);
    let c1: Vec<f64> = init_coords(spec, init, &mut init_stream);
    let mut p1 = ParamPoint::from_coords(&spec.space, c1);
    let moved = lifted_apply(spec.space.layers(), rep, h, &p1.ambient)?;
    let mut p2 = ParamPoint::from_coords(&spec.space, spec.space.coords_of(&moved)?);
    let mut order_stream = Stream::new(seed, u64::MAX, Purpose::BatchOrder);
    let mut draw_stream = Stream::new(seed, 0, Purpose::GroupDraw);
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < steps {
        let mut order: Vec<usize> = (0..images.n).collect();
        order_stream.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            if chunk.len() < batch_size || done >= steps {
                break;
            }
            let len = images.shape.len();
            let mut bx = Batch::zeros(chunk.len(), images.shape);
            for (bi, &si) in chunk.iter().enumerate() {
                bx.sample_mut(bi).copy_from_slice(&images.data[si * len..(si + 1) * len]);
            }
            let bt = targets.select(chunk);
            let gdraws: Vec<usize> = (0..chunk.len())
                .map(|_| draw_stream.next_index(group.order()))
                .collect();
            let coupled: Vec<usize> = gdraws.iter().map(|&g| group.mul(h, g)).collect();
            let b1 = AugmentedBatch::new(bx.clone(), bt.clone(), gdraws)?;
            let b2 = AugmentedBatch::new(bx, bt, coupled)?;
            p1 = step_sgd(spec, &p1, &b1, loss, lr)?;
            p2 = step_sgd(spec, &p2, &b2, loss, lr)?;
            let image_of_p1 = lifted_apply(spec.space.layers(), rep, h, &p1.ambient)?;
            worst = worst.max(spec.space.ambient_distance(&p2.ambient, &image_of_p1)?);
            done += 1;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::{toy_conv_spec, toy_dataset};
    use crate::group::{FiniteGroup, UnitaryRep};
    use crate::network::{batch_loss, Nonlinearity, NetworkSpec};
    use crate::paramspace::{AffineSpace, FilterSupport, LayerSpec, Padding};
    use crate::tensor::Shape;
    use crate::TOL_EXACT;

    fn dense_regression_spec() -> NetworkSpec {
        let group = FiniteGroup::cyclic(1).unwrap();
        let layers = vec![LayerSpec::dense(Shape::new(2, 1, 1), 1)];
        let space = AffineSpace::new(layers).unwrap();
        NetworkSpec::new(
            space,
            vec![Nonlinearity::Identity],
            UnitaryRep::trivial(group.clone(), 2),
            UnitaryRep::trivial(group, 1),
        )
        .unwrap()
    }

    #[test]
    fn augmented_risk_trivial_group_is_nominal() {
        let spec = dense_regression_spec();
        let mut s = Stream::new(3, 0, Purpose::Data);
        let images = Batch::from_data(
            8,
            Shape::new(2, 1, 1),
            (0..16).map(|_| s.next_gaussian()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let targets = Targets::Vectors {
            dim: 1,
            data: (0..8).map(|_| s.next_gaussian()).collect(),
        };
        let op = spec.space.expand(&[0.3, -0.7]);
        let aug = risk_augmented(&spec, &op, &images, &targets, LossKind::SquaredError).unwrap();
        let nom = batch_loss(&spec, &op, &images, &targets, LossKind::SquaredError).unwrap();
        assert!((aug - nom).abs() < TOL_EXACT);
    }

    #[test]
    fn augmented_risk_equals_nominal_for_equivariant_params() {
        // all-zero parameters give a constant (hence invariant) model
        let spec = toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap();
        let (images, targets) = toy_dataset(50, 5);
        let op = spec.space.expand(&vec![0.0f64; spec.space.dim()]);
        let aug = risk_augmented(&spec, &op, &images, &targets, LossKind::CrossEntropy).unwrap();
        let nom = batch_loss(&spec, &op, &images, &targets, LossKind::CrossEntropy).unwrap();
        assert!((aug - nom).abs() < 1e-12, "{aug} vs {nom}");
    }

    #[test]
    fn sampled_risk_degenerate_cases() {
        let spec = toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap();
        let (images, targets) = toy_dataset(6, 7);
        let mut s = Stream::new(9, 0, Purpose::Data);
        let coords: Vec<f64> = (0..spec.space.dim()).map(|_| s.next_gaussian()).collect();
        let op = spec.space.expand(&coords);

        // a single sample with the identity draw is the nominal loss of that sample
        let one = Batch::from_data(1, images.shape, images.sample(0).to_vec()).unwrap();
        let one_t = targets.select(&[0]);
        let batch = AugmentedBatch::new(one.clone(), one_t.clone(), vec![0]).unwrap();
        let sampled = risk_sampled(&spec, &op, &batch, LossKind::CrossEntropy).unwrap();
        let nominal = batch_loss(&spec, &op, &one, &one_t, LossKind::CrossEntropy).unwrap();
        assert!((sampled - nominal).abs() < TOL_EXACT);

        // all-identity draws equal the unaugmented batch risk
        let batch = AugmentedBatch::new(images.clone(), targets.clone(), vec![0; images.n]).unwrap();
        let sampled = risk_sampled(&spec, &op, &batch, LossKind::CrossEntropy).unwrap();
        let nominal = batch_loss(&spec, &op, &images, &targets, LossKind::CrossEntropy).unwrap();
        assert!((sampled - nominal).abs() < TOL_EXACT);
    }

    #[test]
    fn sampled_risk_monte_carlo_consistency() {
        let spec = toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap();
        let (images, targets) = toy_dataset(10, 11);
        let mut s = Stream::new(13, 0, Purpose::Data);
        let coords: Vec<f64> = (0..spec.space.dim()).map(|_| s.next_gaussian()).collect();
        let op = spec.space.expand(&coords);
        let exact = risk_augmented(&spec, &op, &images, &targets, LossKind::CrossEntropy).unwrap();
        let n = 10_000usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut draws = Stream::new(17, 0, Purpose::GroupDraw);
        for _ in 0..n {
            let gs: Vec<usize> = (0..images.n).map(|_| draws.next_index(4)).collect();
            let batch = AugmentedBatch::new(images.clone(), targets.clone(), gs).unwrap();
            let r = risk_sampled(&spec, &op, &batch, LossKind::CrossEntropy).unwrap();
            sum += r;
            sq += r * r;
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - exact).abs() < 5.0 * se + 1e-12,
            "mean {mean} exact {exact} se {se}"
        );
    }

    #[test]
    fn gd_matches_closed_form_on_quadratic() {
        // linear least squares: the coordinate recursion has the closed form
        // w_{t+1} = w_t - lr (A w_t - b) with A, b assembled directly
        let spec = dense_regression_spec();
        let mut s = Stream::new(19, 0, Purpose::Data);
        let n = 12;
        let xs: Vec<f64> = (0..2 * n).map(|_| s.next_gaussian()).collect();
        let ys: Vec<f64> = (0..n).map(|_| s.next_gaussian()).collect();
        let images = Batch::from_data(n, Shape::new(2, 1, 1), xs.clone()).unwrap();
        let targets = Targets::Vectors { dim: 1, data: ys.clone() };

        // oracle matrices: R(w) = 1/(2n) sum (w.x - y)^2
        let mut a = [0.0f64; 4];
        let mut b = [0.0f64; 2];
        for i in 0..n {
            let x = [xs[2 * i], xs[2 * i + 1]];
            for r in 0..2 {
                for c in 0..2 {
                    a[r * 2 + c] += x[r] * x[c] / n as f64;
                }
                b[r] += x[r] * ys[i] / n as f64;
            }
        }
        let lr = 0.05;
        let mut oracle = [0.4f64, -0.2];
        let mut params = ParamPoint::from_coords(&spec.space, vec![0.4, -0.2]);
        for _ in 0..50 {
            let grad = [
                a[0] * oracle[0] + a[1] * oracle[1] - b[0],
                a[2] * oracle[0] + a[3] * oracle[1] - b[1],
            ];
            oracle[0] -= lr * grad[0];
            oracle[1] -= lr * grad[1];
            params = step_full_gd(&spec, &params, &images, &targets, LossKind::SquaredError, lr).unwrap();
            assert!((params.coords[0] - oracle[0]).abs() < 1e-10);
            assert!((params.coords[1] - oracle[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_and_zero_rate_fixed_points() {
        let spec = dense_regression_spec();
        // exact interpolation: gradient vanishes
        let images = Batch::from_data(1, Shape::new(2, 1, 1), vec![1.0, 2.0]).unwrap();
        let targets = Targets::Vectors { dim: 1, data: vec![1.0 * 3.0 + 2.0 * (-1.0)] };
        let params = ParamPoint::from_coords(&spec.space, vec![3.0, -1.0]);
        let next = step_full_gd(&spec, &params, &images, &targets, LossKind::SquaredError, 0.1).unwrap();
        assert_eq!(next.coords, params.coords);

        // zero learning rate leaves any point unchanged
        let params = ParamPoint::from_coords(&spec.space, vec![0.5, 0.6]);
        let batch = AugmentedBatch::new(images, targets, vec![0]).unwrap();
        let next = step_sgd(&spec, &params, &batch, LossKind::SquaredError, 0.0).unwrap();
        assert_eq!(next.coords, params.coords);
    }

    #[test]
    fn sgd_with_full_enumeration_matches_full_gd() {
        // batch = whole set and every group element enumerated once per
        // sample position: averaging manually over elements reproduces the
        // full step
        let spec = toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap();
        let (images, targets) = toy_dataset(5, 23);
        let mut s = Stream::new(29, 0, Purpose::Data);
        let coords: Vec<f64> = (0..spec.space.dim()).map(|_| s.next_gaussian()).collect();
        let params = ParamPoint::from_coords(&spec.space, coords);
        let lr = 0.1;
        let full = step_full_gd(&spec, &params, &images, &targets, LossKind::CrossEntropy, lr).unwrap();
        // average the sampled gradients over the four constant-draw batches
        let mut acc = vec![0.0f64; spec.space.dim()];
        for g in 0..4 {
            let (ax, at) = augment_batch(&spec, &images, &targets, &vec![g; images.n]).unwrap();
            let (_, grad) = gradient(&spec, &params.ambient, &ax, &at, LossKind::CrossEntropy).unwrap();
            for (a, v) in acc.iter_mut().zip(&grad) {
                *a += v / 4.0;
            }
        }
        for (c, (p, g)) in full.coords.iter().zip(params.coords.iter().zip(&acc)) {
            assert!((c - (p - lr * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn seed_determinism_bit_exact() {
        let spec = toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap();
        let (images, targets) = toy_dataset(16, 31);
        let cfg = TrainConfig {
            mode: TrainMode::RandomAugmentSgd,
            learning_rate: 0.05,
            batch_size: 4,
            epochs: 2,
            seed: 77,
            dtype: DType::F64,
        };
        let a = train_member(&spec, &cfg, &images, &targets, LossKind::CrossEntropy, InitKind::Invariant, 0, false, None).unwrap();
        let b = train_member(&spec, &cfg, &images, &targets, LossKind::CrossEntropy, InitKind::Invariant, 0, false, None).unwrap();
        assert_eq!(a.params.coords, b.params.coords);
        assert_eq!(a.group_draws, b.group_draws);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 78;
        let c = train_member(&spec, &cfg2, &images, &targets, LossKind::CrossEntropy, InitKind::Invariant, 0, false, None).unwrap();
        assert_ne!(a.params.coords, c.params.coords);
    }

    #[test]
    fn empty_space_expands_to_base() {
        let space = AffineSpace::new(vec![]).unwrap();
        assert_eq!(space.dim(), 0);
        let op = space.expand::<f64>(&[]);
        assert!(op.blocks.is_empty());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            mode: TrainMode::RandomAugmentSgd,
            learning_rate: 0.0,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            dtype: DType::F32,
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.1,
            batch_size: 0,
            ..bad
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toy_paired_trajectories_mirror() {
        let spec = crate::config::toy_c2_network().unwrap();
        let ds = crate::data::make_c2_toy(64, 3);
        let images: Batch<f64> = ds.images.cast();
        let targets: Targets<f64> = ds.targets();
        let mut p = ParamPoint::from_coords(&spec.space, vec![0.8, 0.5]);
        let mut q = ParamPoint::from_coords(&spec.space, vec![0.8, -0.5]);
        for _ in 0..60 {
            p = step_full_gd(&spec, &p, &images, &targets, LossKind::SquaredError, 0.1).unwrap();
            q = step_full_gd(&spec, &q, &images, &targets, LossKind::SquaredError, 0.1).unwrap();
            assert!((p.coords[0] - q.coords[0]).abs() < 1e-10);
            assert!((p.coords[1] + q.coords[1]).abs() < 1e-10);
        }
    }
}
