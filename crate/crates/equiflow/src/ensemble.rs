//! Ensembles, the ensemble-mean model, exact orbit symmetrization, and
//! the invariance metrics (orbit same prediction, symmetric KL).
//!
//! The ensemble mean averages member logits before any softmax, and the
//! divergence metric applies softmax to the averaged logits. Probabilities
//! are clamped at 1e-12 before logs; divergences below 1e-12 report the
//! floor value -12 on the log10 scale.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::group::FiniteGroup;
use crate::network::{forward, NetworkSpec, ParamPoint, Targets, LossKind};
use crate::paramspace::{check_g_invariance, lifted_apply, LayerKind, LiftedRep};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::Batch;
use crate::training::{train_member_from, GroupDraws, InitKind, TrainConfig, TrainOutcome};

pub const PROB_CLAMP: f64 = 1e-12;
pub const KL_LOG10_FLOOR: f64 = -12.0;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MemberProvenance {
    pub seed: u64,
    pub member: u64,
}

/// A list of parameter points sharing one architecture.
#[derive(Clone, Debug)]
pub struct Ensemble<F> {
    pub spec: Arc<NetworkSpec>,
    pub members: Vec<ParamPoint<F>>,
    pub provenance: Vec<MemberProvenance>,
}

impl<F: Scalar> Ensemble<F> {
    pub fn new(
        spec: Arc<NetworkSpec>,
        members: Vec<ParamPoint<F>>,
        provenance: Vec<MemberProvenance>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        let p = spec.space.dim();
        if members.iter().any(|m| m.coords.len() != p) {
            return Err(Error::ShapeMismatch("member coordinate length mismatch".into()));
        }
        if provenance.len() != members.len() {
            return Err(Error::ShapeMismatch("one provenance record per member".into()));
        }
        Ok(Ensemble {
            spec,
            members,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Mean of member logits on a batch, accumulated in f64 in member order.
pub fn ensemble_mean_logits<F: Scalar>(ens: &Ensemble<F>, x: &Batch<F>) -> Result<Vec<f64>> {
    let out_len = ens.spec.output_shape().len();
    let mut acc = vec![0.0f64; x.n * out_len];
    for m in &ens.members {
        let y = forward(&ens.spec, &m.ambient, x)?;
        for (a, v) in acc.iter_mut().zip(&y.data) {
            *a += v.to_f64();
        }
    }
    let inv = 1.0 / ens.members.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(acc)
}

/// Mean prediction on one input.
pub fn ensemble_mean_predict<F: Scalar>(ens: &Ensemble<F>, x: &[F]) -> Result<Vec<f64>> {
    let batch = Batch::from_data(1, ens.spec.input_shape(), x.to_vec())?;
    ensemble_mean_logits(ens, &batch)
}

/// Whether the architecture space is invariant under the lifted action.
/// Small spaces run the dense audit; larger ones use the structural
/// criterion (rotation-family representations and rotation-closed masks),
/// plus an exact check that the base point is fixed by the action.
pub fn space_invariant_verdict(spec: &NetworkSpec, rep: &LiftedRep) -> Result<bool> {
    rep.validate(spec.space.layers())?;
    match check_g_invariance(&spec.space, rep) {
        Ok(report) => return Ok(report.invariant),
        Err(Error::Capacity(_)) => {}
        Err(e) => return Err(e),
    }
    for (layer, reps) in spec.space.layers().iter().zip(&rep.layers) {
        match &layer.kind {
            LayerKind::Dense { .. } => {}
            LayerKind::Conv { support, .. } => {
                let pure = (reps.input.is_pure_rotation() || reps.input.is_trivial_action())
                    && (reps.output.is_pure_rotation() || reps.output.is_trivial_action());
                if !pure {
                    return Err(Error::Capacity(
                        "space too large for the dense audit and reps are not rotation-family".into(),
                    ));
                }
                let order = rep.group().order();
                if order > 1 && !support.is_c4_symmetric() && order == 4 {
                    return Ok(false);
                }
                if order == 2 && !(support.rotate(2) == *support) {
                    return Ok(false);
                }
            }
        }
    }
    // the base point must be fixed by every element
    let base = spec.space.base();
    for g in rep.group().elements() {
        let moved = lifted_apply(spec.space.layers(), rep, g, base)?;
        if spec.space.ambient_distance(&moved, base)? > crate::TOL_PIPELINE {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Closes the member set under the group orbit: for every member A and
/// element g the result contains lift(g) A. Member count multiplies by the
/// group order; the empirical parameter distribution becomes exactly
/// invariant. Refuses when the space is not invariant, since the orbit
/// would leave the architecture.
pub fn symmetrize<F: Scalar>(ens: &Ensemble<F>, rep: &LiftedRep) -> Result<Ensemble<F>> {
    if !space_invariant_verdict(&ens.spec, rep)? {
        return Err(Error::NotInvariant(
            "orbit closure needs an invariant architecture space".into(),
        ));
    }
    let group = rep.group().clone();
    let mut members = Vec::with_capacity(ens.members.len() * group.order());
    let mut provenance = Vec::with_capacity(members.capacity());
    for (m, prov) in ens.members.iter().zip(&ens.provenance) {
        for g in group.elements() {
            let moved = lifted_apply(ens.spec.space.layers(), rep, g, &m.ambient)?;
            let coords = ens.spec.space.coords_of(&moved)?;
            members.push(ParamPoint::from_coords(&ens.spec.space, coords));
            provenance.push(*prov);
        }
    }
    Ensemble::new(ens.spec.clone(), members, provenance)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    /// Mean over the evaluation set, in [1, |G|].
    pub osp: f64,
    /// log10 of the mean symmetric KL divergence.
    pub sym_kl_log10: f64,
    pub osp_band_lo: f64,
    pub osp_band_hi: f64,
    pub kl_band_lo: f64,
    pub kl_band_hi: f64,
    pub osp_std: f64,
    pub kl_std: f64,
    #[serde(skip)]
    pub member_osp: Vec<f64>,
    #[serde(skip)]
    pub member_kl_log10: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_clamped(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in exps.iter_mut() {
        *e = (*e / sum).max(PROB_CLAMP);
    }
    exps
}

fn sym_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

fn log10_floor(mean_kl: f64) -> f64 {
    mean_kl.max(PROB_CLAMP).log10().max(KL_LOG10_FLOOR)
}

struct MetricAccum {
    osp_sum: f64,
    kl_sum: f64,
    kl_terms: usize,
    images: usize,
}

impl MetricAccum {
    fn new() -> Self {
        MetricAccum {
            osp_sum: 0.0,
            kl_sum: 0.0,
            kl_terms: 0,
            images: 0,
        }
    }

    /// logits: [g][image][class] for one chunk.
    fn update(&mut self, logits: &[Vec<f64>], n: usize, klen: usize, order: usize) {
        for i in 0..n {
            let base = &logits[0][i * klen..(i + 1) * klen];
            let base_pred = argmax(base);
            let p = softmax_clamped(base);
            let mut count = 1usize; // the identity always agrees
            for g in 1..order {
                let cur = &logits[g][i * klen..(i + 1) * klen];
                if argmax(cur) == base_pred {
                    count += 1;
                }
                let q = softmax_clamped(cur);
                self.kl_sum += sym_kl(&p, &q);
                self.kl_terms += 1;
            }
            self.osp_sum += count as f64;
            self.images += 1;
        }
    }

    fn osp(&self) -> f64 {
        self.osp_sum / self.images.max(1) as f64
    }

    fn kl_log10(&self) -> f64 {
        let mean = if self.kl_terms == 0 {
            0.0
        } else {
            self.kl_sum / self.kl_terms as f64
        };
        log10_floor(mean)
    }
}

/// Evaluates the invariance metrics of the ensemble mean and of every
/// member on an image set. The group action on inputs is the network's
/// input representation; the identity element is element 0.
pub fn evaluate<F: Scalar>(ens: &Ensemble<F>, images: &Batch<f32>) -> Result<MetricReport> {
    if images.n == 0 {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let group: Arc<FiniteGroup> = ens.spec.input_rep.group().clone();
    let order = group.order();
    let klen = ens.spec.output_shape().len();
    let nm = ens.members.len();
    let chunk_size = 256usize;
    let mut mean_acc = MetricAccum::new();
    let mut member_accs: Vec<MetricAccum> = (0..nm).map(|_| MetricAccum::new()).collect();
    let len = images.shape.len();
    let mut start = 0;
    while start < images.n {
        let n = chunk_size.min(images.n - start);
        let chunk = Batch::from_data(
            n,
            images.shape,
            images.data[start * len..(start + n) * len].to_vec(),
        )?;
        // member logits per element: [member][g] -> flat [image][class]
        let mut member_logits: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(order); nm];
        let mut mean_logits: Vec<Vec<f64>> = Vec::with_capacity(order);
        for g in 0..order {
            let mut gx: Batch<F> = chunk.cast();
            if g != group.identity() {
                let src: Batch<F> = chunk.cast();
                for i in 0..n {
                    ens.spec.input_rep.apply(g, src.sample(i), gx.sample_mut(i));
                }
            }
            let mut mean = vec![0.0f64; n * klen];
            for (mi, m) in ens.members.iter().enumerate() {
                let y = forward(&ens.spec, &m.ambient, &gx)?;
                let flat: Vec<f64> = y.data.iter().map(|v| v.to_f64()).collect();
                for (a, v) in mean.iter_mut().zip(&flat) {
                    *a += v;
                }
                member_logits[mi].push(flat);
            }
            let inv = 1.0 / nm as f64;
            for a in mean.iter_mut() {
                *a *= inv;
            }
            mean_logits.push(mean);
        }
        mean_acc.update(&mean_logits, n, klen, order);
        for (mi, acc) in member_accs.iter_mut().enumerate() {
            acc.update(&member_logits[mi], n, klen, order);
        }
        start += n;
    }
    let member_osp: Vec<f64> = member_accs.iter().map(|a| a.osp()).collect();
    let member_kl: Vec<f64> = member_accs.iter().map(|a| a.kl_log10()).collect();
    let mut osp_sorted = member_osp.clone();
    osp_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut kl_sorted = member_kl.clone();
    kl_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let std = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
    };
    Ok(MetricReport {
        osp: mean_acc.osp(),
        sym_kl_log10: mean_acc.kl_log10(),
        osp_band_lo: quantile(&osp_sorted, 0.025),
        osp_band_hi: quantile(&osp_sorted, 0.975),
        kl_band_lo: quantile(&kl_sorted, 0.025),
        kl_band_hi: quantile(&kl_sorted, 0.975),
        osp_std: std(&member_osp),
        kl_std: std(&member_kl),
        member_osp,
        member_kl_log10: member_kl,
    })
}

/// Orbit-same-prediction of the ensemble mean.
pub fn metric_osp<F: Scalar>(ens: &Ensemble<F>, images: &Batch<f32>) -> Result<f64> {
    Ok(evaluate(ens, images)?.osp)
}

/// log10 mean symmetric KL of the ensemble mean.
pub fn metric_sym_kl<F: Scalar>(ens: &Ensemble<F>, images: &Batch<f32>) -> Result<f64> {
    Ok(evaluate(ens, images)?.sym_kl_log10)
}

/// Mean-model divergence for nested member prefixes, sharing one forward
/// pass per member. Used to trace how the finite-size invariance error
/// shrinks as the ensemble grows.
pub fn mean_kl_for_prefixes<F: Scalar>(
    ens: &Ensemble<F>,
    images: &Batch<f32>,
    prefixes: &[usize],
) -> Result<Vec<f64>> {
    if prefixes.iter().any(|&p| p == 0 || p > ens.members.len()) {
        return Err(Error::InvalidArgument("prefix sizes must be in 1..=members".into()));
    }
    let group = ens.spec.input_rep.group().clone();
    let order = group.order();
    let klen = ens.spec.output_shape().len();
    let len = images.shape.len();
    let chunk_size = 256usize;
    let mut kl_sums = vec![0.0f64; prefixes.len()];
    let mut kl_terms = vec![0usize; prefixes.len()];
    let mut start = 0;
    while start < images.n {
        let n = chunk_size.min(images.n - start);
        let chunk = Batch::from_data(
            n,
            images.shape,
            images.data[start * len..(start + n) * len].to_vec(),
        )?;
        // prefix-summed logits: [prefix][g] -> flat
        let mut sums: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n * klen]; order]; prefixes.len()];
        for g in 0..order {
            let mut gx: Batch<F> = chunk.cast();
            if g != group.identity() {
                let src: Batch<F> = chunk.cast();
                for i in 0..n {
                    ens.spec.input_rep.apply(g, src.sample(i), gx.sample_mut(i));
                }
            }
            let mut running = vec![0.0f64; n * klen];
            let mut next_cut = 0usize;
            for (mi, m) in ens.members.iter().enumerate() {
                let y = forward(&ens.spec, &m.ambient, &gx)?;
                for (a, v) in running.iter_mut().zip(&y.data) {
                    *a += v.to_f64();
                }
                while next_cut < prefixes.len() && mi + 1 == prefixes[next_cut] {
                    sums[next_cut][g].copy_from_slice(&running);
                    next_cut += 1;
                }
            }
        }
        for (pi, &pn) in prefixes.iter().enumerate() {
            let inv = 1.0 / pn as f64;
            for i in 0..n {
                let base: Vec<f64> = sums[pi][0][i * klen..(i + 1) * klen]
                    .iter()
                    .map(|v| v * inv)
                    .collect();
                let p = softmax_clamped(&base);
                for g in 1..order {
                    let cur: Vec<f64> = sums[pi][g][i * klen..(i + 1) * klen]
                        .iter()
                        .map(|v| v * inv)
                        .collect();
                    let q = softmax_clamped(&cur);
                    kl_sums[pi] += sym_kl(&p, &q);
                    kl_terms[pi] += 1;
                }
            }
        }
        start += n;
    }
    Ok(kl_sums
        .iter()
        .zip(&kl_terms)
        .map(|(&s, &t)| log10_floor(if t == 0 { 0.0 } else { s / t as f64 }))
        .collect())
}

/// Max over images and elements of the sup-norm deviation between the mean
/// model on a transformed input and the transformed mean output.
pub fn mean_equivariance_residual<F: Scalar>(ens: &Ensemble<F>, images: &Batch<f32>) -> Result<f64> {
    let group = ens.spec.input_rep.group().clone();
    let klen = ens.spec.output_shape().len();
    let base: Batch<F> = images.cast();
    let base_logits = ensemble_mean_logits(ens, &base)?;
    let mut worst = 0.0f64;
    for g in group.elements() {
        let mut gx = base.clone();
        for i in 0..base.n {
            ens.spec.input_rep.apply(g, base.sample(i), gx.sample_mut(i));
        }
        let lhs = ensemble_mean_logits(ens, &gx)?;
        for i in 0..base.n {
            let mut rhs = vec![0.0f64; klen];
            ens.spec
                .output_rep
                .apply(g, &base_logits[i * klen..(i + 1) * klen], &mut rhs);
            for (a, b) in lhs[i * klen..(i + 1) * klen].iter().zip(&rhs) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Trains `member_count` members independently and collects the ensemble.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble<F: Scalar>(
    spec: &Arc<NetworkSpec>,
    cfg: &TrainConfig,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
    init: InitKind,
    member_count: usize,
    shared_schedule: bool,
    max_steps: Option<usize>,
) -> Result<(Ensemble<F>, Vec<TrainOutcome<F>>)> {
    let mut members = Vec::with_capacity(member_count);
    let mut provenance = Vec::with_capacity(member_count);
    let mut outcomes = Vec::with_capacity(member_count);
    for m in 0..member_count as u64 {
        let outcome = crate::training::train_member(
            spec, cfg, images, targets, loss, init, m, shared_schedule, max_steps,
        )?;
        members.push(outcome.params.clone());
        provenance.push(MemberProvenance {
            seed: cfg.seed,
            member: m,
        });
        outcomes.push(outcome);
    }
    Ok((Ensemble::new(spec.clone(), members, provenance)?, outcomes))
}

/// The finite Theorem-1 witness: draws `base_members` invariant inits,
/// closes them under the orbit, and trains every member of the closed set
/// with the same deterministic fully augmented schedule. The resulting
/// member set stays orbit-closed up to floating-point drift, so the mean
/// model is exactly equivariant.
#[allow(clippy::too_many_arguments)]
pub fn train_symmetrized_ensemble<F: Scalar>(
    spec: &Arc<NetworkSpec>,
    rep: &LiftedRep,
    cfg: &TrainConfig,
    images: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
    base_members: usize,
    max_steps: Option<usize>,
) -> Result<Ensemble<F>> {
    if !space_invariant_verdict(spec, rep)? {
        return Err(Error::NotInvariant(
            "the symmetrized witness needs an invariant space".into(),
        ));
    }
    let group = rep.group().clone();
    let mut inits: Vec<Vec<F>> = Vec::with_capacity(base_members * group.order());
    for m in 0..base_members as u64 {
        let mut stream = Stream::new(cfg.seed, m, Purpose::Init);
        let base: Vec<F> = crate::training::init_coords(spec, InitKind::Invariant, &mut stream)
            .into_iter()
            .map(F::from_f64)
            .collect();
        let ambient = spec.space.expand(&base);
        for g in group.elements() {
            let moved = lifted_apply(spec.space.layers(), rep, g, &ambient)?;
            inits.push(spec.space.coords_of(&moved)?);
        }
    }
    let mut members = Vec::with_capacity(inits.len());
    let mut provenance = Vec::with_capacity(inits.len());
    for (mi, coords) in inits.into_iter().enumerate() {
        let outcome = train_member_from(
            spec,
            cfg,
            images,
            targets,
            loss,
            coords,
            mi as u64,
            u64::MAX, // shared schedule
            GroupDraws::Stream,
            max_steps,
        )?;
        members.push(outcome.params);
        provenance.push(MemberProvenance {
            seed: cfg.seed,
            member: mi as u64,
        });
    }
    Ensemble::new(spec.clone(), members, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::toy_conv_spec;
    use crate::group::UnitaryRep;
    use crate::network::Nonlinearity;
    use crate::paramspace::{AffineSpace, FilterSupport, LayerSpec, Padding};
    use crate::tensor::Shape;

    fn dense_logit_spec(in_shape: Shape, classes: usize) -> Arc<NetworkSpec> {
        let group = FiniteGroup::cyclic(4).unwrap();
        let layers = vec![LayerSpec::dense(in_shape, classes)];
        let space = AffineSpace::new(layers).unwrap();
        Arc::new(
            NetworkSpec::new(
                space,
                vec![Nonlinearity::Identity],
                UnitaryRep::rotation(group.clone(), in_shape.c, in_shape.h, in_shape.w).unwrap(),
                UnitaryRep::trivial(group, classes),
            )
            .unwrap(),
        )
    }

    fn prov(n: usize) -> Vec<MemberProvenance> {
        (0..n as u64).map(|member| MemberProvenance { seed: 0, member }).collect()
    }

    #[test]
    fn single_member_mean_is_member_output() {
        let spec = dense_logit_spec(Shape::new(1, 2, 2), 3);
        let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let member = ParamPoint::from_coords(&spec.space, w);
        let ens = Ensemble::new(spec.clone(), vec![member.clone()], prov(1)).unwrap();
        let x = [1.0f64, -1.0, 0.5, 2.0];
        let mean = ensemble_mean_predict(&ens, &x).unwrap();
        let batch = Batch::from_data(1, Shape::new(1, 2, 2), x.to_vec()).unwrap();
        let direct = crate::network::forward(&spec, &member.ambient, &batch).unwrap();
        for (m, d) in mean.iter().zip(direct.sample(0)) {
            assert_eq!(*m, *d);
        }
    }

    #[test]
    fn opposite_members_cancel() {
        let spec = dense_logit_spec(Shape::new(1, 2, 2), 3);
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let neg: Vec<f64> = w.iter().map(|v| -v).collect();
        let ens = Ensemble::new(
            spec.clone(),
            vec![
                ParamPoint::from_coords(&spec.space, w),
                ParamPoint::from_coords(&spec.space, neg),
            ],
            prov(2),
        )
        .unwrap();
        let mean = ensemble_mean_predict(&ens, &[0.4, 1.0, -0.3, 0.9]).unwrap();
        assert!(mean.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn symmetrize_multiplies_members_and_is_orbit_idempotent() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap());
        let rep = spec.rotation_lifted_rep().unwrap();
        let mut s = Stream::new(3, 0, Purpose::Init);
        let members: Vec<ParamPoint<f64>> = (0..3)
            .map(|_| {
                ParamPoint::from_coords(
                    &spec.space,
                    (0..spec.space.dim()).map(|_| s.next_gaussian()).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let ens = Ensemble::new(spec.clone(), members, prov(3)).unwrap();
        let sym = symmetrize(&ens, &rep).unwrap();
        assert_eq!(sym.len(), 12);

        let again = symmetrize(&sym, &rep).unwrap();
        assert_eq!(again.len(), 48);
        // as a multiset, the twice-symmetrized coords are four copies of
        // the once-symmetrized coords
        let key = |coords: &Vec<f64>| -> Vec<u64> { coords.iter().map(|c| c.to_bits()).collect() };
        let mut once: Vec<Vec<u64>> = sym.members.iter().map(|m| key(&m.coords)).collect();
        let mut twice: Vec<Vec<u64>> = again.members.iter().map(|m| key(&m.coords)).collect();
        once.sort();
        twice.sort();
        for item in once {
            let c = twice.iter().filter(|t| **t == item).count();
            assert!(c >= 4, "orbit member lost under repeated closure");
        }
    }

    #[test]
    fn symmetrize_refuses_non_invariant_space() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::asym_3x3(), Padding::Circular).unwrap());
        let rep = spec.rotation_lifted_rep().unwrap();
        let member = ParamPoint::from_coords(&spec.space, vec![0.1; spec.space.dim()]);
        let ens = Ensemble::new(spec, vec![member], prov(1)).unwrap();
        match symmetrize(&ens, &rep) {
            Err(Error::NotInvariant(_)) => {}
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn metrics_invariant_under_member_permutation() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap());
        let mut s = Stream::new(5, 0, Purpose::Init);
        let members: Vec<ParamPoint<f64>> = (0..4)
            .map(|_| {
                ParamPoint::from_coords(
                    &spec.space,
                    (0..spec.space.dim()).map(|_| s.next_gaussian()).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let mut data = Stream::new(7, 0, Purpose::Data);
        let images = Batch::from_data(
            20,
            Shape::new(1, 8, 8),
            (0..20 * 64).map(|_| data.next_f64() as f32).collect::<Vec<f32>>(),
        )
        .unwrap();
        let a = evaluate(&Ensemble::new(spec.clone(), members.clone(), prov(4)).unwrap(), &images).unwrap();
        let mut shuffled = members;
        shuffled.reverse();
        let b = evaluate(&Ensemble::new(spec.clone(), shuffled, prov(4)).unwrap(), &images).unwrap();
        assert!((a.osp - b.osp).abs() < 1e-12);
        assert!((a.sym_kl_log10 - b.sym_kl_log10).abs() < 1e-9);
        assert!((a.osp_band_lo - b.osp_band_lo).abs() < 1e-12);
    }

    #[test]
    fn constant_model_is_perfectly_invariant() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap());
        let member = ParamPoint::from_coords(&spec.space, vec![0.0f64; spec.space.dim()]);
        let ens = Ensemble::new(spec, vec![member], prov(1)).unwrap();
        let mut data = Stream::new(9, 0, Purpose::Data);
        let images = Batch::from_data(
            10,
            Shape::new(1, 8, 8),
            (0..640).map(|_| data.next_f64() as f32).collect::<Vec<f32>>(),
        )
        .unwrap();
        let r = evaluate(&ens, &images).unwrap();
        assert_eq!(r.osp, 4.0);
        assert_eq!(r.sym_kl_log10, KL_LOG10_FLOOR);
    }

    #[test]
    fn covariant_pixel_model_reaches_osp_one() {
        // logits read the four corners; rotating the input cycles the
        // winning corner, so no rotated view agrees with the base view
        let spec = dense_logit_spec(Shape::new(1, 3, 3), 4);
        let corners = [(0usize, 0usize), (2, 0), (2, 2), (0, 2)];
        let mut w = vec![0.0f64; 4 * 9];
        for (c, &(r, cc)) in corners.iter().enumerate() {
            w[c * 9 + r * 3 + cc] = 1.0;
        }
        let ens = Ensemble::new(
            spec.clone(),
            vec![ParamPoint::from_coords(&spec.space, w)],
            prov(1),
        )
        .unwrap();
        let mut img = vec![0.0f32; 9];
        img[0] = 1.0; // unique max at the top-left corner
        img[4] = 0.2;
        let images = Batch::from_data(1, Shape::new(1, 3, 3), img).unwrap();
        let r = evaluate(&ens, &images).unwrap();
        assert_eq!(r.osp, 1.0);
    }

    #[test]
    fn symmetrized_mean_is_equivariant_without_training() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap());
        let rep = spec.rotation_lifted_rep().unwrap();
        let mut s = Stream::new(11, 0, Purpose::Init);
        let members: Vec<ParamPoint<f64>> = (0..2)
            .map(|_| {
                ParamPoint::from_coords(
                    &spec.space,
                    (0..spec.space.dim()).map(|_| s.next_gaussian()).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let ens = symmetrize(&Ensemble::new(spec, members, prov(2)).unwrap(), &rep).unwrap();
        let mut data = Stream::new(13, 0, Purpose::Data);
        let images = Batch::from_data(
            12,
            Shape::new(1, 8, 8),
            (0..12 * 64).map(|_| data.next_f64() as f32).collect::<Vec<f32>>(),
        )
        .unwrap();
        let res = mean_equivariance_residual(&ens, &images).unwrap();
        assert!(res < 1e-12, "residual {res}");
        let r = evaluate(&ens, &images).unwrap();
        assert_eq!(r.osp, 4.0);
        assert_eq!(r.sym_kl_log10, KL_LOG10_FLOOR);
    }

    #[test]
    fn prefix_divergence_matches_full_evaluation() {
        let spec = Arc::new(toy_conv_spec(FilterSupport::sym_3x3(), Padding::Circular).unwrap());
        let mut s = Stream::new(15, 0, Purpose::Init);
        let members: Vec<ParamPoint<f64>> = (0..5)
            .map(|_| {
                ParamPoint::from_coords(
                    &spec.space,
                    (0..spec.space.dim()).map(|_| s.next_gaussian()).collect::<Vec<f64>>(),
                )
            })
            .collect();
        let ens = Ensemble::new(spec, members, prov(5)).unwrap();
        let mut data = Stream::new(17, 0, Purpose::Data);
        let images = Batch::from_data(
            16,
            Shape::new(1, 8, 8),
            (0..16 * 64).map(|_| data.next_f64() as f32).collect::<Vec<f32>>(),
        )
        .unwrap();
        let by_prefix = mean_kl_for_prefixes(&ens, &images, &[2, 5]).unwrap();
        let full = evaluate(&ens, &images).unwrap();
        assert!((by_prefix[1] - full.sym_kl_log10).abs() < 1e-9);
        let two = Ensemble::new(ens.spec.clone(), ens.members[..2].to_vec(), prov(2)).unwrap();
        let two_eval = evaluate(&two, &images).unwrap();
        assert!((by_prefix[0] - two_eval.sym_kl_log10).abs() < 1e-9);
    }

    #[test]
    fn empty_evaluation_rejected() {
        let spec = dense_logit_spec(Shape::new(1, 2, 2), 3);
        let ens = Ensemble::new(
            spec.clone(),
            vec![ParamPoint::from_coords(&spec.space, vec![0.0; 12])],
            prov(1),
        )
        .unwrap();
        let images = Batch::zeros(0, Shape::new(1, 2, 2));
        assert!(evaluate(&ens, &images).is_err());
    }
}
