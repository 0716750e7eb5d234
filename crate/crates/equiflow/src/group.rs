//! Finite groups and unitary representations on layer spaces.
//!
//! Groups are stored as Cayley tables; elements are indices into the
//! table. Representations are kept as structured actions (pixel
//! permutations, channel permutations, small explicit matrices) and
//! densified on demand for checker code.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{rot90_square, Shape};
use crate::DENSE_CAP;

/// A finite group presented by its multiplication table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteGroup {
    order: usize,
    /// Row-major `order x order`: `table[a * order + b] = a * b`.
    table: Vec<usize>,
    identity: usize,
    inverse: Vec<usize>,
}

impl FiniteGroup {
    /// The cyclic group of order `n` with `i * j = (i + j) mod n`.
    pub fn cyclic(n: usize) -> Result<Arc<Self>> {
        if n == 0 {
            return Err(Error::InvalidArgument("cyclic group order must be >= 1".into()));
        }
        let mut table = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                table[i * n + j] = (i + j) % n;
            }
        }
        let inverse = (0..n).map(|i| (n - i) % n).collect();
        let g = FiniteGroup {
            order: n,
            table,
            identity: 0,
            inverse,
        };
        g.verify()?;
        Ok(Arc::new(g))
    }

    /// Extension point for permutation-presented groups: accepts any
    /// Cayley table and validates the axioms exhaustively.
    pub fn from_table(table: Vec<usize>, identity: usize, inverse: Vec<usize>) -> Result<Arc<Self>> {
        let order = inverse.len();
        if table.len() != order * order || identity >= order {
            return Err(Error::InvalidArgument("malformed group table".into()));
        }
        let g = FiniteGroup {
            order,
            table,
            identity,
            inverse,
        };
        g.verify()?;
        Ok(Arc::new(g))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> usize {
        self.identity
    }

    #[inline]
    pub fn mul(&self, a: usize, b: usize) -> usize {
        self.table[a * self.order + b]
    }

    #[inline]
    pub fn inv(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn elements(&self) -> Range<usize> {
        0..self.order
    }

    /// Exhaustive check of associativity, identity, inverses, and the
    /// Latin-square property (each row and column of the table is a
    /// permutation, which makes the uniform distribution Haar).
    pub fn verify(&self) -> Result<()> {
        let n = self.order;
        if n > 64 {
            return Err(Error::Capacity(format!(
                "exhaustive group verification is limited to order <= 64, got {n}"
            )));
        }
        for v in &self.table {
            if *v >= n {
                return Err(Error::InvalidArgument("table entry out of range".into()));
            }
        }
        for a in 0..n {
            if self.mul(self.identity, a) != a || self.mul(a, self.identity) != a {
                return Err(Error::InvalidArgument(format!("identity fails at {a}")));
            }
            if self.mul(a, self.inv(a)) != self.identity || self.mul(self.inv(a), a) != self.identity {
                return Err(Error::InvalidArgument(format!("inverse fails at {a}")));
            }
            let mut seen_row = vec![false; n];
            let mut seen_col = vec![false; n];
            for b in 0..n {
                seen_row[self.mul(a, b)] = true;
                seen_col[self.mul(b, a)] = true;
            }
            if seen_row.iter().any(|s| !s) || seen_col.iter().any(|s| !s) {
                return Err(Error::InvalidArgument(format!(
                    "row or column {a} of the table is not a permutation"
                )));
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if self.mul(self.mul(a, b), c) != self.mul(a, self.mul(b, c)) {
                        return Err(Error::InvalidArgument(format!(
                            "associativity fails at ({a}, {b}, {c})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum RepKind {
    /// Every element acts as the identity.
    Trivial,
    /// Element `k` rotates every channel by `k * (4 / |G|)` counterclockwise
    /// quarter turns. Requires a cyclic group of order 1, 2, or 4 and a
    /// square spatial grid.
    PixelRot,
    /// Element `k` shifts the channel index by `k` within consecutive
    /// blocks of `block` channels; spatial positions are untouched.
    ChannelShift { block: usize },
    /// Explicit per-element matrices (row-major `dim x dim`), for small
    /// spaces such as the reflection action of the 2-d toy.
    Matrix { mats: Vec<Vec<f64>> },
    /// Channel mixing composed with per-channel rotation: the spatial
    /// representation acts first, then the channel representation mixes
    /// the resulting images as if they were vector entries.
    Product {
        channel: Box<UnitaryRep>,
        spatial: Box<UnitaryRep>,
    },
}

/// A unitary representation of a finite group on a layer space.
#[derive(Debug, Clone)]
pub struct UnitaryRep {
    group: Arc<FiniteGroup>,
    shape: Shape,
    kind: RepKind,
}

impl UnitaryRep {
    /// Every element maps to the identity.
    pub fn trivial(group: Arc<FiniteGroup>, dim: usize) -> Self {
        UnitaryRep {
            group,
            shape: Shape::new(dim, 1, 1),
            kind: RepKind::Trivial,
        }
    }

    /// Rotation action on channel stacks of square images. Element 1 of
    /// C4 rotates counterclockwise; this orientation is fixed once here
    /// and shared by augmentation, filter rotation, and the metrics.
    pub fn rotation(group: Arc<FiniteGroup>, channels: usize, height: usize, width: usize) -> Result<Self> {
        if height != width {
            return Err(Error::ShapeMismatch(format!(
                "rotation representation needs square images, got {height}x{width}"
            )));
        }
        if !matches!(group.order(), 1 | 2 | 4) {
            return Err(Error::InvalidArgument(format!(
                "rotation representation needs a cyclic group of order 1, 2, or 4, got {}",
                group.order()
            )));
        }
        Ok(UnitaryRep {
            group,
            shape: Shape::new(channels, height, width),
            kind: RepKind::PixelRot,
        })
    }

    /// Cyclic shift of channel indices in blocks of `group.order()`.
    pub fn channel_shift(group: Arc<FiniteGroup>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = group.order();
        if channels % n != 0 {
            return Err(Error::ShapeMismatch(format!(
                "channel count {channels} is not a multiple of the group order {n}"
            )));
        }
        Ok(UnitaryRep {
            group,
            shape: Shape::new(channels, height, width),
            kind: RepKind::ChannelShift { block: n },
        })
    }

    /// Explicit matrices, one per element.
    pub fn from_matrices(group: Arc<FiniteGroup>, dim: usize, mats: Vec<Vec<f64>>) -> Result<Self> {
        if mats.len() != group.order() || mats.iter().any(|m| m.len() != dim * dim) {
            return Err(Error::ShapeMismatch("need one dim x dim matrix per element".into()));
        }
        Ok(UnitaryRep {
            group,
            shape: Shape::new(dim, 1, 1),
            kind: RepKind::Matrix { mats },
        })
    }

    /// Combined action: rotate each channel image, then mix the channels.
    pub fn product(channel: UnitaryRep, spatial: UnitaryRep) -> Result<Self> {
        if channel.group != spatial.group {
            return Err(Error::InvalidArgument("product factors must share the group".into()));
        }
        if channel.shape.len() != spatial.shape.c {
            return Err(Error::ShapeMismatch(format!(
                "channel factor dim {} must equal the spatial channel count {}",
                channel.shape.len(),
                spatial.shape.c
            )));
        }
        let group = spatial.group.clone();
        let shape = spatial.shape;
        Ok(UnitaryRep {
            group,
            shape,
            kind: RepKind::Product {
                channel: Box::new(channel),
                spatial: Box::new(spatial),
            },
        })
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        &self.group
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_trivial_action(&self) -> bool {
        matches!(self.kind, RepKind::Trivial)
    }

    pub fn is_pure_rotation(&self) -> bool {
        matches!(self.kind, RepKind::PixelRot)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Quarter turns applied to each channel image by element `g`, if the
    /// action has a spatial rotation part.
    pub fn quarter_turns(&self, g: usize) -> usize {
        match &self.kind {
            RepKind::PixelRot => g * (4 / self.group.order()),
            RepKind::Product { spatial, .. } => spatial.quarter_turns(g),
            _ => 0,
        }
    }

    /// The channel-mixing matrix of element `g` (row-major c x c), or
    /// `None` when channels are not mixed.
    pub fn channel_matrix(&self, g: usize) -> Option<Vec<f64>> {
        match &self.kind {
            RepKind::Trivial | RepKind::PixelRot => None,
            RepKind::ChannelShift { block } => {
                let c = self.shape.c;
                let mut m = vec![0.0; c * c];
                for k in 0..c {
                    let b = k / block;
                    let src = b * block + (k % block + block - g % block) % block;
                    m[k * c + src] = 1.0;
                }
                Some(m)
            }
            RepKind::Matrix { mats } => Some(mats[g].clone()),
            RepKind::Product { channel, .. } => {
                let d = channel.dim();
                Some(channel.matrix_unchecked(g, d))
            }
        }
    }

    fn matrix_unchecked(&self, g: usize, dim: usize) -> Vec<f64> {
        let mut m = vec![0.0; dim * dim];
        let mut basis = vec![0.0; dim];
        let mut col = vec![0.0; dim];
        for j in 0..dim {
            basis[j] = 1.0;
            self.apply(g, &basis, &mut col);
            for i in 0..dim {
                m[i * dim + j] = col[i];
            }
            basis[j] = 0.0;
        }
        m
    }

    /// Densifies element `g` to an explicit matrix; capped at `DENSE_CAP`.
    pub fn matrix(&self, g: usize) -> Result<Vec<f64>> {
        let dim = self.dim();
        if dim > DENSE_CAP {
            return Err(Error::Capacity(format!(
                "dense representation matrix of dim {dim} exceeds the cap {DENSE_CAP}"
            )));
        }
        Ok(self.matrix_unchecked(g, dim))
    }

    /// Applies element `g` to a flat tensor.
    pub fn apply<F: Scalar>(&self, g: usize, x: &[F], out: &mut [F]) {
        let shape = self.shape;
        debug_assert_eq!(x.len(), shape.len());
        debug_assert_eq!(out.len(), shape.len());
        match &self.kind {
            RepKind::Trivial => out.copy_from_slice(x),
            RepKind::PixelRot => {
                let n = shape.h;
                let plane = n * n;
                let turns = self.quarter_turns(g);
                for c in 0..shape.c {
                    rot90_square(&x[c * plane..(c + 1) * plane], &mut out[c * plane..(c + 1) * plane], n, turns);
                }
            }
            RepKind::ChannelShift { block } => {
                let plane = shape.h * shape.w;
                for k in 0..shape.c {
                    let b = k / block;
                    let src = b * block + (k % block + block - g % block) % block;
                    out[k * plane..(k + 1) * plane].copy_from_slice(&x[src * plane..(src + 1) * plane]);
                }
            }
            RepKind::Matrix { mats } => {
                let d = shape.len();
                let m = &mats[g];
                for i in 0..d {
                    let mut acc = F::ZERO;
                    for j in 0..d {
                        acc += F::from_f64(m[i * d + j]) * x[j];
                    }
                    out[i] = acc;
                }
            }
            RepKind::Product { channel, spatial } => {
                let mut tmp = vec![F::ZERO; x.len()];
                spatial.apply(g, x, &mut tmp);
                let plane = shape.h * shape.w;
                let c = shape.c;
                let m = channel.matrix_unchecked(g, c);
                for k in 0..c {
                    let row = &m[k * c..(k + 1) * c];
                    let dst = &mut out[k * plane..(k + 1) * plane];
                    dst.iter_mut().for_each(|v| *v = F::ZERO);
                    for (l, &coef) in row.iter().enumerate() {
                        if coef == 0.0 {
                            continue;
                        }
                        let cf = F::from_f64(coef);
                        let src = &tmp[l * plane..(l + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += cf * *s;
                        }
                    }
                }
            }
        }
    }

    /// The action of `g` as a source-index permutation `out[i] = x[perm[i]]`,
    /// when the action is a pure permutation.
    pub fn as_permutation(&self, g: usize) -> Option<Vec<usize>> {
        match &self.kind {
            RepKind::Trivial => Some((0..self.dim()).collect()),
            RepKind::PixelRot => {
                let n = self.shape.h;
                let plane = n * n;
                let turns = self.quarter_turns(g);
                let mut idx: Vec<usize> = (0..plane).collect();
                let mut rot = vec![0usize; plane];
                rot90_square(&idx, &mut rot, n, turns);
                idx.clear();
                for c in 0..self.shape.c {
                    idx.extend(rot.iter().map(|&p| c * plane + p));
                }
                Some(idx)
            }
            RepKind::ChannelShift { block } => {
                let plane = self.shape.h * self.shape.w;
                let mut idx = Vec::with_capacity(self.dim());
                for k in 0..self.shape.c {
                    let b = k / block;
                    let src = b * block + (k % block + block - g % block) % block;
                    idx.extend((0..plane).map(|p| src * plane + p));
                }
                Some(idx)
            }
            RepKind::Matrix { .. } => None,
            RepKind::Product { channel, spatial } => {
                let sp = spatial.as_permutation(g)?;
                let cp = channel.as_permutation(g)?;
                let plane = self.shape.h * self.shape.w;
                // out[k, p] = spatial-rotated[cp[k], p]
                let mut idx = Vec::with_capacity(self.dim());
                for k in 0..self.shape.c {
                    let src_c = cp[k];
                    idx.extend((0..plane).map(|p| sp[src_c * plane + p]));
                }
                Some(idx)
            }
        }
    }
}

/// Maximum over all element pairs of `|rep(g h) - rep(g) rep(h)|` applied
/// to random probe vectors, plus the explicit matrix comparison when the
/// space densifies. Zero for exact permutation actions.
pub fn homomorphism_residual(rep: &UnitaryRep) -> Result<f64> {
    let dim = rep.dim();
    if dim > DENSE_CAP {
        return Err(Error::Capacity(format!(
            "homomorphism check densifies; dim {dim} exceeds {DENSE_CAP}"
        )));
    }
    let group = rep.group().clone();
    let mut worst = 0.0f64;
    let mats: Vec<Vec<f64>> = group
        .elements()
        .map(|g| rep.matrix(g))
        .collect::<Result<_>>()?;
    for g in group.elements() {
        for h in group.elements() {
            let gh = group.mul(g, h);
            for i in 0..dim {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for k in 0..dim {
                        acc += mats[g][i * dim + k] * mats[h][k * dim + j];
                    }
                    worst = worst.max((acc - mats[gh][i * dim + j]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Maximum over elements of `|rep(g)^T rep(g) - I|`.
pub fn unitarity_residual(rep: &UnitaryRep) -> Result<f64> {
    let dim = rep.dim();
    if dim > DENSE_CAP {
        return Err(Error::Capacity(format!(
            "unitarity check densifies; dim {dim} exceeds {DENSE_CAP}"
        )));
    }
    let mut worst = 0.0f64;
    for g in rep.group().elements() {
        let m = rep.matrix(g)?;
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += m[k * dim + i] * m[k * dim + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TOL_EXACT;
    use proptest::prelude::*;

    #[test]
    fn cyclic_structure() {
        let g = FiniteGroup::cyclic(4).unwrap();
        // element 1 composed with itself four times returns to the identity
        let mut x = g.identity();
        for step in 0..4 {
            if step > 0 {
                assert_ne!(x, g.identity());
            }
            x = g.mul(x, 1);
        }
        assert_eq!(x, g.identity());

        let t = FiniteGroup::cyclic(1).unwrap();
        assert_eq!(t.mul(0, 0), 0);

        let c2 = FiniteGroup::cyclic(2).unwrap();
        assert_eq!(c2.mul(0, 0), 0);
        assert_eq!(c2.mul(0, 1), 1);
        assert_eq!(c2.mul(1, 0), 1);
        assert_eq!(c2.mul(1, 1), 0);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(FiniteGroup::cyclic(0).is_err());
    }

    #[test]
    fn rotation_rep_fixed_convention() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rep = UnitaryRep::rotation(c4, 1, 2, 2).unwrap();
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0f64; 4];
        rep.apply(1, &x, &mut out);
        assert_eq!(out, [2.0, 4.0, 1.0, 3.0]);

        // identity leaves inputs alone, four applications return them
        let mut id = [0.0f64; 4];
        rep.apply(0, &x, &mut id);
        assert_eq!(id, x);
        let mut cur = x;
        for _ in 0..4 {
            let mut next = [0.0f64; 4];
            rep.apply(1, &cur, &mut next);
            cur = next;
        }
        assert_eq!(cur, x);
    }

    #[test]
    fn rotation_rejects_non_square() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        assert!(UnitaryRep::rotation(c4, 1, 2, 3).is_err());
    }

    #[test]
    fn channel_shift_matches_stated_action() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rep = UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap();
        let v = [10.0f64, 11.0, 12.0, 13.0];
        let mut out = [0.0f64; 4];
        rep.apply(1, &v, &mut out);
        // (rho(k) v)_l = v_{l - k}
        assert_eq!(out, [13.0, 10.0, 11.0, 12.0]);

        let mut id = [0.0f64; 4];
        rep.apply(0, &v, &mut id);
        assert_eq!(id, v);

        let mut cur = v;
        for _ in 0..4 {
            let mut next = [0.0f64; 4];
            rep.apply(1, &cur, &mut next);
            cur = next;
        }
        assert_eq!(cur, v);

        assert!(UnitaryRep::channel_shift(c4, 6, 1, 1).is_err());
    }

    #[test]
    fn trivial_rep_laws_exact() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rep = UnitaryRep::trivial(c4, 10);
        assert_eq!(homomorphism_residual(&rep).unwrap(), 0.0);
        assert_eq!(unitarity_residual(&rep).unwrap(), 0.0);
    }

    #[test]
    fn builtin_rep_laws() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let rot = UnitaryRep::rotation(c4.clone(), 2, 4, 4).unwrap();
        let shift = UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap();
        let prod = UnitaryRep::product(
            UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap(),
            UnitaryRep::rotation(c4.clone(), 4, 3, 3).unwrap(),
        )
        .unwrap();
        for rep in [&rot, &shift, &prod] {
            assert!(homomorphism_residual(rep).unwrap() < TOL_EXACT);
            assert!(unitarity_residual(rep).unwrap() < TOL_EXACT);
        }
    }

    #[test]
    fn product_reduces_to_factors() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        // trivial channel factor: acts like per-channel rotation
        let prod = UnitaryRep::product(
            UnitaryRep::trivial(c4.clone(), 3),
            UnitaryRep::rotation(c4.clone(), 3, 4, 4).unwrap(),
        )
        .unwrap();
        let rot = UnitaryRep::rotation(c4.clone(), 3, 4, 4).unwrap();
        let x: Vec<f64> = (0..48).map(|v| v as f64).collect();
        for g in 0..4 {
            let mut a = vec![0.0; 48];
            let mut b = vec![0.0; 48];
            prod.apply(g, &x, &mut a);
            rot.apply(g, &x, &mut b);
            assert_eq!(a, b);
        }

        // 1x1 spatial grid: acts like the channel factor
        let prod = UnitaryRep::product(
            UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap(),
            UnitaryRep::rotation(c4.clone(), 4, 1, 1).unwrap(),
        )
        .unwrap();
        let shift = UnitaryRep::channel_shift(c4, 4, 1, 1).unwrap();
        let v = [5.0, 6.0, 7.0, 8.0];
        for g in 0..4 {
            let mut a = [0.0f64; 4];
            let mut b = [0.0f64; 4];
            prod.apply(g, &v, &mut a);
            shift.apply(g, &v, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn permutation_form_agrees_with_apply() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let prod = UnitaryRep::product(
            UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap(),
            UnitaryRep::rotation(c4, 4, 3, 3).unwrap(),
        )
        .unwrap();
        let x: Vec<f64> = (0..36).map(|v| v as f64 + 1.0).collect();
        for g in 0..4 {
            let perm = prod.as_permutation(g).unwrap();
            let mut direct = vec![0.0; 36];
            prod.apply(g, &x, &mut direct);
            let via_perm: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            assert_eq!(direct, via_perm);
        }
    }

    proptest! {
        #[test]
        fn cyclic_groups_verify(n in 1usize..24) {
            let g = FiniteGroup::cyclic(n).unwrap();
            prop_assert!(g.verify().is_ok());
        }

        // Left translation permutes the element set: uniform sampling is Haar.
        #[test]
        fn left_translation_is_permutation(n in 1usize..16, h in 0usize..16) {
            let h = h % n;
            let g = FiniteGroup::cyclic(n).unwrap();
            let mut seen = vec![false; n];
            for x in g.elements() {
                seen[g.mul(h, x)] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
