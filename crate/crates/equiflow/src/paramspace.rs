//! The ambient parameter space, affine architecture subspaces, lifted
//! representations, orthogonal projections, and the invariance checkers.
//!
//! An architecture is a list of layers; each layer contributes one block
//! `Hom(X_i, Z_i)` to the ambient space. An [`AffineSpace`] fixes a base
//! point and an orthonormal basis of the tangent space: one basis element
//! per masked filter cell and channel pair for convolutions, one per
//! matrix entry for dense layers. Coordinates are coefficients in that
//! basis, so coordinate updates realize projected gradient steps in the
//! ambient space.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::group::{FiniteGroup, UnitaryRep};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::{rot90_square, Shape};
use crate::DENSE_CAP;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Circular,
}

/// Which cells of a k x k filter may be nonzero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterSupport {
    size: usize,
    mask: Vec<bool>,
}

impl FilterSupport {
    pub fn new(size: usize, mask: Vec<bool>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::InvalidArgument(format!("filter size must be odd, got {size}")));
        }
        if mask.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "mask needs {} cells, got {}",
                size * size,
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("filter support must contain at least one cell".into()));
        }
        Ok(FilterSupport { size, mask })
    }

    pub fn full(size: usize) -> Result<Self> {
        Self::new(size, vec![true; size * size])
    }

    /// 3x3 five-cell cross.
    pub fn sym_3x3() -> Self {
        Self::from_ascii(".#.\n###\n.#.").unwrap()
    }

    /// 3x3 five-cell mask with the center moved into a corner.
    pub fn asym_3x3() -> Self {
        Self::from_ascii("##.\n#.#\n.#.").unwrap()
    }

    /// 5x5 thirteen-cell diamond.
    pub fn sym_5x5() -> Self {
        Self::from_ascii("..#..\n.###.\n#####\n.###.\n..#..").unwrap()
    }

    /// 5x5 thirteen-cell plus with a 2x2 block in the top-left corner.
    pub fn asym_5x5() -> Self {
        Self::from_ascii("###..\n###..\n#####\n..#..\n..#..").unwrap()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.size + col]
    }

    pub fn cell_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Supported cells as (row, col), row-major order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.size {
            for c in 0..self.size {
                if self.mask[r * self.size + c] {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// The mask rotated by counterclockwise quarter turns.
    pub fn rotate(&self, quarter_turns: usize) -> Self {
        let mut rotated = vec![false; self.mask.len()];
        rot90_square(&self.mask, &mut rotated, self.size, quarter_turns);
        FilterSupport {
            size: self.size,
            mask: rotated,
        }
    }

    /// Cells shared by the mask and all of its quarter-turn rotations.
    pub fn orbit_intersection(&self) -> Self {
        let mut mask = self.mask.clone();
        for t in 1..4 {
            let r = self.rotate(t);
            for (m, v) in mask.iter_mut().zip(&r.mask) {
                *m &= v;
            }
        }
        FilterSupport {
            size: self.size,
            mask,
        }
    }

    pub fn is_c4_symmetric(&self) -> bool {
        (1..4).all(|t| self.rotate(t) == *self)
    }

    /// ASCII grid with `#` supported and `.` unsupported.
    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for r in 0..self.size {
            for c in 0..self.size {
                s.push(if self.mask[r * self.size + c] { '#' } else { '.' });
            }
            if r + 1 < self.size {
                s.push('\n');
            }
        }
        s
    }

    pub fn from_ascii(s: &str) -> Result<Self> {
        let rows: Vec<&str> = s.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let size = rows.len();
        let mut mask = Vec::with_capacity(size * size);
        for row in &rows {
            if row.chars().count() != size {
                return Err(Error::Format(format!(
                    "support grid must be square, row {row:?} does not have {size} cells"
                )));
            }
            for ch in row.chars() {
                match ch {
                    '#' => mask.push(true),
                    '.' => mask.push(false),
                    other => {
                        return Err(Error::Format(format!("unexpected support cell {other:?}")));
                    }
                }
            }
        }
        Self::new(size, mask)
    }
}

#[derive(Clone, Debug)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        support: FilterSupport,
        padding: Padding,
    },
    Dense {
        in_len: usize,
        out_len: usize,
    },
}

#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
}

impl LayerSpec {
    /// Same-padding convolution on square images.
    pub fn conv(
        in_ch: usize,
        out_ch: usize,
        height: usize,
        width: usize,
        support: FilterSupport,
        padding: Padding,
    ) -> Result<Self> {
        if height != width {
            return Err(Error::ShapeMismatch(format!(
                "conv layers need square spatial dims, got {height}x{width}"
            )));
        }
        let k = support.size();
        match padding {
            Padding::Circular if k > height => {
                return Err(Error::InvalidArgument(format!(
                    "circular padding needs filter size {k} <= grid {height}, offsets would alias"
                )));
            }
            Padding::Zero if k / 2 >= height => {
                return Err(Error::InvalidArgument(format!(
                    "zero padding needs filter radius {} < grid {height}",
                    k / 2
                )));
            }
            _ => {}
        }
        Ok(LayerSpec {
            kind: LayerKind::Conv {
                in_ch,
                out_ch,
                support,
                padding,
            },
            in_shape: Shape::new(in_ch, height, width),
            out_shape: Shape::new(out_ch, height, width),
        })
    }

    /// Dense layer; consumes the flattened input stack.
    pub fn dense(in_shape: Shape, out_len: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense {
                in_len: in_shape.len(),
                out_len,
            },
            in_shape,
            out_shape: Shape::new(out_len, 1, 1),
        }
    }
}

/// One ambient block. `Dense` holds a full `out_len x in_len` matrix and
/// can represent any element of the block's Hom space; `Conv` holds an
/// `out_ch x in_ch x k x k` filter bank (the full grid, so rotated or
/// otherwise off-mask filters are representable too).
#[derive(Clone, Debug)]
pub enum BlockData<F> {
    Dense(Vec<F>),
    Conv(Vec<F>),
}

#[derive(Clone, Debug)]
pub struct AmbientOperator<F> {
    pub blocks: Vec<BlockData<F>>,
}

#[derive(Clone, Debug)]
enum Layout {
    Conv {
        offset: usize,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        /// (dy, dx, index into the k*k grid) per supported cell.
        cells: Vec<(isize, isize, usize)>,
        /// Frobenius norm of the ambient operator of a unit filter cell.
        norms: Vec<f64>,
    },
    Dense {
        offset: usize,
        out_len: usize,
        in_len: usize,
    },
}

impl Layout {
    fn coord_count(&self) -> usize {
        match self {
            Layout::Conv {
                out_ch, in_ch, cells, ..
            } => out_ch * in_ch * cells.len(),
            Layout::Dense { out_len, in_len, .. } => out_len * in_len,
        }
    }
}

/// An affine architecture space: base point plus orthonormal tangent basis.
#[derive(Clone, Debug)]
pub struct AffineSpace {
    layers: Vec<LayerSpec>,
    layouts: Vec<Layout>,
    base: AmbientOperator<f64>,
    p: usize,
}

fn cell_norm(padding: Padding, h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let count = match padding {
        Padding::Circular => h * w,
        Padding::Zero => (h - dy.unsigned_abs()) * (w - dx.unsigned_abs()),
    };
    (count as f64).sqrt()
}

impl AffineSpace {
    /// Space with base point zero (always G-equivariant).
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut layouts = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for layer in &layers {
            let layout = match &layer.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    support,
                    padding,
                } => {
                    let k = support.size();
                    let r = (k / 2) as isize;
                    let cells: Vec<(isize, isize, usize)> = support
                        .cells()
                        .into_iter()
                        .map(|(row, col)| (row as isize - r, col as isize - r, row * k + col))
                        .collect();
                    let norms = cells
                        .iter()
                        .map(|&(dy, dx, _)| cell_norm(*padding, layer.in_shape.h, layer.in_shape.w, dy, dx))
                        .collect();
                    Layout::Conv {
                        offset,
                        out_ch: *out_ch,
                        in_ch: *in_ch,
                        k,
                        cells,
                        norms,
                    }
                }
                LayerKind::Dense { in_len, out_len } => Layout::Dense {
                    offset,
                    out_len: *out_len,
                    in_len: *in_len,
                },
            };
            offset += layout.coord_count();
            layouts.push(layout);
        }
        let base = AmbientOperator {
            blocks: layers
                .iter()
                .map(|l| match &l.kind {
                    LayerKind::Conv { in_ch, out_ch, support, .. } => {
                        BlockData::Conv(vec![0.0; out_ch * in_ch * support.size() * support.size()])
                    }
                    LayerKind::Dense { in_len, out_len } => BlockData::Dense(vec![0.0; out_len * in_len]),
                })
                .collect(),
        };
        Ok(AffineSpace {
            layers,
            layouts,
            base,
            p: offset,
        })
    }

    /// Replaces the base point. The base must lie in the space itself;
    /// its G-equivariance is the caller's claim and can be audited with
    /// [`lifted_apply`].
    pub fn with_base(mut self, base: AmbientOperator<f64>) -> Result<Self> {
        self.validate_op(&base)?;
        for (layer, block) in self.layers.iter().zip(&base.blocks) {
            if let (LayerKind::Conv { support, .. }, BlockData::Conv(w)) = (&layer.kind, block) {
                let k = support.size();
                for idx in 0..k * k {
                    let (r, c) = (idx / k, idx % k);
                    if !support.contains(r, c) {
                        let (out_ch, in_ch) = match &layer.kind {
                            LayerKind::Conv { in_ch, out_ch, .. } => (*out_ch, *in_ch),
                            _ => unreachable!(),
                        };
                        for oc in 0..out_ch {
                            for ic in 0..in_ch {
                                if w[(oc * in_ch + ic) * k * k + idx] != 0.0 {
                                    return Err(Error::InvalidArgument(
                                        "base point has energy outside the filter support".into(),
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        self.base = base;
        Ok(self)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn base(&self) -> &AmbientOperator<f64> {
        &self.base
    }

    /// Coordinate dimension p.
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn validate_op<F: Scalar>(&self, op: &AmbientOperator<F>) -> Result<()> {
        if op.blocks.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "operator has {} blocks, space has {} layers",
                op.blocks.len(),
                self.layers.len()
            )));
        }
        for (layer, block) in self.layers.iter().zip(&op.blocks) {
            let (in_len, out_len) = (layer.in_shape.len(), layer.out_shape.len());
            match (block, &layer.kind) {
                (BlockData::Dense(w), _) if w.len() == out_len * in_len => {}
                (BlockData::Conv(w), LayerKind::Conv { in_ch, out_ch, support, .. })
                    if w.len() == out_ch * in_ch * support.size() * support.size() => {}
                _ => {
                    return Err(Error::ShapeMismatch("block does not match its layer".into()));
                }
            }
        }
        Ok(())
    }

    fn tangent_expand<F: Scalar>(&self, coords: &[F]) -> AmbientOperator<F> {
        debug_assert_eq!(coords.len(), self.p);
        let blocks = self
            .layouts
            .iter()
            .map(|layout| match layout {
                Layout::Conv {
                    offset,
                    out_ch,
                    in_ch,
                    k,
                    cells,
                    norms,
                } => {
                    let kk = k * k;
                    let mut w = vec![F::ZERO; out_ch * in_ch * kk];
                    let ncells = cells.len();
                    for oc in 0..*out_ch {
                        for ic in 0..*in_ch {
                            let pair = oc * in_ch + ic;
                            for (ci, &(_, _, grid)) in cells.iter().enumerate() {
                                let c = coords[offset + pair * ncells + ci];
                                w[pair * kk + grid] = c * F::from_f64(1.0 / norms[ci]);
                            }
                        }
                    }
                    BlockData::Conv(w)
                }
                Layout::Dense { offset, out_len, in_len } => {
                    BlockData::Dense(coords[*offset..offset + out_len * in_len].to_vec())
                }
            })
            .collect();
        AmbientOperator { blocks }
    }

    /// A = base + L c.
    pub fn expand<F: Scalar>(&self, coords: &[F]) -> AmbientOperator<F> {
        let mut op = self.tangent_expand(coords);
        for (block, base) in op.blocks.iter_mut().zip(&self.base.blocks) {
            match (block, base) {
                (BlockData::Conv(w), BlockData::Conv(b)) | (BlockData::Dense(w), BlockData::Dense(b)) => {
                    for (v, &bv) in w.iter_mut().zip(b) {
                        *v += F::from_f64(bv);
                    }
                }
                _ => unreachable!("base matches space structure"),
            }
        }
        op
    }

    /// Raw tangent coordinates of an operator, ignoring the base point.
    fn tangent_coords<F: Scalar>(&self, op: &AmbientOperator<F>) -> Result<Vec<F>> {
        self.validate_op(op)?;
        let mut coords = vec![F::ZERO; self.p];
        for ((layer, layout), block) in self.layers.iter().zip(&self.layouts).zip(&op.blocks) {
            match layout {
                Layout::Conv {
                    offset,
                    out_ch,
                    in_ch,
                    k,
                    cells,
                    norms,
                } => {
                    let kk = k * k;
                    let ncells = cells.len();
                    match block {
                        BlockData::Conv(w) => {
                            for oc in 0..*out_ch {
                                for ic in 0..*in_ch {
                                    let pair = oc * in_ch + ic;
                                    for (ci, &(_, _, grid)) in cells.iter().enumerate() {
                                        coords[offset + pair * ncells + ci] =
                                            w[pair * kk + grid] * F::from_f64(norms[ci]);
                                    }
                                }
                            }
                        }
                        BlockData::Dense(m) => {
                            // Inner product with each basis element: sum the
                            // matrix entries along the cell's shifted diagonal.
                            let (h, wd, padding) = match &layer.kind {
                                LayerKind::Conv { padding, .. } => {
                                    (layer.in_shape.h, layer.in_shape.w, *padding)
                                }
                                _ => unreachable!(),
                            };
                            let in_len = layer.in_shape.len();
                            let plane = h * wd;
                            for oc in 0..*out_ch {
                                for ic in 0..*in_ch {
                                    let pair = oc * in_ch + ic;
                                    for (ci, &(dy, dx, _)) in cells.iter().enumerate() {
                                        let mut acc = F::ZERO;
                                        for y in 0..h as isize {
                                            for x in 0..wd as isize {
                                                let (sy, sx) = (y + dy, x + dx);
                                                let (sy, sx) = match padding {
                                                    Padding::Circular => {
                                                        (sy.rem_euclid(h as isize), sx.rem_euclid(wd as isize))
                                                    }
                                                    Padding::Zero => {
                                                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                                            continue;
                                                        }
                                                        (sy, sx)
                                                    }
                                                };
                                                let row = oc * plane + (y as usize) * wd + x as usize;
                                                let col = ic * plane + (sy as usize) * wd + sx as usize;
                                                acc += m[row * in_len + col];
                                            }
                                        }
                                        coords[offset + pair * ncells + ci] = acc * F::from_f64(1.0 / norms[ci]);
                                    }
                                }
                            }
                        }
                    }
                }
                Layout::Dense { offset, out_len, in_len } => match block {
                    BlockData::Dense(m) => {
                        coords[*offset..offset + out_len * in_len].copy_from_slice(m);
                    }
                    BlockData::Conv(_) => {
                        return Err(Error::ShapeMismatch(
                            "conv block supplied for a dense layer".into(),
                        ));
                    }
                },
            }
        }
        Ok(coords)
    }

    /// c = L*(M - base).
    pub fn coords_of<F: Scalar>(&self, op: &AmbientOperator<F>) -> Result<Vec<F>> {
        let mut coords = self.tangent_coords(op)?;
        let base_coords = self.tangent_coords(&cast_op::<f64, F>(&self.base))?;
        for (c, b) in coords.iter_mut().zip(&base_coords) {
            *c -= *b;
        }
        Ok(coords)
    }

    /// Affine orthogonal projection onto the space: base + L L* (M - base).
    pub fn project<F: Scalar>(&self, op: &AmbientOperator<F>) -> Result<AmbientOperator<F>> {
        Ok(self.expand(&self.coords_of(op)?))
    }

    /// Linear orthogonal projection onto the tangent space.
    pub fn project_tangent<F: Scalar>(&self, op: &AmbientOperator<F>) -> Result<AmbientOperator<F>> {
        Ok(self.tangent_expand(&self.tangent_coords(op)?))
    }

    /// Frobenius inner product of two ambient operators.
    pub fn ambient_dot<F: Scalar>(&self, a: &AmbientOperator<F>, b: &AmbientOperator<F>) -> Result<f64> {
        self.validate_op(a)?;
        self.validate_op(b)?;
        let mut acc = 0.0f64;
        for ((layer, ba), bb) in self.layers.iter().zip(&a.blocks).zip(&b.blocks) {
            acc += match (ba, bb) {
                (BlockData::Dense(x), BlockData::Dense(y)) => {
                    x.iter().zip(y).map(|(u, v)| u.to_f64() * v.to_f64()).sum::<f64>()
                }
                (BlockData::Conv(x), BlockData::Conv(y)) => {
                    let (h, w, padding, in_ch, out_ch, k) = match &layer.kind {
                        LayerKind::Conv {
                            in_ch,
                            out_ch,
                            support,
                            padding,
                        } => (
                            layer.in_shape.h,
                            layer.in_shape.w,
                            *padding,
                            *in_ch,
                            *out_ch,
                            support.size(),
                        ),
                        _ => unreachable!(),
                    };
                    let kk = k * k;
                    let r = (k / 2) as isize;
                    let mut s = 0.0;
                    for idx in 0..kk {
                        let dy = (idx / k) as isize - r;
                        let dx = (idx % k) as isize - r;
                        let count = cell_norm(padding, h, w, dy, dx).powi(2);
                        for pair in 0..out_ch * in_ch {
                            s += count * x[pair * kk + idx].to_f64() * y[pair * kk + idx].to_f64();
                        }
                    }
                    s
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "mixed dense/conv blocks in ambient_dot; densify first".into(),
                    ));
                }
            };
        }
        Ok(acc)
    }

    /// Frobenius distance, computed structurally.
    pub fn ambient_distance<F: Scalar>(&self, a: &AmbientOperator<F>, b: &AmbientOperator<F>) -> Result<f64> {
        let mut acc = 0.0f64;
        for ((layer, ba), bb) in self.layers.iter().zip(&a.blocks).zip(&b.blocks) {
            match (ba, bb) {
                (BlockData::Dense(x), BlockData::Dense(y)) => {
                    for (u, v) in x.iter().zip(y) {
                        let d = u.to_f64() - v.to_f64();
                        acc += d * d;
                    }
                }
                (BlockData::Conv(x), BlockData::Conv(y)) => {
                    let (h, w, padding, in_ch, out_ch, k) = match &layer.kind {
                        LayerKind::Conv {
                            in_ch,
                            out_ch,
                            support,
                            padding,
                        } => (
                            layer.in_shape.h,
                            layer.in_shape.w,
                            *padding,
                            *in_ch,
                            *out_ch,
                            support.size(),
                        ),
                        _ => unreachable!(),
                    };
                    let kk = k * k;
                    let r = (k / 2) as isize;
                    for idx in 0..kk {
                        let dy = (idx / k) as isize - r;
                        let dx = (idx % k) as isize - r;
                        let count = cell_norm(padding, h, w, dy, dx).powi(2);
                        for pair in 0..out_ch * in_ch {
                            let d = x[pair * kk + idx].to_f64() - y[pair * kk + idx].to_f64();
                            acc += count * d * d;
                        }
                    }
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "mixed dense/conv blocks in ambient_distance".into(),
                    ));
                }
            }
        }
        Ok(acc.sqrt())
    }

    /// Standard-normal coordinates; the ambient point is base + L c.
    pub fn init_gaussian_coords(&self, stream: &mut Stream) -> Vec<f64> {
        (0..self.p).map(|_| stream.next_gaussian()).collect()
    }

    /// Maps per-entry derivatives of the block parameterizations (filter
    /// cells, matrix entries) to the coordinate gradient L* grad. A filter
    /// cell is shared by `norm^2` ambient entries, so its coordinate
    /// component is the cell derivative divided by the cell norm.
    pub fn entry_grads_to_coords<F: Scalar>(&self, grads: &AmbientOperator<F>) -> Result<Vec<F>> {
        self.validate_op(grads)?;
        let mut coords = vec![F::ZERO; self.p];
        for (layout, block) in self.layouts.iter().zip(&grads.blocks) {
            match (layout, block) {
                (
                    Layout::Conv {
                        offset,
                        out_ch,
                        in_ch,
                        k,
                        cells,
                        norms,
                    },
                    BlockData::Conv(w),
                ) => {
                    let kk = k * k;
                    let ncells = cells.len();
                    for pair in 0..out_ch * in_ch {
                        for (ci, &(_, _, grid)) in cells.iter().enumerate() {
                            coords[offset + pair * ncells + ci] =
                                w[pair * kk + grid] * F::from_f64(1.0 / norms[ci]);
                        }
                    }
                }
                (Layout::Dense { offset, out_len, in_len }, BlockData::Dense(w)) => {
                    coords[*offset..offset + out_len * in_len].copy_from_slice(w);
                }
                _ => {
                    return Err(Error::ShapeMismatch(
                        "gradient blocks must match the space structure".into(),
                    ));
                }
            }
        }
        Ok(coords)
    }

    /// Per-coordinate filter-cell norms, in coordinate order. Dense
    /// coordinates have norm one.
    pub fn coordinate_cell(&self, coord: usize) -> CoordinateInfo {
        for (li, layout) in self.layouts.iter().enumerate() {
            match layout {
                Layout::Conv { offset, cells, in_ch, .. } => {
                    let count = layout.coord_count();
                    if coord >= *offset && coord < offset + count {
                        let local = coord - offset;
                        let ncells = cells.len();
                        let pair = local / ncells;
                        let cell = local % ncells;
                        let k = match &self.layers[li].kind {
                            LayerKind::Conv { support, .. } => support.size(),
                            _ => unreachable!(),
                        };
                        let grid = cells[cell].2;
                        return CoordinateInfo::ConvCell {
                            layer: li,
                            out_ch: pair / in_ch,
                            in_ch: pair % in_ch,
                            row: grid / k,
                            col: grid % k,
                        };
                    }
                }
                Layout::Dense { offset, out_len, in_len } => {
                    let count = out_len * in_len;
                    if coord >= *offset && coord < offset + count {
                        let local = coord - offset;
                        return CoordinateInfo::DenseEntry {
                            layer: li,
                            row: local / in_len,
                            col: local % in_len,
                        };
                    }
                }
            }
        }
        unreachable!("coordinate {coord} out of range")
    }
}

/// Where a coordinate lives in the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordinateInfo {
    ConvCell {
        layer: usize,
        out_ch: usize,
        in_ch: usize,
        row: usize,
        col: usize,
    },
    DenseEntry {
        layer: usize,
        row: usize,
        col: usize,
    },
}

fn cast_op<F: Scalar, G: Scalar>(op: &AmbientOperator<F>) -> AmbientOperator<G> {
    AmbientOperator {
        blocks: op
            .blocks
            .iter()
            .map(|b| match b {
                BlockData::Dense(w) => BlockData::Dense(w.iter().map(|v| G::from_f64(v.to_f64())).collect()),
                BlockData::Conv(w) => BlockData::Conv(w.iter().map(|v| G::from_f64(v.to_f64())).collect()),
            })
            .collect(),
    }
}

/// Casts every block to another scalar type.
pub fn cast_operator<F: Scalar, G: Scalar>(op: &AmbientOperator<F>) -> AmbientOperator<G> {
    cast_op(op)
}

/// Densifies one block to a row-major `out_len x in_len` matrix.
pub fn densify_block<F: Scalar>(layer: &LayerSpec, block: &BlockData<F>) -> Result<Vec<f64>> {
    let in_len = layer.in_shape.len();
    let out_len = layer.out_shape.len();
    if in_len > DENSE_CAP || out_len > DENSE_CAP {
        return Err(Error::Capacity(format!(
            "dense form {out_len}x{in_len} exceeds the cap {DENSE_CAP}"
        )));
    }
    match block {
        BlockData::Dense(w) => Ok(w.iter().map(|v| v.to_f64()).collect()),
        BlockData::Conv(w) => {
            let (in_ch, out_ch, k, padding) = match &layer.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    support,
                    padding,
                } => (*in_ch, *out_ch, support.size(), *padding),
                _ => {
                    return Err(Error::ShapeMismatch("conv block on a dense layer".into()));
                }
            };
            let (h, wd) = (layer.in_shape.h, layer.in_shape.w);
            let plane = h * wd;
            let kk = k * k;
            let r = (k / 2) as isize;
            let mut m = vec![0.0; out_len * in_len];
            for oc in 0..out_ch {
                for ic in 0..in_ch {
                    let filt = &w[(oc * in_ch + ic) * kk..(oc * in_ch + ic + 1) * kk];
                    for idx in 0..kk {
                        let val = filt[idx].to_f64();
                        if val == 0.0 {
                            continue;
                        }
                        let dy = (idx / k) as isize - r;
                        let dx = (idx % k) as isize - r;
                        for y in 0..h as isize {
                            for x in 0..wd as isize {
                                let (sy, sx) = (y + dy, x + dx);
                                let (sy, sx) = match padding {
                                    Padding::Circular => {
                                        (sy.rem_euclid(h as isize), sx.rem_euclid(wd as isize))
                                    }
                                    Padding::Zero => {
                                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        (sy, sx)
                                    }
                                };
                                let row = oc * plane + (y as usize) * wd + x as usize;
                                let col = ic * plane + (sy as usize) * wd + sx as usize;
                                m[row * in_len + col] += val;
                            }
                        }
                    }
                }
            }
            Ok(m)
        }
    }
}

/// The per-layer input and output representations that lift to the
/// parameter space by conjugation.
#[derive(Clone, Debug)]
pub struct LayerReps {
    pub input: UnitaryRep,
    pub output: UnitaryRep,
}

#[derive(Clone, Debug)]
pub struct LiftedRep {
    pub layers: Vec<LayerReps>,
}

impl LiftedRep {
    pub fn new(layers: Vec<LayerReps>) -> Self {
        LiftedRep { layers }
    }

    /// Rotation representations on every space; the final output acts
    /// trivially when `trivial_output` is set (classification logits).
    pub fn rotation_stack(
        group: &Arc<FiniteGroup>,
        layers: &[LayerSpec],
        trivial_output: bool,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let input = rep_for_shape(group, layer.in_shape)?;
            let output = if trivial_output && i + 1 == layers.len() {
                UnitaryRep::trivial(group.clone(), layer.out_shape.len())
            } else {
                rep_for_shape(group, layer.out_shape)?
            };
            out.push(LayerReps { input, output });
        }
        Ok(LiftedRep::new(out))
    }

    pub fn validate(&self, layers: &[LayerSpec]) -> Result<()> {
        if self.layers.len() != layers.len() {
            return Err(Error::ShapeMismatch("one rep pair per layer required".into()));
        }
        let group = self.group();
        for (reps, layer) in self.layers.iter().zip(layers) {
            if reps.input.dim() != layer.in_shape.len() || reps.output.dim() != layer.out_shape.len() {
                return Err(Error::ShapeMismatch("rep dims do not match the layer".into()));
            }
            if reps.input.group() != group || reps.output.group() != group {
                return Err(Error::InvalidArgument("all reps must share one group".into()));
            }
        }
        Ok(())
    }

    pub fn group(&self) -> &Arc<FiniteGroup> {
        self.layers[0].input.group()
    }

    pub fn input_rep(&self) -> &UnitaryRep {
        &self.layers[0].input
    }

    pub fn output_rep(&self) -> &UnitaryRep {
        &self.layers.last().expect("nonempty").output
    }
}

fn rep_for_shape(group: &Arc<FiniteGroup>, shape: Shape) -> Result<UnitaryRep> {
    if shape.h == 1 && shape.w == 1 {
        Ok(UnitaryRep::trivial(group.clone(), shape.len()))
    } else {
        UnitaryRep::rotation(group.clone(), shape.c, shape.h, shape.w)
    }
}

fn channel_matrix_as_f<F: Scalar>(m: &[f64]) -> Vec<F> {
    m.iter().map(|&v| F::from_f64(v)).collect()
}

/// Applies the lifted representation of `g` to an operator:
/// each block maps to `rep_out(g) . block . rep_in(g)^-1`.
///
/// Conv blocks with matching spatial rotations on both sides stay conv
/// blocks (the filters rotate, channels mix); everything else goes
/// through the dense route, capacity permitting.
pub fn lifted_apply<F: Scalar>(
    layers: &[LayerSpec],
    rep: &LiftedRep,
    g: usize,
    op: &AmbientOperator<F>,
) -> Result<AmbientOperator<F>> {
    rep.validate(layers)?;
    if op.blocks.len() != layers.len() {
        return Err(Error::ShapeMismatch("operator blocks do not match layers".into()));
    }
    let group = rep.group().clone();
    let ginv = group.inv(g);
    let blocks = layers
        .iter()
        .zip(&rep.layers)
        .zip(&op.blocks)
        .map(|((layer, reps), block)| -> Result<BlockData<F>> {
            match block {
                BlockData::Conv(w) => {
                    let (in_ch, out_ch, k) = match &layer.kind {
                        LayerKind::Conv { in_ch, out_ch, support, .. } => {
                            (*in_ch, *out_ch, support.size())
                        }
                        _ => {
                            return Err(Error::ShapeMismatch("conv block on dense layer".into()));
                        }
                    };
                    let t_in = reps.input.quarter_turns(g);
                    let t_out = reps.output.quarter_turns(g);
                    if t_in != t_out {
                        let dense = densify_block(layer, block)?;
                        let conj = conjugate_dense(&dense, &reps.output, &reps.input, g, ginv)?;
                        return Ok(BlockData::Dense(conj.into_iter().map(F::from_f64).collect()));
                    }
                    let kk = k * k;
                    // rotate every filter plane
                    let mut rotated = vec![F::ZERO; w.len()];
                    for pair in 0..out_ch * in_ch {
                        rot90_square(&w[pair * kk..(pair + 1) * kk], &mut rotated[pair * kk..(pair + 1) * kk], k, t_out);
                    }
                    // mix output channels, then input channels
                    let mixed_out = match reps.output.channel_matrix(g) {
                        None => rotated,
                        Some(m) => {
                            let mf: Vec<F> = channel_matrix_as_f(&m);
                            let mut out = vec![F::ZERO; rotated.len()];
                            for kout in 0..out_ch {
                                for co in 0..out_ch {
                                    let coef = mf[kout * out_ch + co];
                                    if coef.to_f64() == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..in_ch {
                                        let src = (co * in_ch + ic) * kk;
                                        let dst = (kout * in_ch + ic) * kk;
                                        for i in 0..kk {
                                            out[dst + i] += coef * rotated[src + i];
                                        }
                                    }
                                }
                            }
                            out
                        }
                    };
                    let mixed = match reps.input.channel_matrix(ginv) {
                        None => mixed_out,
                        Some(m) => {
                            let mf: Vec<F> = channel_matrix_as_f(&m);
                            let mut out = vec![F::ZERO; mixed_out.len()];
                            for oc in 0..out_ch {
                                for lin in 0..in_ch {
                                    for ci in 0..in_ch {
                                        let coef = mf[ci * in_ch + lin];
                                        if coef.to_f64() == 0.0 {
                                            continue;
                                        }
                                        let src = (oc * in_ch + ci) * kk;
                                        let dst = (oc * in_ch + lin) * kk;
                                        for i in 0..kk {
                                            out[dst + i] += coef * mixed_out[src + i];
                                        }
                                    }
                                }
                            }
                            out
                        }
                    };
                    Ok(BlockData::Conv(mixed))
                }
                BlockData::Dense(w) => {
                    let out_len = layer.out_shape.len();
                    let in_len = layer.in_shape.len();
                    match (reps.output.as_permutation(g), reps.input.as_permutation(g)) {
                        (Some(po), Some(pi)) => {
                            let mut out = vec![F::ZERO; w.len()];
                            for i in 0..out_len {
                                let src_row = po[i] * in_len;
                                let dst_row = i * in_len;
                                for j in 0..in_len {
                                    out[dst_row + j] = w[src_row + pi[j]];
                                }
                            }
                            Ok(BlockData::Dense(out))
                        }
                        _ => {
                            let dense: Vec<f64> = w.iter().map(|v| v.to_f64()).collect();
                            let conj = conjugate_dense(&dense, &reps.output, &reps.input, g, ginv)?;
                            Ok(BlockData::Dense(conj.into_iter().map(F::from_f64).collect()))
                        }
                    }
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AmbientOperator { blocks })
}

/// `rep_out(g) . M . rep_in(g^-1)` with explicit matrices.
fn conjugate_dense(
    m: &[f64],
    out_rep: &UnitaryRep,
    in_rep: &UnitaryRep,
    g: usize,
    ginv: usize,
) -> Result<Vec<f64>> {
    let out_len = out_rep.dim();
    let in_len = in_rep.dim();
    let mo = out_rep.matrix(g)?;
    let mi = in_rep.matrix(ginv)?;
    // tmp = M . mi
    let mut tmp = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        for l in 0..in_len {
            let v = m[i * in_len + l];
            if v == 0.0 {
                continue;
            }
            for j in 0..in_len {
                tmp[i * in_len + j] += v * mi[l * in_len + j];
            }
        }
    }
    let mut out = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        for l in 0..out_len {
            let v = mo[i * out_len + l];
            if v == 0.0 {
                continue;
            }
            for j in 0..in_len {
                out[i * in_len + j] += v * tmp[l * in_len + j];
            }
        }
    }
    Ok(out)
}

/// Outcome of the basis-element invariance audit.
#[derive(Clone, Debug)]
pub struct InvarianceReport {
    /// Per-element max over basis elements of the escaped Frobenius mass.
    pub per_element: Vec<f64>,
    pub max_residual: f64,
    pub invariant: bool,
}

/// Audits `rho(g) L subset L` on densified basis elements. The verdict is
/// deterministic: linearity makes basis elements sufficient.
pub fn check_g_invariance(space: &AffineSpace, rep: &LiftedRep) -> Result<InvarianceReport> {
    rep.validate(space.layers())?;
    let group = rep.group().clone();
    let mut per_element = vec![0.0f64; group.order()];
    for (li, (layer, reps)) in space.layers().iter().zip(&rep.layers).enumerate() {
        let basis = layer_basis_elements(space, li)?;
        if basis.is_empty() {
            continue;
        }
        if matches!(layer.kind, LayerKind::Dense { .. }) {
            // full Hom block: invariant under any rep pair, residual zero
            continue;
        }
        for g in group.elements() {
            for b in &basis {
                let dense_b = densify_block(layer, b)?;
                let moved = conjugate_dense(&dense_b, &reps.output, &reps.input, g, group.inv(g))?;
                // project the moved element back onto this layer's tangent block
                let probe = single_block_op(space, li, BlockData::Dense(moved.clone()));
                let proj = space.project_tangent(&probe)?;
                let dense_proj = densify_block(layer, &proj.blocks[li])?;
                let mut acc = 0.0;
                for (a, p) in moved.iter().zip(&dense_proj) {
                    let d = a - p;
                    acc += d * d;
                }
                per_element[g] = per_element[g].max(acc.sqrt());
            }
        }
    }
    let max_residual = per_element.iter().cloned().fold(0.0, f64::max);
    Ok(InvarianceReport {
        per_element,
        max_residual,
        invariant: max_residual < crate::TOL_PIPELINE,
    })
}

fn single_block_op<F: Scalar>(space: &AffineSpace, index: usize, block: BlockData<F>) -> AmbientOperator<F> {
    let blocks = space
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            if i == index {
                block.clone()
            } else {
                match &layer.kind {
                    LayerKind::Conv { in_ch, out_ch, support, .. } => {
                        BlockData::Conv(vec![F::ZERO; out_ch * in_ch * support.size() * support.size()])
                    }
                    LayerKind::Dense { in_len, out_len } => BlockData::Dense(vec![F::ZERO; out_len * in_len]),
                }
            }
        })
        .collect();
    AmbientOperator { blocks }
}

fn layer_basis_elements(space: &AffineSpace, index: usize) -> Result<Vec<BlockData<f64>>> {
    let layer = &space.layers()[index];
    match &layer.kind {
        LayerKind::Dense { .. } => Ok(Vec::new()),
        LayerKind::Conv { in_ch, out_ch, support, padding } => {
            let k = support.size();
            let kk = k * k;
            let r = (k / 2) as isize;
            let mut out = Vec::new();
            for oc in 0..*out_ch {
                for ic in 0..*in_ch {
                    for (row, col) in support.cells() {
                        let mut w = vec![0.0f64; out_ch * in_ch * kk];
                        let norm = cell_norm(
                            *padding,
                            layer.in_shape.h,
                            layer.in_shape.w,
                            row as isize - r,
                            col as isize - r,
                        );
                        w[(oc * in_ch + ic) * kk + row * k + col] = 1.0 / norm;
                        out.push(BlockData::Conv(w));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Random-probe check that the tangent projection commutes with the
/// lifted action; agrees with [`check_g_invariance`] in both directions.
pub fn check_projection_equivariance(
    space: &AffineSpace,
    rep: &LiftedRep,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    rep.validate(space.layers())?;
    let group = rep.group().clone();
    let mut stream = Stream::new(seed, 0, Purpose::Data);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let probe = AmbientOperator {
            blocks: space
                .layers()
                .iter()
                .map(|layer| {
                    let len = layer.out_shape.len() * layer.in_shape.len();
                    BlockData::Dense((0..len).map(|_| stream.next_gaussian()).collect())
                })
                .collect(),
        };
        let proj = dense_op(space, &space.project_tangent(&probe)?)?;
        for g in group.elements() {
            let moved = dense_lifted(space, rep, g, &probe)?;
            let proj_moved = dense_op(space, &space.project_tangent(&moved_op(space, &moved))?)?;
            let moved_proj = dense_lifted_from_dense(space, rep, g, &proj)?;
            let mut acc = 0.0;
            for (a, b) in proj_moved.iter().zip(&moved_proj) {
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    acc += d * d;
                }
            }
            worst = worst.max(acc.sqrt());
        }
    }
    Ok(worst)
}

fn dense_op(space: &AffineSpace, op: &AmbientOperator<f64>) -> Result<Vec<Vec<f64>>> {
    space
        .layers()
        .iter()
        .zip(&op.blocks)
        .map(|(layer, block)| densify_block(layer, block))
        .collect()
}

fn moved_op(space: &AffineSpace, dense_blocks: &[Vec<f64>]) -> AmbientOperator<f64> {
    AmbientOperator {
        blocks: space
            .layers()
            .iter()
            .zip(dense_blocks)
            .map(|(_, d)| BlockData::Dense(d.clone()))
            .collect(),
    }
}

fn dense_lifted(
    space: &AffineSpace,
    rep: &LiftedRep,
    g: usize,
    op: &AmbientOperator<f64>,
) -> Result<Vec<Vec<f64>>> {
    let group = rep.group().clone();
    space
        .layers()
        .iter()
        .zip(&rep.layers)
        .zip(&op.blocks)
        .map(|((layer, reps), block)| {
            let dense = densify_block(layer, block)?;
            conjugate_dense(&dense, &reps.output, &reps.input, g, group.inv(g))
        })
        .collect()
}

fn dense_lifted_from_dense(
    space: &AffineSpace,
    rep: &LiftedRep,
    g: usize,
    dense_blocks: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let group = rep.group().clone();
    space
        .layers()
        .iter()
        .zip(&rep.layers)
        .zip(dense_blocks)
        .map(|((_, reps), dense)| conjugate_dense(dense, &reps.output, &reps.input, g, group.inv(g)))
        .collect()
}

/// Compares the structured filter-rotation path of [`lifted_apply`] with
/// the explicit conjugation by dense representation matrices. Returns the
/// largest entrywise deviation over trials and group elements.
pub fn rotate_filter_identity_check(
    support: &FilterSupport,
    height: usize,
    padding: Padding,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let group = FiniteGroup::cyclic(4)?;
    let layer = LayerSpec::conv(2, 3, height, height, support.clone(), padding)?;
    let layers = vec![layer];
    let rep = LiftedRep::rotation_stack(&group, &layers, false)?;
    let kk = support.size() * support.size();
    let mut stream = Stream::new(seed, 0, Purpose::Data);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let filters: Vec<f64> = (0..3 * 2 * kk).map(|_| stream.next_gaussian()).collect();
        let op = AmbientOperator {
            blocks: vec![BlockData::Conv(filters)],
        };
        let dense = densify_block(&layers[0], &op.blocks[0])?;
        for g in group.elements() {
            let fast = lifted_apply(&layers, &rep, g, &op)?;
            let fast_dense = densify_block(&layers[0], &fast.blocks[0])?;
            let slow = conjugate_dense(
                &dense,
                &rep.layers[0].output,
                &rep.layers[0].input,
                g,
                group.inv(g),
            )?;
            for (a, b) in fast_dense.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Witness that a transformed basis filter leaves the support mask.
#[derive(Clone, Debug)]
pub struct EscapeWitness {
    pub element: usize,
    pub basis_channel: usize,
    pub basis_cell: (usize, usize),
    pub out_channel: usize,
    pub escaped_cell: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct EscapeReport {
    pub escaped: bool,
    pub witness: Option<EscapeWitness>,
}

/// Enumerates the supports of basis filter banks transformed by the
/// lifted action of a product representation (channel mixing composed
/// with rotation) and reports whether any transform leaves the mask.
pub fn appendix_escape_check(channel_rep: &UnitaryRep, support: &FilterSupport) -> Result<EscapeReport> {
    let group = channel_rep.group().clone();
    if !matches!(group.order(), 1 | 2 | 4) {
        return Err(Error::InvalidArgument(
            "escape check rotates filters; group order must divide 4".into(),
        ));
    }
    let d = channel_rep.dim();
    let k = support.size();
    for g in group.elements() {
        let turns = g * (4 / group.order());
        let mixing = channel_rep.matrix(g)?;
        for basis_channel in 0..d {
            for (row, col) in support.cells() {
                // the unit filter at (row, col) lands on the rotated cell
                let mut cell = vec![false; k * k];
                cell[row * k + col] = true;
                let mut moved = vec![false; k * k];
                rot90_square(&cell, &mut moved, k, turns);
                let (mr, mc) = (0..k * k)
                    .find(|&i| moved[i])
                    .map(|i| (i / k, i % k))
                    .expect("rotated cell exists");
                for out_channel in 0..d {
                    if mixing[out_channel * d + basis_channel].abs() <= f64::EPSILON {
                        continue;
                    }
                    if !support.contains(mr, mc) {
                        return Ok(EscapeReport {
                            escaped: true,
                            witness: Some(EscapeWitness {
                                element: g,
                                basis_channel,
                                basis_cell: (row, col),
                                out_channel,
                                escaped_cell: (mr, mc),
                            }),
                        });
                    }
                }
            }
        }
    }
    Ok(EscapeReport {
        escaped: false,
        witness: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{FiniteGroup, UnitaryRep};
    use crate::{TOL_EXACT, TOL_PIPELINE, TOL_VIOLATION};
    use proptest::prelude::*;

    #[test]
    fn builtin_masks_match_figures() {
        assert_eq!(FilterSupport::sym_3x3().to_ascii(), ".#.\n###\n.#.");
        assert_eq!(FilterSupport::asym_3x3().to_ascii(), "##.\n#.#\n.#.");
        assert_eq!(
            FilterSupport::sym_5x5().to_ascii(),
            "..#..\n.###.\n#####\n.###.\n..#.."
        );
        assert_eq!(
            FilterSupport::asym_5x5().to_ascii(),
            "###..\n###..\n#####\n..#..\n..#.."
        );
        assert_eq!(FilterSupport::sym_3x3().cell_count(), 5);
        assert_eq!(FilterSupport::asym_3x3().cell_count(), 5);
        assert_eq!(FilterSupport::sym_5x5().cell_count(), 13);
        assert_eq!(FilterSupport::asym_5x5().cell_count(), 13);
        assert!(FilterSupport::sym_3x3().is_c4_symmetric());
        assert!(FilterSupport::sym_5x5().is_c4_symmetric());
        assert!(!FilterSupport::asym_3x3().is_c4_symmetric());
        assert!(!FilterSupport::asym_5x5().is_c4_symmetric());
    }

    #[test]
    fn orbit_intersections_match_corner_zeroing() {
        let i3 = FilterSupport::asym_3x3().orbit_intersection();
        assert_eq!(i3.to_ascii(), ".#.\n#.#\n.#.");
        assert_eq!(i3.cell_count(), 4);
        assert!(!i3.contains(0, 0));

        let i5 = FilterSupport::asym_5x5().orbit_intersection();
        assert_eq!(i5.to_ascii(), "..#..\n..#..\n#####\n..#..\n..#..");
        assert_eq!(i5.cell_count(), 9);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(FilterSupport::asym_5x5().contains(r, c));
            assert!(!i5.contains(r, c));
        }

        // symmetric masks are their own intersection
        assert_eq!(FilterSupport::sym_3x3().orbit_intersection(), FilterSupport::sym_3x3());
    }

    #[test]
    fn rotated_asym_mask_is_the_rotated_set() {
        // the corner cell travels around the corners under rotation
        let asym = FilterSupport::asym_3x3();
        let r1 = asym.rotate(1);
        assert!(r1.contains(2, 0));
        assert!(!r1.contains(0, 0));
        assert_eq!(asym.rotate(4), asym);
    }

    #[test]
    fn support_rejects_bad_grids() {
        assert!(FilterSupport::new(2, vec![true; 4]).is_err());
        assert!(FilterSupport::new(3, vec![false; 9]).is_err());
        assert!(FilterSupport::from_ascii("##\n#.").is_err());
        assert!(FilterSupport::from_ascii(".#.\n#x#\n.#.").is_err());
    }

    fn conv_space(support: FilterSupport, n: usize, padding: Padding, in_ch: usize, out_ch: usize) -> AffineSpace {
        AffineSpace::new(vec![
            LayerSpec::conv(in_ch, out_ch, n, n, support, padding).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn project_fixes_space_members_and_is_idempotent() {
        let space = conv_space(FilterSupport::sym_3x3(), 6, Padding::Circular, 1, 2);
        let mut s = crate::rng::Stream::new(3, 0, crate::rng::Purpose::Data);
        let coords: Vec<f64> = (0..space.dim()).map(|_| s.next_gaussian()).collect();
        let m = space.expand(&coords);
        let proj = space.project(&m).unwrap();
        assert!(space.ambient_distance(&m, &proj).unwrap() < TOL_EXACT);
        let twice = space.project(&proj).unwrap();
        assert!(space.ambient_distance(&proj, &twice).unwrap() < TOL_EXACT);
    }

    /// Independent least-squares oracle: build the dense basis, solve the
    /// normal equations by Gaussian elimination without assuming the basis
    /// is orthonormal, and compare entrywise.
    #[test]
    fn projection_matches_normal_equations_oracle() {
        let space = conv_space(FilterSupport::sym_3x3(), 6, Padding::Circular, 1, 1);
        let layer = &space.layers()[0];
        let (in_len, out_len) = (layer.in_shape.len(), layer.out_shape.len());

        // raw (unnormalized) basis: unit filter per supported cell
        let k = 3;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (row, col) in FilterSupport::sym_3x3().cells() {
            let mut w = vec![0.0f64; k * k];
            w[row * k + col] = 1.0;
            let block = BlockData::Conv(w);
            basis.push(densify_block(layer, &block).unwrap());
        }
        let p = basis.len();

        let mut s = crate::rng::Stream::new(17, 0, crate::rng::Purpose::Data);
        for _ in 0..3 {
            let m: Vec<f64> = (0..out_len * in_len).map(|_| s.next_gaussian()).collect();
            // normal equations G c = b
            let mut g = vec![0.0f64; p * p];
            let mut b = vec![0.0f64; p];
            for i in 0..p {
                for j in 0..p {
                    g[i * p + j] = basis[i].iter().zip(&basis[j]).map(|(x, y)| x * y).sum();
                }
                b[i] = basis[i].iter().zip(&m).map(|(x, y)| x * y).sum();
            }
            // Gaussian elimination with partial pivoting
            let mut aug: Vec<f64> = vec![0.0; p * (p + 1)];
            for i in 0..p {
                for j in 0..p {
                    aug[i * (p + 1) + j] = g[i * p + j];
                }
                aug[i * (p + 1) + p] = b[i];
            }
            for col in 0..p {
                let mut piv = col;
                for r in col + 1..p {
                    if aug[r * (p + 1) + col].abs() > aug[piv * (p + 1) + col].abs() {
                        piv = r;
                    }
                }
                for j in 0..=p {
                    aug.swap(col * (p + 1) + j, piv * (p + 1) + j);
                }
                let d = aug[col * (p + 1) + col];
                for r in 0..p {
                    if r != col {
                        let f = aug[r * (p + 1) + col] / d;
                        for j in col..=p {
                            aug[r * (p + 1) + j] -= f * aug[col * (p + 1) + j];
                        }
                    }
                }
            }
            let coeffs: Vec<f64> = (0..p)
                .map(|i| aug[i * (p + 1) + p] / aug[i * (p + 1) + i])
                .collect();
            let mut oracle = vec![0.0f64; out_len * in_len];
            for (c, e) in coeffs.iter().zip(&basis) {
                for (o, v) in oracle.iter_mut().zip(e) {
                    *o += c * v;
                }
            }

            let probe = AmbientOperator {
                blocks: vec![BlockData::Dense(m.clone())],
            };
            let proj = space.project_tangent(&probe).unwrap();
            let proj_dense = densify_block(layer, &proj.blocks[0]).unwrap();
            for (a, o) in proj_dense.iter().zip(&oracle) {
                assert!((a - o).abs() < TOL_PIPELINE, "{a} vs {o}");
            }
        }
    }

    #[test]
    fn lifted_action_is_unitary_and_homomorphic() {
        let group = FiniteGroup::cyclic(4).unwrap();
        let space = conv_space(FilterSupport::asym_3x3(), 8, Padding::Circular, 2, 3);
        let rep = LiftedRep::rotation_stack(&group, space.layers(), false).unwrap();
        let mut s = crate::rng::Stream::new(5, 0, crate::rng::Purpose::Data);
        let coords: Vec<f64> = (0..space.dim()).map(|_| s.next_gaussian()).collect();
        let a = space.expand(&coords);
        let norm = space.ambient_dot(&a, &a).unwrap().sqrt();
        for g in group.elements() {
            let moved = lifted_apply(space.layers(), &rep, g, &a).unwrap();
            let moved_norm = space.ambient_dot(&moved, &moved).unwrap().sqrt();
            assert!((norm - moved_norm).abs() < TOL_PIPELINE);
            for h in group.elements() {
                let two_step = lifted_apply(space.layers(), &rep, g, &lifted_apply(space.layers(), &rep, h, &a).unwrap()).unwrap();
                let one_step = lifted_apply(space.layers(), &rep, group.mul(g, h), &a).unwrap();
                assert!(space.ambient_distance(&two_step, &one_step).unwrap() < TOL_EXACT);
            }
        }
    }

    #[test]
    fn sign_flip_conjugation_fixes_dense_blocks() {
        // (-I) A (-I) = A
        let group = FiniteGroup::cyclic(2).unwrap();
        let space = AffineSpace::new(vec![LayerSpec::dense(crate::tensor::Shape::new(2, 1, 1), 2)]).unwrap();
        let neg = UnitaryRep::from_matrices(
            group.clone(),
            2,
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![-1.0, 0.0, 0.0, -1.0]],
        )
        .unwrap();
        let rep = LiftedRep::new(vec![LayerReps {
            input: neg.clone(),
            output: neg,
        }]);
        let a = AmbientOperator {
            blocks: vec![BlockData::Dense(vec![1.0, 2.0, 3.0, 4.0])],
        };
        let moved = lifted_apply(space.layers(), &rep, 1, &a).unwrap();
        assert!(space.ambient_distance(&a, &moved).unwrap() < TOL_EXACT);
    }

    #[test]
    fn invariance_verdicts_both_directions() {
        let group = FiniteGroup::cyclic(4).unwrap();
        for (support, expect_invariant) in [
            (FilterSupport::sym_3x3(), true),
            (FilterSupport::asym_3x3(), false),
        ] {
            let space = conv_space(support, 8, Padding::Circular, 1, 2);
            let rep = LiftedRep::rotation_stack(&group, space.layers(), false).unwrap();
            let report = check_g_invariance(&space, &rep).unwrap();
            assert_eq!(report.invariant, expect_invariant);
            if !expect_invariant {
                assert!(report.max_residual > TOL_VIOLATION);
            }
            let proj = check_projection_equivariance(&space, &rep, 3, 9).unwrap();
            assert_eq!(proj < TOL_PIPELINE, expect_invariant);
            if !expect_invariant {
                assert!(proj > TOL_VIOLATION);
            }
        }
    }

    #[test]
    fn full_support_always_invariant() {
        let group = FiniteGroup::cyclic(4).unwrap();
        let space = conv_space(FilterSupport::full(3).unwrap(), 6, Padding::Circular, 1, 1);
        let rep = LiftedRep::rotation_stack(&group, space.layers(), false).unwrap();
        let report = check_g_invariance(&space, &rep).unwrap();
        assert!(report.invariant);
        assert!(report.max_residual < TOL_EXACT);
    }

    #[test]
    fn identity_group_projection_commutes_trivially() {
        let group = FiniteGroup::cyclic(1).unwrap();
        let space = conv_space(FilterSupport::asym_3x3(), 6, Padding::Circular, 1, 1);
        let rep = LiftedRep::rotation_stack(&group, space.layers(), false).unwrap();
        let res = check_projection_equivariance(&space, &rep, 2, 3).unwrap();
        assert!(res < TOL_EXACT);
    }

    #[test]
    fn filter_rotation_identity_zero_and_circular() {
        for padding in [Padding::Circular, Padding::Zero] {
            let dev = rotate_filter_identity_check(&FilterSupport::sym_3x3(), 8, padding, 3, 3).unwrap();
            assert!(dev < TOL_EXACT, "{padding:?}: {dev}");
        }
    }

    #[test]
    fn escape_check_cases() {
        let c4 = FiniteGroup::cyclic(4).unwrap();
        let shift = UnitaryRep::channel_shift(c4.clone(), 4, 1, 1).unwrap();
        let trivial = UnitaryRep::trivial(c4, 4);

        let r = appendix_escape_check(&shift, &FilterSupport::asym_3x3()).unwrap();
        assert!(r.escaped);
        let w = r.witness.unwrap();
        // the witness cell really lies outside the mask
        assert!(!FilterSupport::asym_3x3().contains(w.escaped_cell.0, w.escaped_cell.1));

        let r = appendix_escape_check(&trivial, &FilterSupport::asym_3x3()).unwrap();
        assert!(r.escaped);

        let r = appendix_escape_check(&shift, &FilterSupport::sym_3x3()).unwrap();
        assert!(!r.escaped);
        assert!(r.witness.is_none());

        let r = appendix_escape_check(&shift, &FilterSupport::sym_5x5()).unwrap();
        assert!(!r.escaped);
        let r = appendix_escape_check(&shift, &FilterSupport::asym_5x5()).unwrap();
        assert!(r.escaped);
    }

    #[test]
    fn capacity_guard_on_large_spaces() {
        let space = conv_space(FilterSupport::sym_3x3(), 28, Padding::Zero, 1, 16);
        let group = FiniteGroup::cyclic(4).unwrap();
        let rep = LiftedRep::rotation_stack(&group, space.layers(), false).unwrap();
        match check_g_invariance(&space, &rep) {
            Err(crate::error::Error::Capacity(_)) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn zero_padding_norms_reflect_boundary_truncation() {
        let space = conv_space(FilterSupport::sym_3x3(), 4, Padding::Zero, 1, 1);
        // coords -> expand -> densify: Frobenius norm of a unit coordinate is 1
        for i in 0..space.dim() {
            let mut coords = vec![0.0f64; space.dim()];
            coords[i] = 1.0;
            let op = space.expand(&coords);
            let layer = &space.layers()[0];
            let dense = densify_block(layer, &op.blocks[0]).unwrap();
            let norm: f64 = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < TOL_EXACT, "coord {i}: {norm}");
        }
    }

    proptest! {
        #[test]
        fn ascii_roundtrip(bits in proptest::collection::vec(any::<bool>(), 9..10)) {
            let mut mask = bits.clone();
            mask[4] = true; // keep at least one cell
            let sup = FilterSupport::new(3, mask).unwrap();
            let back = FilterSupport::from_ascii(&sup.to_ascii()).unwrap();
            prop_assert_eq!(sup, back);
        }

        #[test]
        fn coords_roundtrip(seed in 0u64..1000, zero_pad in any::<bool>()) {
            let padding = if zero_pad { Padding::Zero } else { Padding::Circular };
            let space = conv_space(FilterSupport::asym_3x3(), 5, padding, 2, 1);
            let mut s = crate::rng::Stream::new(seed, 0, crate::rng::Purpose::Data);
            let coords: Vec<f64> = (0..space.dim()).map(|_| s.next_gaussian()).collect();
            let op = space.expand(&coords);
            let back = space.coords_of(&op).unwrap();
            for (a, b) in coords.iter().zip(&back) {
                prop_assert!((a - b).abs() < TOL_EXACT);
            }
        }
    }
}
