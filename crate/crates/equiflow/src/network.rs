//! Layered networks: forward evaluation, reverse-mode gradients, and the
//! induced-representation identity of the forward map.

use crate::error::{Error, Result};
use crate::group::UnitaryRep;
use crate::paramspace::{AffineSpace, AmbientOperator, BlockData, FilterSupport, LayerKind, LayerSpec, LiftedRep, Padding, lifted_apply};
use crate::rng::{Purpose, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Batch, Shape};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Fixed nonlinearities between linear layers. `PoolTanhLayerNorm` is
/// average pooling with a 2x2 window and stride 2, then tanh, then layer
/// normalization over the whole channel stack. `Flatten` only changes the
/// shape metadata. `ZeroCornerProbe` zeroes the top-left pixel of every
/// channel; it is deliberately not rotation-equivariant and exists so the
/// symmetry checkers can demonstrate detection power.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Tanh,
    TanhLayerNorm,
    PoolTanhLayerNorm,
    Flatten,
    ZeroCornerProbe,
}

impl Nonlinearity {
    pub fn out_shape(self, s: Shape) -> Result<Shape> {
        match self {
            Nonlinearity::Identity | Nonlinearity::Tanh | Nonlinearity::TanhLayerNorm | Nonlinearity::ZeroCornerProbe => Ok(s),
            Nonlinearity::Flatten => Ok(s.flattened()),
            Nonlinearity::PoolTanhLayerNorm => {
                if s.h % 2 != 0 || s.w % 2 != 0 {
                    Err(Error::ShapeMismatch(format!(
                        "2x2 pooling needs even spatial dims, got {s}"
                    )))
                } else {
                    Ok(Shape::new(s.c, s.h / 2, s.w / 2))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

/// Classification indices or regression vectors.
#[derive(Clone, Debug)]
pub enum Targets<F> {
    Classes(Vec<usize>),
    Vectors { dim: usize, data: Vec<F> },
}

impl<F: Scalar> Targets<F> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Vectors { dim, data } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<G: Scalar>(&self) -> Targets<G> {
        match self {
            Targets::Classes(v) => Targets::Classes(v.clone()),
            Targets::Vectors { dim, data } => Targets::Vectors {
                dim: *dim,
                data: data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
            },
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets<F> {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Vectors { dim, data } => {
                let mut out = Vec::with_capacity(idx.len() * dim);
                for &i in idx {
                    out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
                }
                Targets::Vectors { dim: *dim, data: out }
            }
        }
    }
}

/// A layered architecture with its input and output group actions.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub space: AffineSpace,
    pub nonlins: Vec<Nonlinearity>,
    pub input_rep: UnitaryRep,
    pub output_rep: UnitaryRep,
}

impl NetworkSpec {
    pub fn new(
        space: AffineSpace,
        nonlins: Vec<Nonlinearity>,
        input_rep: UnitaryRep,
        output_rep: UnitaryRep,
    ) -> Result<Self> {
        if nonlins.len() != space.layers().len() {
            return Err(Error::ShapeMismatch("one nonlinearity per layer".into()));
        }
        let mut shape = space.layers()[0].in_shape;
        for (layer, nl) in space.layers().iter().zip(&nonlins) {
            if layer.in_shape.len() != shape.len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer expects {} inputs, chain provides {}",
                    layer.in_shape.len(),
                    shape.len()
                )));
            }
            shape = nl.out_shape(layer.out_shape)?;
        }
        if input_rep.dim() != space.layers()[0].in_shape.len() {
            return Err(Error::ShapeMismatch("input rep dim mismatch".into()));
        }
        if output_rep.dim() != shape.len() {
            return Err(Error::ShapeMismatch("output rep dim mismatch".into()));
        }
        Ok(NetworkSpec {
            space,
            nonlins,
            input_rep,
            output_rep,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.space.layers()[0].in_shape
    }

    pub fn output_shape(&self) -> Shape {
        let mut shape = self.space.layers()[0].in_shape;
        for (layer, nl) in self.space.layers().iter().zip(&self.nonlins) {
            shape = nl.out_shape(layer.out_shape).expect("validated");
        }
        shape
    }

    /// The experiment architecture: three same-padding convolutions with a
    /// shared filter support (pooling after the first two), then a dense
    /// readout into ten logits. `channels` is 16 in the reference setup; a
    /// smaller count gives a cheap variant with identical structure.
    pub fn mnist_c4(support: FilterSupport, channels: usize) -> Result<Self> {
        let group = crate::group::FiniteGroup::cyclic(4)?;
        let layers = vec![
            LayerSpec::conv(1, channels, 28, 28, support.clone(), Padding::Zero)?,
            LayerSpec::conv(channels, channels, 14, 14, support.clone(), Padding::Zero)?,
            LayerSpec::conv(channels, channels, 7, 7, support, Padding::Zero)?,
            LayerSpec::dense(Shape::new(channels, 7, 7), 10),
        ];
        let space = AffineSpace::new(layers)?;
        let input_rep = UnitaryRep::rotation(group.clone(), 1, 28, 28)?;
        let output_rep = UnitaryRep::trivial(group, 10);
        NetworkSpec::new(
            space,
            vec![
                Nonlinearity::PoolTanhLayerNorm,
                Nonlinearity::PoolTanhLayerNorm,
                Nonlinearity::TanhLayerNorm,
                Nonlinearity::Identity,
            ],
            input_rep,
            output_rep,
        )
    }

    /// Rotation representations on all internal spaces, trivial on the
    /// logits; the lifted action used by every built-in checker.
    pub fn rotation_lifted_rep(&self) -> Result<LiftedRep> {
        LiftedRep::rotation_stack(self.input_rep.group(), self.space.layers(), self.output_rep.is_trivial_action())
    }
}

/// Network parameters: coordinates plus the cached ambient expansion.
#[derive(Clone, Debug)]
pub struct ParamPoint<F> {
    pub coords: Vec<F>,
    pub ambient: AmbientOperator<F>,
}

impl<F: Scalar> ParamPoint<F> {
    pub fn from_coords(space: &AffineSpace, coords: Vec<F>) -> Self {
        let ambient = space.expand(&coords);
        ParamPoint { coords, ambient }
    }

    /// Max abs deviation between the cache and a fresh expansion.
    pub fn cache_residual(&self, space: &AffineSpace) -> f64 {
        let fresh = space.expand(&self.coords);
        let mut worst = 0.0f64;
        for (a, b) in self.ambient.blocks.iter().zip(&fresh.blocks) {
            let (x, y) = match (a, b) {
                (BlockData::Conv(x), BlockData::Conv(y)) => (x, y),
                (BlockData::Dense(x), BlockData::Dense(y)) => (x, y),
                _ => unreachable!(),
            };
            for (u, v) in x.iter().zip(y) {
                worst = worst.max((u.to_f64() - v.to_f64()).abs());
            }
        }
        worst
    }
}

fn apply_dense<F: Scalar>(w: &[F], x: &Batch<F>, out_len: usize) -> Batch<F> {
    let in_len = x.shape.len();
    let mut out = Batch::zeros(x.n, Shape::new(out_len, 1, 1));
    for n in 0..x.n {
        let xs = x.sample(n);
        let os = out.sample_mut(n);
        for (o, ov) in os.iter_mut().enumerate() {
            let row = &w[o * in_len..(o + 1) * in_len];
            let mut acc = F::ZERO;
            for (wv, xv) in row.iter().zip(xs) {
                acc += *wv * *xv;
            }
            *ov = acc;
        }
    }
    out
}

fn apply_conv<F: Scalar>(layer: &LayerSpec, w: &[F], x: &Batch<F>) -> Batch<F> {
    let (in_ch, out_ch, k, padding) = match &layer.kind {
        LayerKind::Conv {
            in_ch,
            out_ch,
            support,
            padding,
        } => (*in_ch, *out_ch, support.size(), *padding),
        _ => unreachable!(),
    };
    let (h, wd) = (layer.in_shape.h, layer.in_shape.w);
    let plane = h * wd;
    let kk = k * k;
    let r = (k / 2) as isize;
    // cells that carry any weight; zero cells contribute exact zeros anyway
    let active: Vec<(isize, isize, usize)> = (0..kk)
        .filter(|&idx| (0..out_ch * in_ch).any(|pair| w[pair * kk + idx].to_f64() != 0.0))
        .map(|idx| ((idx / k) as isize - r, (idx % k) as isize - r, idx))
        .collect();
    let mut out = Batch::zeros(x.n, layer.out_shape);
    for n in 0..x.n {
        for oc in 0..out_ch {
            let out_off = (n * out_ch + oc) * plane;
            for ic in 0..in_ch {
                let in_off = (n * in_ch + ic) * plane;
                let filt = &w[(oc * in_ch + ic) * kk..(oc * in_ch + ic + 1) * kk];
                for &(dy, dx, idx) in &active {
                    let wv = filt[idx];
                    if wv.to_f64() == 0.0 {
                        continue;
                    }
                    match padding {
                        Padding::Zero => {
                            let y_lo = (-dy).max(0) as usize;
                            let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                            let x_lo = (-dx).max(0) as usize;
                            let x_hi = ((wd as isize - dx).min(wd as isize)) as usize;
                            for y in y_lo..y_hi {
                                let src_row = in_off + (y as isize + dy) as usize * wd;
                                let dst_row = out_off + y * wd;
                                let src = &x.data[src_row + (x_lo as isize + dx) as usize
                                    ..src_row + (x_hi as isize + dx) as usize];
                                let dst = &mut out.data[dst_row + x_lo..dst_row + x_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * *s;
                                }
                            }
                        }
                        Padding::Circular => {
                            for y in 0..h {
                                let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                                for xq in 0..wd {
                                    let sx = (xq as isize + dx).rem_euclid(wd as isize) as usize;
                                    out.data[out_off + y * wd + xq] += wv * x.data[in_off + sy * wd + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn apply_block<F: Scalar>(layer: &LayerSpec, block: &BlockData<F>, x: &Batch<F>) -> Result<Batch<F>> {
    if x.shape.len() != layer.in_shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer expects {} inputs, batch has {}",
            layer.in_shape.len(),
            x.shape.len()
        )));
    }
    match block {
        BlockData::Dense(w) => Ok(apply_dense(w, x, layer.out_shape.len())),
        BlockData::Conv(w) => {
            // reinterpret the incoming batch in the layer's spatial shape
            let mut xin = x.clone();
            xin.shape = layer.in_shape;
            Ok(apply_conv(layer, w, &xin))
        }
    }
}

struct LayerNormCache<F> {
    inv_std: Vec<F>,
}

fn layernorm_forward<F: Scalar>(x: &mut Batch<F>) -> LayerNormCache<F> {
    let m = x.shape.len();
    let inv_m = F::from_f64(1.0 / m as f64);
    let eps = F::from_f64(LAYERNORM_EPS);
    let mut inv_std = Vec::with_capacity(x.n);
    for n in 0..x.n {
        let s = x.sample_mut(n);
        let mut mean = F::ZERO;
        for v in s.iter() {
            mean += *v;
        }
        mean *= inv_m;
        let mut var = F::ZERO;
        for v in s.iter() {
            let d = *v - mean;
            var += d * d;
        }
        var *= inv_m;
        let isd = F::ONE / (var + eps).sqrt();
        for v in s.iter_mut() {
            *v = (*v - mean) * isd;
        }
        inv_std.push(isd);
    }
    LayerNormCache { inv_std }
}

fn layernorm_backward<F: Scalar>(y: &Batch<F>, cache: &LayerNormCache<F>, dy: &mut Batch<F>) {
    let m = y.shape.len();
    let inv_m = F::from_f64(1.0 / m as f64);
    for n in 0..y.n {
        let ys = y.sample(n);
        let isd = cache.inv_std[n];
        let ds = dy.sample_mut(n);
        let mut mean_dy = F::ZERO;
        let mut mean_dyy = F::ZERO;
        for (d, yv) in ds.iter().zip(ys) {
            mean_dy += *d;
            mean_dyy += *d * *yv;
        }
        mean_dy *= inv_m;
        mean_dyy *= inv_m;
        for (d, yv) in ds.iter_mut().zip(ys) {
            *d = isd * (*d - mean_dy - *yv * mean_dyy);
        }
    }
}

fn pool_forward<F: Scalar>(x: &Batch<F>) -> Batch<F> {
    let (c, h, w) = (x.shape.c, x.shape.h, x.shape.w);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    let mut out = Batch::zeros(x.n, Shape::new(c, oh, ow));
    for n in 0..x.n {
        let xs = x.sample(n);
        let os = out.sample_mut(n);
        for ch in 0..c {
            let xoff = ch * h * w;
            let ooff = ch * oh * ow;
            for y in 0..oh {
                for xq in 0..ow {
                    let base = xoff + 2 * y * w + 2 * xq;
                    os[ooff + y * ow + xq] =
                        (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]) * quarter;
                }
            }
        }
    }
    out
}

fn pool_backward<F: Scalar>(dy: &Batch<F>, in_shape: Shape) -> Batch<F> {
    let (c, h, w) = (in_shape.c, in_shape.h, in_shape.w);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    let mut dx = Batch::zeros(dy.n, in_shape);
    for n in 0..dy.n {
        let ds = dy.sample(n);
        let xs = dx.sample_mut(n);
        for ch in 0..c {
            let xoff = ch * h * w;
            let ooff = ch * oh * ow;
            for y in 0..oh {
                for xq in 0..ow {
                    let g = ds[ooff + y * ow + xq] * quarter;
                    let base = xoff + 2 * y * w + 2 * xq;
                    xs[base] += g;
                    xs[base + 1] += g;
                    xs[base + w] += g;
                    xs[base + w + 1] += g;
                }
            }
        }
    }
    dx
}

fn zero_corner<F: Scalar>(x: &mut Batch<F>) {
    let plane = x.shape.h * x.shape.w;
    let channels = x.shape.c;
    for n in 0..x.n {
        let s = x.sample_mut(n);
        for c in 0..channels {
            s[c * plane] = F::ZERO;
        }
    }
}

enum NonlinCache<F> {
    Plain,
    Tanh {
        y: Batch<F>,
    },
    TanhLn {
        t: Batch<F>,
        y: Batch<F>,
        ln: LayerNormCache<F>,
    },
    PoolTanhLn {
        t: Batch<F>,
        y: Batch<F>,
        ln: LayerNormCache<F>,
        pre_pool_shape: Shape,
    },
}

fn nonlin_forward_full<F: Scalar>(kind: Nonlinearity, z: Batch<F>) -> (Batch<F>, NonlinCache<F>) {
    match kind {
        Nonlinearity::Identity => (z, NonlinCache::Plain),
        Nonlinearity::Flatten => {
            let mut out = z;
            out.shape = out.shape.flattened();
            (out, NonlinCache::Plain)
        }
        Nonlinearity::ZeroCornerProbe => {
            let mut out = z;
            zero_corner(&mut out);
            (out, NonlinCache::Plain)
        }
        Nonlinearity::Tanh => {
            let mut out = z;
            for v in out.data.iter_mut() {
                *v = v.tanh();
            }
            let y = out.clone();
            (out, NonlinCache::Tanh { y })
        }
        Nonlinearity::TanhLayerNorm => {
            let mut t = z;
            for v in t.data.iter_mut() {
                *v = v.tanh();
            }
            let mut y = t.clone();
            let ln = layernorm_forward(&mut y);
            (y.clone(), NonlinCache::TanhLn { t, y, ln })
        }
        Nonlinearity::PoolTanhLayerNorm => {
            let pre_pool_shape = z.shape;
            let mut t = pool_forward(&z);
            for v in t.data.iter_mut() {
                *v = v.tanh();
            }
            let mut y = t.clone();
            let ln = layernorm_forward(&mut y);
            (
                y.clone(),
                NonlinCache::PoolTanhLn {
                    t,
                    y,
                    ln,
                    pre_pool_shape,
                },
            )
        }
    }
}

fn nonlin_backward<F: Scalar>(
    kind: Nonlinearity,
    cache: &NonlinCache<F>,
    mut dy: Batch<F>,
    in_shape: Shape,
) -> Batch<F> {
    match (kind, cache) {
        (Nonlinearity::Identity, _) => dy,
        (Nonlinearity::Flatten, _) => {
            dy.shape = in_shape;
            dy
        }
        (Nonlinearity::ZeroCornerProbe, _) => {
            zero_corner(&mut dy);
            dy
        }
        (Nonlinearity::Tanh, NonlinCache::Tanh { y }) => {
            for (d, yv) in dy.data.iter_mut().zip(&y.data) {
                *d *= F::ONE - *yv * *yv;
            }
            dy
        }
        (Nonlinearity::TanhLayerNorm, NonlinCache::TanhLn { t, y, ln }) => {
            layernorm_backward(y, ln, &mut dy);
            for (d, tv) in dy.data.iter_mut().zip(&t.data) {
                *d *= F::ONE - *tv * *tv;
            }
            dy
        }
        (Nonlinearity::PoolTanhLayerNorm, NonlinCache::PoolTanhLn { t, y, ln, pre_pool_shape }) => {
            layernorm_backward(y, ln, &mut dy);
            for (d, tv) in dy.data.iter_mut().zip(&t.data) {
                *d *= F::ONE - *tv * *tv;
            }
            pool_backward(&dy, *pre_pool_shape)
        }
        _ => unreachable!("cache matches kind"),
    }
}

/// Deterministic forward evaluation of the whole stack.
pub fn forward<F: Scalar>(spec: &NetworkSpec, op: &AmbientOperator<F>, x: &Batch<F>) -> Result<Batch<F>> {
    x.assert_all_finite()?;
    spec.space.validate_op(op)?;
    let mut cur = x.clone();
    for ((layer, block), nl) in spec.space.layers().iter().zip(&op.blocks).zip(&spec.nonlins) {
        let z = apply_block(layer, block, &cur)?;
        let (next, _) = nonlin_forward_full(*nl, z);
        cur = next;
    }
    Ok(cur)
}

/// Forward pass for a [`ParamPoint`].
pub fn forward_params<F: Scalar>(spec: &NetworkSpec, params: &ParamPoint<F>, x: &Batch<F>) -> Result<Batch<F>> {
    forward(spec, &params.ambient, x)
}

fn loss_and_dlogits<F: Scalar>(
    loss: LossKind,
    logits: &Batch<F>,
    targets: &Targets<F>,
) -> Result<(f64, Batch<F>)> {
    if targets.len() != logits.n {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for a batch of {}",
            targets.len(),
            logits.n
        )));
    }
    let klen = logits.shape.len();
    let inv_n = 1.0 / logits.n as f64;
    let mut dl = Batch::zeros(logits.n, logits.shape);
    let mut total = 0.0f64;
    match (loss, targets) {
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            for n in 0..logits.n {
                let ls = logits.sample(n);
                let label = labels[n];
                if label >= klen {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} out of range for {klen} classes"
                    )));
                }
                let mx = ls.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.to_f64()));
                let mut lse = 0.0;
                for v in ls {
                    lse += (v.to_f64() - mx).exp();
                }
                let lse = mx + lse.ln();
                total += (lse - ls[label].to_f64()) * inv_n;
                let ds = dl.sample_mut(n);
                for (k, v) in ls.iter().enumerate() {
                    let p = (v.to_f64() - lse).exp();
                    let grad = if k == label { p - 1.0 } else { p };
                    ds[k] = F::from_f64(grad * inv_n);
                }
            }
        }
        (LossKind::CrossEntropy, Targets::Vectors { .. }) => {
            return Err(Error::InvalidArgument(
                "cross-entropy needs class targets".into(),
            ));
        }
        (LossKind::SquaredError, targets) => {
            for n in 0..logits.n {
                let ls = logits.sample(n);
                let ds = dl.sample_mut(n);
                match targets {
                    Targets::Classes(labels) => {
                        // one-hot regression target
                        for (k, v) in ls.iter().enumerate() {
                            let t = if k == labels[n] { 1.0 } else { 0.0 };
                            let d = v.to_f64() - t;
                            total += 0.5 * d * d * inv_n;
                            ds[k] = F::from_f64(d * inv_n);
                        }
                    }
                    Targets::Vectors { dim, data } => {
                        if *dim != klen {
                            return Err(Error::ShapeMismatch(format!(
                                "target dim {dim} vs output {klen}"
                            )));
                        }
                        for (k, v) in ls.iter().enumerate() {
                            let d = v.to_f64() - data[n * dim + k].to_f64();
                            total += 0.5 * d * d * inv_n;
                            ds[k] = F::from_f64(d * inv_n);
                        }
                    }
                }
            }
        }
    }
    Ok((total, dl))
}

/// Batch-mean loss without gradients.
pub fn batch_loss<F: Scalar>(
    spec: &NetworkSpec,
    op: &AmbientOperator<F>,
    x: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
) -> Result<f64> {
    let logits = forward(spec, op, x)?;
    let (value, _) = loss_and_dlogits(loss, &logits, targets)?;
    Ok(value)
}

fn conv_backward<F: Scalar>(
    layer: &LayerSpec,
    w: &[F],
    x: &Batch<F>,
    dz: &Batch<F>,
    want_dx: bool,
) -> (BlockData<F>, Option<Batch<F>>) {
    let (in_ch, out_ch, k, padding, support) = match &layer.kind {
        LayerKind::Conv {
            in_ch,
            out_ch,
            support,
            padding,
        } => (*in_ch, *out_ch, support.size(), *padding, support),
        _ => unreachable!(),
    };
    let (h, wd) = (layer.in_shape.h, layer.in_shape.w);
    let plane = h * wd;
    let kk = k * k;
    let r = (k / 2) as isize;
    let cells: Vec<(isize, isize, usize)> = support
        .cells()
        .into_iter()
        .map(|(row, col)| (row as isize - r, col as isize - r, row * k + col))
        .collect();
    let mut dw = vec![F::ZERO; out_ch * in_ch * kk];
    let mut dx = if want_dx {
        Some(Batch::zeros(x.n, layer.in_shape))
    } else {
        None
    };
    for n in 0..x.n {
        for oc in 0..out_ch {
            let dz_off = (n * out_ch + oc) * plane;
            for ic in 0..in_ch {
                let x_off = (n * in_ch + ic) * plane;
                let pair = oc * in_ch + ic;
                for &(dy, dx_c, idx) in &cells {
                    match padding {
                        Padding::Zero => {
                            let y_lo = (-dy).max(0) as usize;
                            let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                            let x_lo = (-dx_c).max(0) as usize;
                            let x_hi = ((wd as isize - dx_c).min(wd as isize)) as usize;
                            let mut acc = F::ZERO;
                            for y in y_lo..y_hi {
                                let src_row = x_off + (y as isize + dy) as usize * wd;
                                let g_row = dz_off + y * wd;
                                let src = &x.data[src_row + (x_lo as isize + dx_c) as usize
                                    ..src_row + (x_hi as isize + dx_c) as usize];
                                let gs = &dz.data[g_row + x_lo..g_row + x_hi];
                                for (s, g) in src.iter().zip(gs) {
                                    acc += *s * *g;
                                }
                            }
                            dw[pair * kk + idx] += acc;
                            if let Some(dxb) = dx.as_mut() {
                                let wv = w[pair * kk + idx];
                                if wv.to_f64() != 0.0 {
                                    for y in y_lo..y_hi {
                                        let dst_row = (n * in_ch + ic) * plane
                                            + (y as isize + dy) as usize * wd;
                                        let g_row = dz_off + y * wd;
                                        for xq in x_lo..x_hi {
                                            dxb.data[dst_row + (xq as isize + dx_c) as usize] +=
                                                wv * dz.data[g_row + xq];
                                        }
                                    }
                                }
                            }
                        }
                        Padding::Circular => {
                            let mut acc = F::ZERO;
                            for y in 0..h {
                                let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                                for xq in 0..wd {
                                    let sx = (xq as isize + dx_c).rem_euclid(wd as isize) as usize;
                                    let g = dz.data[dz_off + y * wd + xq];
                                    acc += x.data[x_off + sy * wd + sx] * g;
                                    if let Some(dxb) = dx.as_mut() {
                                        let wv = w[pair * kk + idx];
                                        dxb.data[(n * in_ch + ic) * plane + sy * wd + sx] += wv * g;
                                    }
                                }
                            }
                            dw[pair * kk + idx] += acc;
                        }
                    }
                }
            }
        }
    }
    (BlockData::Conv(dw), dx)
}

fn dense_backward<F: Scalar>(
    layer: &LayerSpec,
    w: &[F],
    x: &Batch<F>,
    dz: &Batch<F>,
    want_dx: bool,
) -> (BlockData<F>, Option<Batch<F>>) {
    let in_len = layer.in_shape.len();
    let out_len = layer.out_shape.len();
    let mut dw = vec![F::ZERO; out_len * in_len];
    let mut dx = if want_dx {
        Some(Batch::zeros(x.n, x.shape))
    } else {
        None
    };
    for n in 0..x.n {
        let xs = x.sample(n);
        let gs = dz.sample(n);
        for (o, g) in gs.iter().enumerate() {
            if g.to_f64() != 0.0 {
                let row = &mut dw[o * in_len..(o + 1) * in_len];
                for (dwv, xv) in row.iter_mut().zip(xs) {
                    *dwv += *g * *xv;
                }
            }
        }
        if let Some(dxb) = dx.as_mut() {
            let ds = dxb.sample_mut(n);
            for (o, g) in gs.iter().enumerate() {
                if g.to_f64() != 0.0 {
                    let row = &w[o * in_len..(o + 1) * in_len];
                    for (d, wv) in ds.iter_mut().zip(row) {
                        *d += *g * *wv;
                    }
                }
            }
        }
    }
    (BlockData::Dense(dw), dx)
}

/// Reverse-mode gradient of the batch-mean loss with respect to the
/// coordinates. Returns (loss, coordinate gradient of length p).
pub fn gradient<F: Scalar>(
    spec: &NetworkSpec,
    op: &AmbientOperator<F>,
    x: &Batch<F>,
    targets: &Targets<F>,
    loss: LossKind,
) -> Result<(f64, Vec<F>)> {
    x.assert_all_finite()?;
    spec.space.validate_op(op)?;
    let nlayers = spec.space.layers().len();
    let mut inputs: Vec<Batch<F>> = Vec::with_capacity(nlayers);
    let mut caches: Vec<NonlinCache<F>> = Vec::with_capacity(nlayers);
    let mut cur = x.clone();
    for (i, (layer, block)) in spec.space.layers().iter().zip(&op.blocks).enumerate() {
        inputs.push(cur.clone());
        let z = apply_block(layer, block, &cur)?;
        if !z.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("non-finite activation after layer {i}")));
        }
        let (next, cache) = nonlin_forward_full(spec.nonlins[i], z);
        caches.push(cache);
        cur = next;
    }
    let (value, mut dcur) = loss_and_dlogits(loss, &cur, targets)?;
    let mut grad_blocks: Vec<Option<BlockData<F>>> = (0..nlayers).map(|_| None).collect();
    for i in (0..nlayers).rev() {
        let layer = &spec.space.layers()[i];
        let dz = nonlin_backward(spec.nonlins[i], &caches[i], dcur, layer.out_shape);
        let want_dx = i > 0;
        let mut xin = inputs[i].clone();
        let (dw, dx) = match &op.blocks[i] {
            BlockData::Conv(w) => {
                xin.shape = layer.in_shape;
                conv_backward(layer, w, &xin, &dz, want_dx)
            }
            BlockData::Dense(w) => dense_backward(layer, w, &xin, &dz, want_dx),
        };
        grad_blocks[i] = Some(dw);
        dcur = match dx {
            Some(mut d) => {
                // hand the gradient back in the shape the previous layer produced
                d.shape = inputs[i].shape;
                d
            }
            None => Batch::zeros(0, Shape::new(0, 1, 1)),
        };
    }
    let grads = AmbientOperator {
        blocks: grad_blocks.into_iter().map(|b| b.expect("filled")).collect(),
    };
    let coords = spec.space.entry_grads_to_coords(&grads)?;
    Ok((value, coords))
}

/// Max over random (parameters, input, element) of the deviation in the
/// identity `forward(A, rho_in(g) x) = rho_out(g) forward(lift(g^-1) A, x)`.
/// The identity is exact mathematics whenever every nonlinearity is
/// equivariant, so the residual is a direct bug detector.
pub fn check_induced_identity(
    spec: &NetworkSpec,
    rep: &LiftedRep,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    rep.validate(spec.space.layers())?;
    let group = rep.group().clone();
    let in_shape = spec.input_shape();
    let out_len = spec.output_shape().len();
    let mut stream = Stream::new(seed, 0, Purpose::Data);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let coords: Vec<f64> = (0..spec.space.dim()).map(|_| stream.next_gaussian()).collect();
        let ambient = spec.space.expand(&coords);
        let x = Batch::from_data(
            1,
            in_shape,
            (0..in_shape.len()).map(|_| stream.next_gaussian()).collect(),
        )?;
        let g = stream.next_index(group.order());
        let mut gx = x.clone();
        spec.input_rep.apply(g, x.sample(0), gx.sample_mut(0));
        let lhs = forward(spec, &ambient, &gx)?;
        let moved = lifted_apply(spec.space.layers(), rep, group.inv(g), &ambient)?;
        let inner = forward(spec, &moved, &x)?;
        let mut rhs = vec![0.0f64; out_len];
        spec.output_rep.apply(g, inner.sample(0), &mut rhs);
        for (a, b) in lhs.sample(0).iter().zip(&rhs) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Residual of `sigma(rho(g) x) = rho'(g) sigma(x)` over random probes,
/// where `rho'` is the action transported to the nonlinearity's output
/// space.
pub fn check_nonlinearity_equivariance(
    kind: Nonlinearity,
    rep: &UnitaryRep,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let in_shape = rep.shape();
    let out_shape = kind.out_shape(in_shape)?;
    let out_rep = if out_shape.len() == in_shape.len() {
        rep.clone()
    } else if rep.is_pure_rotation() {
        UnitaryRep::rotation(rep.group().clone(), out_shape.c, out_shape.h, out_shape.w)?
    } else if rep.is_trivial_action() {
        UnitaryRep::trivial(rep.group().clone(), out_shape.len())
    } else {
        return Err(Error::InvalidArgument(
            "cannot transport this representation through a shape-changing nonlinearity".into(),
        ));
    };
    let group = rep.group().clone();
    let mut stream = Stream::new(seed, 0, Purpose::Data);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Batch::from_data(
            1,
            in_shape,
            (0..in_shape.len()).map(|_| stream.next_gaussian()).collect::<Vec<f64>>(),
        )?;
        let (sx, _) = nonlin_forward_full(kind, x.clone());
        for g in group.elements() {
            let mut gx = x.clone();
            rep.apply(g, x.sample(0), gx.sample_mut(0));
            let (s_gx, _) = nonlin_forward_full(kind, gx);
            let mut g_sx = vec![0.0f64; out_shape.len()];
            out_rep.apply(g, sx.sample(0), &mut g_sx);
            for (a, b) in s_gx.sample(0).iter().zip(&g_sx) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::FiniteGroup;

    fn toy_net() -> NetworkSpec {
        let group = FiniteGroup::cyclic(4).unwrap();
        let layers = vec![
            LayerSpec::conv(1, 2, 6, 6, FilterSupport::sym_3x3(), Padding::Zero).unwrap(),
            LayerSpec::conv(2, 2, 3, 3, FilterSupport::sym_3x3(), Padding::Zero).unwrap(),
            LayerSpec::dense(Shape::new(2, 3, 3), 4),
        ];
        let space = AffineSpace::new(layers).unwrap();
        NetworkSpec::new(
            space,
            vec![
                Nonlinearity::PoolTanhLayerNorm,
                Nonlinearity::TanhLayerNorm,
                Nonlinearity::Identity,
            ],
            UnitaryRep::rotation(group.clone(), 1, 6, 6).unwrap(),
            UnitaryRep::trivial(group, 4),
        )
        .unwrap()
    }

    #[test]
    fn dense_identity_layer_is_matvec() {
        let group = FiniteGroup::cyclic(1).unwrap();
        let layers = vec![LayerSpec::dense(Shape::new(3, 1, 1), 2)];
        let space = AffineSpace::new(layers).unwrap();
        let spec = NetworkSpec::new(
            space,
            vec![Nonlinearity::Identity],
            UnitaryRep::trivial(group.clone(), 3),
            UnitaryRep::trivial(group, 2),
        )
        .unwrap();
        // w = [[1,2,3],[4,5,6]], x = [1,1,2]
        let params = ParamPoint::from_coords(&spec.space, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = Batch::from_data(1, Shape::new(3, 1, 1), vec![1.0, 1.0, 2.0]).unwrap();
        let y = forward_params(&spec, &params, &x).unwrap();
        assert_eq!(y.sample(0), &[9.0, 21.0]);
    }

    #[test]
    fn zero_input_zero_params_hits_layernorm_guard() {
        let spec = toy_net();
        let params = ParamPoint::from_coords(&spec.space, vec![0.0f64; spec.space.dim()]);
        let x = Batch::zeros(1, spec.input_shape());
        let y = forward_params(&spec, &params, &x).unwrap();
        // all-equal pre-normalization values map to zeros, so the logits
        // of the zero dense layer stay zero
        assert!(y.sample(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mnist_spec_smoke() {
        let spec = NetworkSpec::mnist_c4(FilterSupport::sym_3x3(), 16).unwrap();
        let mut stream = Stream::new(3, 0, Purpose::Data);
        let coords: Vec<f64> = (0..spec.space.dim()).map(|_| stream.next_gaussian()).collect();
        let params = ParamPoint::from_coords(&spec.space, coords);
        let x = Batch::from_data(
            1,
            Shape::new(1, 28, 28),
            (0..784).map(|_| stream.next_f64()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let y = forward_params(&spec, &params, &x).unwrap();
        assert_eq!(y.shape.len(), 10);
        assert!(y.data.iter().all(|v| v.is_finite()));
        assert!(params.cache_residual(&spec.space) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = toy_net();
        let mut stream = Stream::new(17, 0, Purpose::Data);
        let x = Batch::from_data(
            3,
            spec.input_shape(),
            (0..3 * 36).map(|_| stream.next_gaussian()).collect::<Vec<f64>>(),
        )
        .unwrap();
        let targets = Targets::Classes(vec![0, 2, 3]);
        for _ in 0..20 {
            let coords: Vec<f64> = (0..spec.space.dim()).map(|_| stream.next_gaussian()).collect();
            let op = spec.space.expand(&coords);
            let (_, grad) = gradient(&spec, &op, &x, &targets, LossKind::CrossEntropy).unwrap();
            // probe a handful of coordinates per point
            for probe in 0..5 {
                let i = stream.next_index(spec.space.dim());
                let mut cp = coords.clone();
                let h = 1e-5;
                cp[i] += h;
                let up = batch_loss(&spec, &spec.space.expand(&cp), &x, &targets, LossKind::CrossEntropy).unwrap();
                cp[i] -= 2.0 * h;
                let dn = batch_loss(&spec, &spec.space.expand(&cp), &x, &targets, LossKind::CrossEntropy).unwrap();
                let fd = (up - dn) / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-5,
                    "coord {i} probe {probe}: fd {fd} vs grad {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn gradient_zero_at_squared_error_minimum() {
        // one dense layer fit exactly: y = W x with W achievable
        let group = FiniteGroup::cyclic(1).unwrap();
        let layers = vec![LayerSpec::dense(Shape::new(2, 1, 1), 1)];
        let space = AffineSpace::new(layers).unwrap();
        let spec = NetworkSpec::new(
            space,
            vec![Nonlinearity::Identity],
            UnitaryRep::trivial(group.clone(), 2),
            UnitaryRep::trivial(group, 1),
        )
        .unwrap();
        let w = vec![2.0f64, -1.0];
        let x = Batch::from_data(1, Shape::new(2, 1, 1), vec![3.0, 5.0]).unwrap();
        let y = Targets::Vectors {
            dim: 1,
            data: vec![2.0 * 3.0 - 5.0],
        };
        let op = spec.space.expand(&w);
        let (loss, grad) = gradient(&spec, &op, &x, &y, LossKind::SquaredError).unwrap();
        assert!(loss.abs() < 1e-30);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn nonlinearity_equivariance_residuals() {
        let group = FiniteGroup::cyclic(4).unwrap();
        let rep = UnitaryRep::rotation(group.clone(), 3, 6, 6).unwrap();
        assert!(check_nonlinearity_equivariance(Nonlinearity::Tanh, &rep, 20, 5).unwrap() < 1e-12);
        assert!(
            check_nonlinearity_equivariance(Nonlinearity::PoolTanhLayerNorm, &rep, 20, 5).unwrap() < 1e-12
        );
        assert!(
            check_nonlinearity_equivariance(Nonlinearity::TanhLayerNorm, &rep, 20, 5).unwrap() < 1e-6
        );
        // the probe nonlinearity is detectably non-equivariant
        assert!(
            check_nonlinearity_equivariance(Nonlinearity::ZeroCornerProbe, &rep, 20, 5).unwrap() > 0.01
        );
    }

    #[test]
    fn induced_identity_small_net() {
        let spec = toy_net();
        let rep = spec.rotation_lifted_rep().unwrap();
        let res = check_induced_identity(&spec, &rep, 25, 9).unwrap();
        assert!(res < 1e-10, "residual {res}");
    }

    #[test]
    fn induced_identity_power_against_bad_nonlinearity() {
        let mut spec = toy_net();
        spec.nonlins[1] = Nonlinearity::ZeroCornerProbe;
        let rep = spec.rotation_lifted_rep().unwrap();
        let res = check_induced_identity(&spec, &rep, 25, 9).unwrap();
        assert!(res > 0.01, "corrupted nonlinearity must break the identity, got {res}");
    }

    #[test]
    fn forward_rejects_non_finite() {
        let spec = toy_net();
        let params = ParamPoint::from_coords(&spec.space, vec![0.0f64; spec.space.dim()]);
        let mut x = Batch::zeros(1, spec.input_shape());
        x.data[3] = f64::NAN;
        assert!(forward_params(&spec, &params, &x).is_err());
    }
}
