//! Flat tensors with (channels, height, width) shape metadata.
//!
//! Data is stored row-major as (n, c, y, x). Reshapes such as flattening
//! a channel stack never move data, which keeps permutation actions on a
//! space and on its flattened view literally identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same data viewed as one long channel vector.
    pub fn flattened(&self) -> Shape {
        Shape::new(self.len(), 1, 1)
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A batch of tensors sharing one shape.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub n: usize,
    pub shape: Shape,
    pub data: Vec<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn zeros(n: usize, shape: Shape) -> Self {
        Batch {
            n,
            shape,
            data: vec![F::ZERO; n * shape.len()],
        }
    }

    pub fn from_data(n: usize, shape: Shape, data: Vec<F>) -> Result<Self> {
        if data.len() != n * shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch of {n} x {shape} needs {} values, got {}",
                n * shape.len(),
                data.len()
            )));
        }
        Ok(Batch { n, shape, data })
    }

    pub fn sample(&self, i: usize) -> &[F] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [F] {
        let len = self.shape.len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn cast<G: Scalar>(&self) -> Batch<G> {
        Batch {
            n: self.n,
            shape: self.shape,
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn assert_all_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("batch contains non-finite values".into()))
        }
    }
}

/// In-place copy of `src` rotated by `quarter_turns` counterclockwise
/// quarter turns into `dst`. Square grids only; pure index permutation.
pub fn rot90_square<F: Copy>(src: &[F], dst: &mut [F], n: usize, quarter_turns: usize) {
    debug_assert_eq!(src.len(), n * n);
    debug_assert_eq!(dst.len(), n * n);
    match quarter_turns % 4 {
        0 => dst.copy_from_slice(src),
        1 => {
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = src[j * n + (n - 1 - i)];
                }
            }
        }
        2 => {
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = src[(n - 1 - i) * n + (n - 1 - j)];
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = src[(n - 1 - j) * n + i];
                }
            }
        }
    }
}

/// Rotates every channel of every sample by the same quarter-turn count.
pub fn rotate_stack<F: Scalar>(x: &Batch<F>, quarter_turns: usize) -> Result<Batch<F>> {
    if x.shape.h != x.shape.w {
        return Err(Error::ShapeMismatch(format!(
            "rotation needs square images, got {}",
            x.shape
        )));
    }
    let n = x.shape.h;
    let plane = n * n;
    let mut out = Batch::zeros(x.n, x.shape);
    for s in 0..x.n {
        for c in 0..x.shape.c {
            let off = (s * x.shape.c + c) * plane;
            rot90_square(
                &x.data[off..off + plane],
                &mut out.data[off..off + plane],
                n,
                quarter_turns,
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rot90_matches_fixed_orientation() {
        // [[a, b], [c, d]] rotated one quarter turn ccw is [[b, d], [a, c]].
        let src = [1.0, 2.0, 3.0, 4.0]; // a b / c d
        let mut dst = [0.0; 4];
        rot90_square(&src, &mut dst, 2, 1);
        assert_eq!(dst, [2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn four_turns_identity() {
        let src: Vec<f64> = (0..49).map(|v| v as f64).collect();
        let mut cur = src.clone();
        let mut tmp = vec![0.0; 49];
        for _ in 0..4 {
            rot90_square(&cur, &mut tmp, 7, 1);
            std::mem::swap(&mut cur, &mut tmp);
        }
        assert_eq!(cur, src);
    }

    #[test]
    fn composed_turns_agree() {
        let src: Vec<f64> = (0..25).map(|v| (v * v) as f64).collect();
        let mut once = vec![0.0; 25];
        let mut twice = vec![0.0; 25];
        rot90_square(&src, &mut once, 5, 1);
        let mut tmp = vec![0.0; 25];
        rot90_square(&once, &mut tmp, 5, 1);
        rot90_square(&src, &mut twice, 5, 2);
        assert_eq!(tmp, twice);
    }
}
