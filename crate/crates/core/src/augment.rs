//! The eight flips/rotations of a square, used to build the two augmented
//! views of a training patch and to map network outputs back into alignment.

use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// Element of the dihedral group of order 8.
///
/// Acts as `rotate^k(flip^h(x))`: an optional horizontal mirror first, then
/// `k` counter-clockwise quarter turns. One quarter turn maps an `H x W`
/// image to `W x H` with `out[i][j] = in[j][W - 1 - i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DihedralOp {
    quarter_turns: u8,
    flip: bool,
}

impl DihedralOp {
    pub const IDENTITY: DihedralOp = DihedralOp {
        quarter_turns: 0,
        flip: false,
    };

    /// All elements, ordered by [`DihedralOp::index`].
    pub const ALL: [DihedralOp; 8] = [
        DihedralOp::new(0, false),
        DihedralOp::new(1, false),
        DihedralOp::new(2, false),
        DihedralOp::new(3, false),
        DihedralOp::new(0, true),
        DihedralOp::new(1, true),
        DihedralOp::new(2, true),
        DihedralOp::new(3, true),
    ];

    pub const fn new(quarter_turns: u8, flip: bool) -> Self {
        DihedralOp {
            quarter_turns: quarter_turns % 4,
            flip,
        }
    }

    pub fn quarter_turns(self) -> u8 {
        self.quarter_turns
    }

    pub fn flip(self) -> bool {
        self.flip
    }

    /// `k + 4h`, in `0..8`.
    pub fn index(self) -> usize {
        self.quarter_turns as usize + 4 * self.flip as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 8]
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            // reflections are involutions
            self
        } else {
            DihedralOp::new((4 - self.quarter_turns) % 4, false)
        }
    }

    /// The element acting as `outer` after `inner`.
    ///
    /// A mirror conjugates a rotation into its inverse, so
    /// `r^a f^p r^b f^q = r^(a ± b) f^(p xor q)` with the sign negative when `p` is set.
    pub fn compose(outer: DihedralOp, inner: DihedralOp) -> DihedralOp {
        let b = if outer.flip {
            (4 - inner.quarter_turns) % 4
        } else {
            inner.quarter_turns
        };
        DihedralOp::new(outer.quarter_turns + b, outer.flip ^ inner.flip)
    }

    /// Uniform draw over the 8 elements; always consumes exactly one `u32`.
    pub fn sample<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        Self::from_index((rng.next_u32() >> 29) as usize)
    }

    pub fn swaps_axes(self) -> bool {
        self.quarter_turns % 2 == 1
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Coordinate in the `h x w` input that lands at `(i, j)` of the output.
    pub fn source_coord(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut i, mut j) = (i, j);
        for m in (0..self.quarter_turns).rev() {
            // width of the image entering quarter turn number m
            let w_in = if m % 2 == 0 { w } else { h };
            (i, j) = (j, w_in - 1 - i);
        }
        if self.flip {
            j = w - 1 - j;
        }
        (i, j)
    }

    /// Gather indices for applying `self` to every trailing `H x W` plane of `shape`.
    pub fn index_map(self, shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = shape.len();
        if n < 2 {
            return Err(Error::shape("dihedral", format!("need at least 2 axes, got {shape:?}")));
        }
        let (h, w) = (shape[n - 2], shape[n - 1]);
        if self.swaps_axes() && h != w {
            return Err(Error::shape(
                "dihedral",
                format!("odd rotation of non-square {h}x{w} plane"),
            ));
        }
        let (oh, ow) = self.output_dims(h, w);
        let planes: usize = shape[..n - 2].iter().product();
        let plane_map = self.plane_map(h, w);
        let mut index = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            index.extend(plane_map.iter().map(|&s| p * h * w + s));
        }
        let mut out_shape = shape.to_vec();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        Ok((index, out_shape))
    }

    fn plane_map(self, h: usize, w: usize) -> Vec<usize> {
        let (oh, ow) = self.output_dims(h, w);
        let mut map = Vec::with_capacity(h * w);
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = self.source_coord(i, j, h, w);
                map.push(si * w + sj);
            }
        }
        map
    }

    /// Applies the op to the trailing two axes; a pure permutation.
    pub fn apply<F: Scalar>(self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (index, shape) = self.index_map(x.shape())?;
        ops::gather(x, &index, shape)
    }
}

impl Default for DihedralOp {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for DihedralOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rot{}{}", self.quarter_turns * 90, if self.flip { "+flip" } else { "" })
    }
}

/// Gather indices applying `ops[i]` to sample `i` of a `[N, C, H, W]` tensor.
pub fn batch_index_map(ops: &[DihedralOp], shape: &[usize]) -> Result<(Arc<[usize]>, Vec<usize>)> {
    let &[n, c, h, w] = shape else {
        return Err(Error::shape("dihedral batch", format!("expected [N,C,H,W], got {shape:?}")));
    };
    if ops.len() != n {
        return Err(Error::shape(
            "dihedral batch",
            format!("{} ops for batch of {n}", ops.len()),
        ));
    }
    if h != w && ops.iter().any(|g| g.swaps_axes()) {
        return Err(Error::shape("dihedral batch", format!("odd rotation of non-square {h}x{w} patch")));
    }
    let sample = c * h * w;
    let mut index = Vec::with_capacity(n * sample);
    let mut out = shape.to_vec();
    for (s, g) in ops.iter().enumerate() {
        let (oh, ow) = g.output_dims(h, w);
        (out[2], out[3]) = (oh, ow);
        let plane = g.plane_map(h, w);
        for ch in 0..c {
            let base = s * sample + ch * h * w;
            index.extend(plane.iter().map(|&p| base + p));
        }
    }
    Ok((index.into(), out))
}

pub fn apply_batch<F: Scalar>(ops: &[DihedralOp], x: &Tensor<F>) -> Result<Tensor<F>> {
    let (index, shape) = batch_index_map(ops, x.shape())?;
    ops::gather(x, &index, shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn img(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| (rng.next_u32() >> 8) as f32)
    }

    #[test]
    fn quarter_turn_convention() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = DihedralOp::new(1, false).apply(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn flip_mirrors_columns() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = DihedralOp::new(0, true).apply(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let x = img(5, 5, 1);
        assert!(DihedralOp::IDENTITY.apply(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(DihedralOp::new(1, false).inverse(), DihedralOp::new(3, false));
        assert_eq!(DihedralOp::new(0, true).inverse(), DihedralOp::new(0, true));
    }

    #[test]
    fn exactly_eight_distinct_elements() {
        let x = img(4, 4, 2);
        let images: Vec<_> = DihedralOp::ALL.iter().map(|g| g.apply(&x).unwrap().into_data()).collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(images[a], images[b], "{} == {}", DihedralOp::ALL[a], DihedralOp::ALL[b]);
            }
        }
    }

    #[test]
    fn inverse_undoes_apply_on_random_images() {
        for seed in 0..5 {
            let x = img(7, 7, seed);
            for g in DihedralOp::ALL {
                let y = g.inverse().apply(&g.apply(&x).unwrap()).unwrap();
                assert!(y.bit_eq(&x), "{g}");
            }
        }
    }

    #[test]
    fn cayley_table_matches_action() {
        let x = img(6, 6, 3);
        for g2 in DihedralOp::ALL {
            for g1 in DihedralOp::ALL {
                let direct = g2.apply(&g1.apply(&x).unwrap()).unwrap();
                let composed = DihedralOp::compose(g2, g1).apply(&x).unwrap();
                assert!(direct.bit_eq(&composed), "{g2} after {g1}");
            }
            assert_eq!(DihedralOp::compose(g2, g2.inverse()), DihedralOp::IDENTITY);
            assert_eq!(DihedralOp::compose(DihedralOp::IDENTITY, g2), g2);
        }
    }

    #[test]
    fn odd_rotation_requires_square() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(DihedralOp::new(1, false).apply(&x).is_err());
        assert_eq!(DihedralOp::new(2, true).apply(&x).unwrap().shape(), &[1, 2, 3]);
    }

    #[test]
    fn leading_axes_untouched() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| i as f32);
        let g = DihedralOp::new(3, true);
        let y = g.apply(&x).unwrap();
        for p in 0..6 {
            let plane = Tensor::new(vec![4, 4], x.data()[p * 16..(p + 1) * 16].to_vec()).unwrap();
            assert_eq!(&y.data()[p * 16..(p + 1) * 16], g.apply(&plane).unwrap().data());
        }
    }

    #[test]
    fn batch_apply_uses_per_sample_ops() {
        let x = Tensor::from_fn(&[3, 2, 3, 3], |i| i as f32);
        let ops = [DihedralOp::new(1, false), DihedralOp::IDENTITY, DihedralOp::new(2, true)];
        let y = apply_batch(&ops, &x).unwrap();
        for (s, g) in ops.iter().enumerate() {
            let sample = Tensor::new(vec![2, 3, 3], x.data()[s * 18..(s + 1) * 18].to_vec()).unwrap();
            assert_eq!(&y.data()[s * 18..(s + 1) * 18], g.apply(&sample).unwrap().data());
        }
    }

    #[test]
    fn sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 8];
        let draws = 80_000;
        for _ in 0..draws {
            counts[DihedralOp::sample(&mut rng).index()] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((0.115..=0.135).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| DihedralOp::sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
        assert_ne!(seq(5), seq(6));
    }
}
