//! Sign binarization, bit-packed XNOR/popcount arithmetic, and the gradient
//! surrogates used to train through the sign function.
//!
//! Conventions fixed here and relied on everywhere else:
//! * `sign(0) := +1`, so binarization is total and bit-exact to test.
//! * Weights get one scaling factor per layer (the mean absolute latent
//!   value); activations are never scaled.
//! * Bits pack into `u64` words little-endian (bit `i` of a word is logical
//!   position `64·w + i`); pad bits past the logical length stay zero and
//!   are masked out of every popcount.

use crate::error::BinarizeError;
use crate::mat::Mat;
use crate::sparse::KernelMap;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Rows of packed sign bits; one row per matrix row, `cols` logical bits
/// each.  Bit 1 ⇔ value ≥ 0 ⇔ +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        BitMatrix { rows, cols, words_per_row, words: vec![0; rows * words_per_row] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        assert!(r < self.rows && c < self.cols);
        let w = r * self.words_per_row + c / 64;
        let mask = 1u64 << (c % 64);
        if bit {
            self.words[w] |= mask;
        } else {
            self.words[w] &= !mask;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(r < self.rows && c < self.cols);
        (self.words[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    /// Packed words of one row.
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Unpacks to a ±1 matrix.
    pub fn to_sign_mat(&self) -> Mat {
        let mut m = Mat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                m[(r, c)] = if self.get(r, c) { 1.0 } else { -1.0 };
            }
        }
        m
    }
}

/// Packs feature signs row-wise: bit 1 ⇔ value ≥ 0.  Activations carry no
/// scaling factor.
pub fn binarize_activations(features: &Mat) -> Result<BitMatrix, BinarizeError> {
    if !features.is_finite() {
        return Err(BinarizeError::NonFiniteActivation);
    }
    let mut bits = BitMatrix::zeros(features.rows(), features.cols());
    for r in 0..features.rows() {
        for (c, &v) in features.row(r).iter().enumerate() {
            if v >= 0.0 {
                bits.set(r, c, true);
            }
        }
    }
    Ok(bits)
}

/// Binarized convolution weights: sign bits plus the layer-wise scale.
///
/// The canonical flat bit order (used for serialization) is offset-major,
/// then in-channel, then out-channel: bit `(j·C_in + i)·C_out + o` holds the
/// sign of weight `(j, i, o)`.  A per-(offset, out-channel) row cache over
/// in-channels is kept alongside so XNOR inner products run on whole words.
#[derive(Debug, Clone)]
pub struct BinaryWeights {
    flat: Vec<u64>,
    scale: f64,
    shape: (usize, usize, usize),
    rows: BitMatrix,
}

impl BinaryWeights {
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// (offsets, in_channels, out_channels).
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    /// Canonical flat bit words, offset-major then in then out.
    pub fn flat_words(&self) -> &[u64] {
        &self.flat
    }

    /// Packed in-channel bits for one (offset, out-channel) filter.
    pub fn filter_words(&self, offset: usize, out: usize) -> &[u64] {
        self.rows.row_words(offset * self.shape.2 + out)
    }

    /// Sign of weight (offset, in, out) as a bit.
    pub fn bit(&self, offset: usize, in_c: usize, out: usize) -> bool {
        self.rows.get(offset * self.shape.2 + out, in_c)
    }

    /// The effective real weights `scale · sign(latent)`, one matrix per
    /// offset.
    pub fn dequantize(&self) -> Vec<Mat> {
        let (offsets, in_c, out_c) = self.shape;
        (0..offsets)
            .map(|j| {
                let mut m = Mat::zeros(in_c, out_c);
                for i in 0..in_c {
                    for o in 0..out_c {
                        m[(i, o)] = if self.bit(j, i, o) { self.scale } else { -self.scale };
                    }
                }
                m
            })
            .collect()
    }

    /// Rebuilds from serialized parts (canonical flat words + shape + scale).
    pub fn from_parts(
        flat: Vec<u64>,
        shape: (usize, usize, usize),
        scale: f64,
    ) -> Result<Self, BinarizeError> {
        let (offsets, in_c, out_c) = shape;
        let total = offsets * in_c * out_c;
        if flat.len() != words_for(total) {
            return Err(BinarizeError::LengthMismatch(flat.len() * 64, total));
        }
        let mut rows = BitMatrix::zeros(offsets * out_c, in_c);
        for j in 0..offsets {
            for i in 0..in_c {
                for o in 0..out_c {
                    let idx = (j * in_c + i) * out_c + o;
                    if (flat[idx / 64] >> (idx % 64)) & 1 == 1 {
                        rows.set(j * out_c + o, i, true);
                    }
                }
            }
        }
        Ok(BinaryWeights { flat, scale, shape, rows })
    }
}

/// Binarizes latent weights: bit 1 ⇔ weight ≥ 0, scale = mean absolute
/// latent value over the whole layer.
pub fn binarize_weights(per_offset: &[Mat]) -> Result<BinaryWeights, BinarizeError> {
    assert!(!per_offset.is_empty(), "at least one offset matrix");
    let in_c = per_offset[0].rows();
    let out_c = per_offset[0].cols();
    let offsets = per_offset.len();
    let total = offsets * in_c * out_c;
    let mut flat = vec![0u64; words_for(total)];
    let mut rows = BitMatrix::zeros(offsets * out_c, in_c);
    let mut abs_sum = 0.0;
    for (j, m) in per_offset.iter().enumerate() {
        assert_eq!((m.rows(), m.cols()), (in_c, out_c), "offset matrices must share shape");
        if !m.is_finite() {
            return Err(BinarizeError::NonFiniteWeight);
        }
        for i in 0..in_c {
            for o in 0..out_c {
                let v = m[(i, o)];
                abs_sum += v.abs();
                if v >= 0.0 {
                    let idx = (j * in_c + i) * out_c + o;
                    flat[idx / 64] |= 1 << (idx % 64);
                    rows.set(j * out_c + o, i, true);
                }
            }
        }
    }
    let scale = abs_sum / total as f64;
    if scale == 0.0 {
        return Err(BinarizeError::DegenerateScale);
    }
    Ok(BinaryWeights { flat, scale, shape: (offsets, in_c, out_c), rows })
}

/// Integer dot product of two ±1 vectors held as packed sign bits:
/// `2·popcount(XNOR) − n`, with pad bits masked out of the count.
pub fn xnor_popcount_dot(a: &[u64], w: &[u64], n: usize) -> Result<i64, BinarizeError> {
    if a.len() != w.len() {
        return Err(BinarizeError::LengthMismatch(a.len() * 64, w.len() * 64));
    }
    if a.len() != words_for(n) {
        return Err(BinarizeError::LengthMismatch(a.len() * 64, n));
    }
    let mut pc = 0u32;
    let full = n / 64;
    for k in 0..full {
        pc += (!(a[k] ^ w[k])).count_ones();
    }
    let rem = n % 64;
    if rem > 0 {
        let mask = (1u64 << rem) - 1;
        pc += ((!(a[full] ^ w[full])) & mask).count_ones();
    }
    Ok(2 * pc as i64 - n as i64)
}

/// Convolution evaluated entirely in bit arithmetic: activations are sign
/// bits, weights are [`BinaryWeights`], and each output accumulates
/// `scale · xnor_popcount_dot` over the kernel map's pairs.
///
/// Matches the real-valued convolution with weights `scale·sign(W)` and
/// activations `sign(A)` up to float rounding.
pub fn xnor_sparse_conv(
    features: &Mat,
    map: &KernelMap,
    weights: &BinaryWeights,
) -> Result<Mat, BinarizeError> {
    let (offsets, in_c, out_c) = weights.shape();
    if features.cols() != in_c {
        return Err(BinarizeError::LengthMismatch(features.cols(), in_c));
    }
    if map.pairs().len() != offsets {
        return Err(BinarizeError::LengthMismatch(map.pairs().len(), offsets));
    }
    let act = binarize_activations(features)?;
    let mut out = Mat::zeros(map.num_outputs(), out_c);
    for (j, pairs) in map.pairs().iter().enumerate() {
        for &(r_in, r_out) in pairs {
            let a = act.row_words(r_in);
            for o in 0..out_c {
                let dot = xnor_popcount_dot(a, weights.filter_words(j, o), in_c)?;
                out[(r_out, o)] += weights.scale() * dot as f64;
            }
        }
    }
    Ok(out)
}

/// Piecewise polynomial approximation of sign (the differentiable stand-in
/// whose derivative backs activation binarization):
/// −1 below −1, `2x+x²` on [−1,0), `2x−x²` on [0,1), +1 from 1 up.
pub fn sign_surrogate(x: f64) -> f64 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        2.0 * x + x * x
    } else if x < 1.0 {
        2.0 * x - x * x
    } else {
        1.0
    }
}

/// Derivative of [`sign_surrogate`]: `2+2x` on [−1,0), `2−2x` on [0,1),
/// zero outside.  This is the backward pass of activation binarization.
pub fn sign_surrogate_grad(x: f64) -> f64 {
    if (-1.0..0.0).contains(&x) {
        2.0 + 2.0 * x
    } else if (0.0..1.0).contains(&x) {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

/// Clipped straight-through pass for one weight: upstream flows iff the
/// latent value sits inside [−1, 1].  The layer-wise scale's own gradient is
/// handled by [`binary_weight_backward`].
pub fn weight_ste_grad(upstream: f64, latent: f64) -> f64 {
    if latent.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

/// Backward of the binarized-weight forward `Ŵ = scale·sign(W)` with
/// `scale = mean|W|`, given `upstream = ∂L/∂Ŵ`.
///
/// Two paths sum per element: the clipped straight-through pass for the sign
/// (upstream · scale where |W| ≤ 1), and the exact scale path
/// `(Σ upstream·sign(W)) · sign(W)/N`.
pub fn binary_weight_backward(upstream: &[Mat], latent: &[Mat]) -> Vec<Mat> {
    assert_eq!(upstream.len(), latent.len(), "one upstream matrix per offset");
    let n: usize = latent.iter().map(|m| m.rows() * m.cols()).sum();
    let scale: f64 = latent.iter().flat_map(|m| m.data()).map(|w| w.abs()).sum::<f64>() / n as f64;
    let sign = |w: f64| if w >= 0.0 { 1.0 } else { -1.0 };
    let cross: f64 = upstream
        .iter()
        .zip(latent)
        .flat_map(|(u, w)| u.data().iter().zip(w.data()))
        .map(|(&u, &w)| u * sign(w))
        .sum();
    upstream
        .iter()
        .zip(latent)
        .map(|(u, w)| {
            let mut g = Mat::zeros(u.rows(), u.cols());
            for (gd, (&uu, &ww)) in
                g.data_mut().iter_mut().zip(u.data().iter().zip(w.data()))
            {
                *gd = weight_ste_grad(uu, ww) * scale + cross * sign(ww) / n as f64;
            }
            g
        })
        .collect()
}
