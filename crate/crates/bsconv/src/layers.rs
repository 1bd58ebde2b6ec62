//! Sparse convolution arithmetic and the layer/block forwards built on it.
//!
//! The free functions at the top (`conv_forward`, `conv_backward_*`,
//! pooling, batch-norm and PReLU kernels) are the single implementation of
//! each piece of math; both the pure block forwards here and the recording
//! tape in [`crate::tape`] call them, so the trained network and the
//! reference compositions cannot drift apart.
//!
//! Layer outputs live on explicit coordinate sets: stride-1 layers emit at
//! their input sites, stride-2 blocks emit at floor-divided coarse sites,
//! and upsampling emits at cached finer-level sites.  An output site whose
//! window covers no active input gets zero features.

use crate::binarize::binarize_weights;
use crate::error::LayerError;
use crate::mat::Mat;
use crate::sparse::{
    build_kernel_map, build_sparse_tensor, Coord, KernelMap, KernelOffsets, SparseTensor,
};

// ---------------------------------------------------------------------------
// Core kernels shared by the pure forwards and the autodiff tape.

/// Gather convolution: `out[r_out] += x[r_in] · w[j]` over the map's pairs.
pub fn conv_forward(x: &Mat, map: &KernelMap, w: &[Mat]) -> Mat {
    let out_c = w[0].cols();
    let mut out = Mat::zeros(map.num_outputs(), out_c);
    for (j, pairs) in map.pairs().iter().enumerate() {
        let wj = &w[j];
        for &(r_in, r_out) in pairs {
            let xrow = x.row(r_in);
            let orow = out.row_mut(r_out);
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = wj.row(i);
                for (o, &wv) in wrow.iter().enumerate() {
                    orow[o] += xi * wv;
                }
            }
        }
    }
    out
}

/// Input gradient of [`conv_forward`]: `g[r_in] += u[r_out] · w[j]ᵀ`.
pub fn conv_backward_input(u: &Mat, map: &KernelMap, w: &[Mat]) -> Mat {
    let in_c = w[0].rows();
    let mut g = Mat::zeros(map.num_inputs(), in_c);
    for (j, pairs) in map.pairs().iter().enumerate() {
        let wj = &w[j];
        for &(r_in, r_out) in pairs {
            let urow = u.row(r_out);
            let grow = g.row_mut(r_in);
            for (i, gv) in grow.iter_mut().enumerate() {
                let wrow = wj.row(i);
                let mut acc = 0.0;
                for (o, &uv) in urow.iter().enumerate() {
                    acc += uv * wrow[o];
                }
                *gv += acc;
            }
        }
    }
    g
}

/// Weight gradient of [`conv_forward`]: per offset, the sum of outer
/// products `x[r_in]ᵀ ⊗ u[r_out]`.
pub fn conv_backward_weights(x: &Mat, u: &Mat, map: &KernelMap, in_c: usize, out_c: usize) -> Vec<Mat> {
    let mut grads = vec![Mat::zeros(in_c, out_c); map.pairs().len()];
    for (j, pairs) in map.pairs().iter().enumerate() {
        let gj = &mut grads[j];
        for &(r_in, r_out) in pairs {
            let xrow = x.row(r_in);
            let urow = u.row(r_out);
            for (i, &xi) in xrow.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let grow = gj.row_mut(i);
                for (o, &uv) in urow.iter().enumerate() {
                    grow[o] += xi * uv;
                }
            }
        }
    }
    grads
}

/// Scatter (transposed) convolution: input lives at the map's *output*
/// rows, result at its *input* rows: `out[r_in] += y[r_out] · w[j]`.
pub fn conv_transpose_forward(y: &Mat, map: &KernelMap, w: &[Mat]) -> Mat {
    let out_c = w[0].cols();
    let mut out = Mat::zeros(map.num_inputs(), out_c);
    for (j, pairs) in map.pairs().iter().enumerate() {
        let wj = &w[j];
        for &(r_in, r_out) in pairs {
            let yrow = y.row(r_out);
            let orow = out.row_mut(r_in);
            for (i, &yi) in yrow.iter().enumerate() {
                if yi == 0.0 {
                    continue;
                }
                let wrow = wj.row(i);
                for (o, &wv) in wrow.iter().enumerate() {
                    orow[o] += yi * wv;
                }
            }
        }
    }
    out
}

/// Input gradient of [`conv_transpose_forward`]: `g[r_out] += u[r_in] · w[j]ᵀ`.
pub fn conv_transpose_backward_input(u: &Mat, map: &KernelMap, w: &[Mat]) -> Mat {
    let in_c = w[0].rows();
    let mut g = Mat::zeros(map.num_outputs(), in_c);
    for (j, pairs) in map.pairs().iter().enumerate() {
        let wj = &w[j];
        for &(r_in, r_out) in pairs {
            let urow = u.row(r_in);
            let grow = g.row_mut(r_out);
            for (i, gv) in grow.iter_mut().enumerate() {
                let wrow = wj.row(i);
                let mut acc = 0.0;
                for (o, &uv) in urow.iter().enumerate() {
                    acc += uv * wrow[o];
                }
                *gv += acc;
            }
        }
    }
    g
}

/// Weight gradient of [`conv_transpose_forward`]: per offset,
/// `y[r_out]ᵀ ⊗ u[r_in]` summed over pairs.
pub fn conv_transpose_backward_weights(
    y: &Mat,
    u: &Mat,
    map: &KernelMap,
    in_c: usize,
    out_c: usize,
) -> Vec<Mat> {
    let mut grads = vec![Mat::zeros(in_c, out_c); map.pairs().len()];
    for (j, pairs) in map.pairs().iter().enumerate() {
        let gj = &mut grads[j];
        for &(r_in, r_out) in pairs {
            let yrow = y.row(r_out);
            let urow = u.row(r_in);
            for (i, &yi) in yrow.iter().enumerate() {
                if yi == 0.0 {
                    continue;
                }
                let grow = gj.row_mut(i);
                for (o, &uv) in urow.iter().enumerate() {
                    grow[o] += yi * uv;
                }
            }
        }
    }
    grads
}

/// Children per coarse cell of a pooling map (pairs counted over all offsets).
pub fn pool_counts(map: &KernelMap) -> Vec<usize> {
    let mut counts = vec![0usize; map.num_outputs()];
    for pairs in map.pairs() {
        for &(_, r_out) in pairs {
            counts[r_out] += 1;
        }
    }
    counts
}

/// Average pooling over each output cell's active children.
pub fn avg_pool_forward(x: &Mat, map: &KernelMap) -> Mat {
    let counts = pool_counts(map);
    let mut out = Mat::zeros(map.num_outputs(), x.cols());
    for pairs in map.pairs() {
        for &(r_in, r_out) in pairs {
            let xrow = x.row(r_in);
            let orow = out.row_mut(r_out);
            for (c, &v) in xrow.iter().enumerate() {
                orow[c] += v;
            }
        }
    }
    for r in 0..out.rows() {
        let n = counts[r].max(1) as f64;
        for v in out.row_mut(r) {
            *v /= n;
        }
    }
    out
}

/// Gradient of [`avg_pool_forward`]: each child receives its cell's
/// upstream divided by the cell's child count.
pub fn avg_pool_backward(u: &Mat, map: &KernelMap) -> Mat {
    let counts = pool_counts(map);
    let mut g = Mat::zeros(map.num_inputs(), u.cols());
    for pairs in map.pairs() {
        for &(r_in, r_out) in pairs {
            let n = counts[r_out].max(1) as f64;
            let urow = u.row(r_out);
            let grow = g.row_mut(r_in);
            for (c, &v) in urow.iter().enumerate() {
                grow[c] += v / n;
            }
        }
    }
    g
}

/// Unpooling: every child copies its parent's features (the map's output
/// rows are the parents).  Also serves as nearest-parent interpolation.
pub fn unpool_forward(y: &Mat, map: &KernelMap) -> Mat {
    let mut out = Mat::zeros(map.num_inputs(), y.cols());
    for pairs in map.pairs() {
        for &(r_in, r_out) in pairs {
            out.row_mut(r_in).copy_from_slice(y.row(r_out));
        }
    }
    out
}

/// Gradient of [`unpool_forward`]: parents sum their children's upstream.
pub fn unpool_backward(u: &Mat, map: &KernelMap) -> Mat {
    let mut g = Mat::zeros(map.num_outputs(), u.cols());
    for pairs in map.pairs() {
        for &(r_in, r_out) in pairs {
            let urow = u.row(r_in);
            let grow = g.row_mut(r_out);
            for (c, &v) in urow.iter().enumerate() {
                grow[c] += v;
            }
        }
    }
    g
}

/// Per-channel mean and biased variance over all rows.
pub fn batch_norm_stats(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let c = x.cols();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for r in 0..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for r in 0..x.rows() {
        for (j, &v) in x.row(r).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Normalizes with the given statistics and applies the affine transform.
pub fn batch_norm_apply(
    x: &Mat,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let inv_sigma: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    for r in 0..x.rows() {
        let xrow = x.row(r);
        let orow = out.row_mut(r);
        for j in 0..xrow.len() {
            orow[j] = gamma[j] * (xrow[j] - mean[j]) * inv_sigma[j] + beta[j];
        }
    }
    out
}

/// Backward of batch normalization given the saved batch statistics.
/// Returns (input grad, gamma grad, beta grad).
pub fn batch_norm_backward(
    x: &Mat,
    u: &Mat,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
) -> (Mat, Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let c = x.cols();
    let inv_sigma: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_u = vec![0.0; c];
    let mut sum_ux = vec![0.0; c];
    for r in 0..x.rows() {
        let xrow = x.row(r);
        let urow = u.row(r);
        for j in 0..c {
            let xh = (xrow[j] - mean[j]) * inv_sigma[j];
            dgamma[j] += urow[j] * xh;
            dbeta[j] += urow[j];
            sum_u[j] += urow[j];
            sum_ux[j] += urow[j] * xh;
        }
    }
    let mut dx = Mat::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let xrow = x.row(r);
        let urow = u.row(r);
        let drow = dx.row_mut(r);
        for j in 0..c {
            let xh = (xrow[j] - mean[j]) * inv_sigma[j];
            drow[j] =
                gamma[j] * inv_sigma[j] * (urow[j] - sum_u[j] / n - xh * sum_ux[j] / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// PReLU: identity for x ≥ 0, per-channel slope a·x below zero.
pub fn prelu_forward(x: &Mat, slopes: &[f64]) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            if *v < 0.0 {
                *v *= slopes[j];
            }
        }
    }
    out
}

/// Backward of PReLU.  Returns (input grad, slope grad).
pub fn prelu_backward(x: &Mat, u: &Mat, slopes: &[f64]) -> (Mat, Vec<f64>) {
    let mut dx = Mat::zeros(x.rows(), x.cols());
    let mut da = vec![0.0; slopes.len()];
    for r in 0..x.rows() {
        let xrow = x.row(r);
        let urow = u.row(r);
        let drow = dx.row_mut(r);
        for j in 0..xrow.len() {
            if xrow[j] >= 0.0 {
                drow[j] = urow[j];
            } else {
                drow[j] = urow[j] * slopes[j];
                da[j] += urow[j] * xrow[j];
            }
        }
    }
    (dx, da)
}

/// Elementwise ±1 with sign(0) := +1.
pub fn sign_mat(x: &Mat) -> Mat {
    x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

// ---------------------------------------------------------------------------
// Layer-level operations.

/// One window-shift vector, components bounded by the shift distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftDirection(pub [i32; 3]);

impl ShiftDirection {
    pub const ZERO: ShiftDirection = ShiftDirection([0, 0, 0]);

    /// Validates each component against the shift distance.
    pub fn checked(d: [i32; 3], distance: i32) -> Result<Self, LayerError> {
        if d.iter().any(|&c| c.abs() > distance) {
            return Err(LayerError::ShapeMismatch(format!(
                "shift {d:?} exceeds distance {distance}"
            )));
        }
        Ok(ShiftDirection(d))
    }
}

/// Plain sparse convolution onto `out_coords`.
pub fn sparse_conv(
    input: &SparseTensor,
    weights: &[Mat],
    kernel: &KernelOffsets,
    out_coords: Vec<Coord>,
    out_stride: i32,
) -> Result<SparseTensor, LayerError> {
    if weights.len() != kernel.len() {
        return Err(LayerError::ShapeMismatch(format!(
            "{} weight matrices for a {}-offset kernel",
            weights.len(),
            kernel.len()
        )));
    }
    if weights[0].rows() != input.channels() {
        return Err(LayerError::ShapeMismatch(format!(
            "weights expect {} input channels, tensor has {}",
            weights[0].rows(),
            input.channels()
        )));
    }
    let map = build_kernel_map(input, out_coords, kernel, out_stride)?;
    let feats = conv_forward(input.features(), &map, weights);
    Ok(build_sparse_tensor(map.out_coords().to_vec(), feats, out_stride)?)
}

/// Sparse convolution with the whole window recentered by `shift`: the
/// output at `u` aggregates the window centered at `u + shift`.
pub fn shifted_sparse_conv(
    input: &SparseTensor,
    weights: &[Mat],
    kernel_size: i32,
    shift: ShiftDirection,
    out_coords: Vec<Coord>,
    out_stride: i32,
) -> Result<SparseTensor, LayerError> {
    let kernel = KernelOffsets::cube(kernel_size).with_shift(shift.0);
    sparse_conv(input, weights, &kernel, out_coords, out_stride)
}

/// Shape of one grouped shifted-convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SfscLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// One shift per group.
    pub directions: Vec<ShiftDirection>,
    pub kernel_size: i32,
    pub binary: bool,
}

impl SfscLayerSpec {
    pub fn validate(&self) -> Result<(), LayerError> {
        if self.out_channels % self.groups != 0 {
            return Err(LayerError::GroupDivisibility {
                out_channels: self.out_channels,
                groups: self.groups,
            });
        }
        if self.directions.len() != self.groups {
            return Err(LayerError::ShapeMismatch(format!(
                "{} directions for {} groups",
                self.directions.len(),
                self.groups
            )));
        }
        if self.kernel_size < 1 || self.kernel_size % 2 == 0 {
            return Err(LayerError::ShapeMismatch(format!(
                "kernel size {} must be odd and positive",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn group_channels(&self) -> usize {
        self.out_channels / self.groups
    }
}

/// Effective weights for one convolution: either the latent values as-is or
/// their binarized form `scale·sign(W)` (one scale over the whole list).
fn effective_weights(latent: &[Mat], binary: bool) -> Result<Vec<Mat>, LayerError> {
    if binary {
        Ok(binarize_weights(latent)?.dequantize())
    } else {
        Ok(latent.to_vec())
    }
}

/// Grouped shifted convolution: each group convolves the *whole* input with
/// its own weights and shift, and the per-group outputs concatenate
/// group-major along channels.
///
/// `weights[g][j]` is the (in_channels × out_channels/groups) matrix of
/// group `g` at kernel offset `j`.  With `spec.binary`, each group
/// binarizes its weights (own scale) and the input is sign-binarized once.
pub fn sfsc_layer_forward(
    input: &SparseTensor,
    spec: &SfscLayerSpec,
    weights: &[Vec<Mat>],
    out_coords: Vec<Coord>,
) -> Result<SparseTensor, LayerError> {
    spec.validate()?;
    if weights.len() != spec.groups {
        return Err(LayerError::ShapeMismatch(format!(
            "{} weight groups for {} groups",
            weights.len(),
            spec.groups
        )));
    }
    let x = if spec.binary {
        input.with_features(sign_mat(input.features()))
    } else {
        input.clone()
    };
    let mut out: Option<Mat> = None;
    for (g, dir) in spec.directions.iter().enumerate() {
        let w = effective_weights(&weights[g], spec.binary)?;
        let t = shifted_sparse_conv(&x, &w, spec.kernel_size, *dir, out_coords.clone(), input.stride())?;
        out = Some(match out {
            None => t.features().clone(),
            Some(acc) => acc.concat_cols(t.features()),
        });
    }
    let feats = out.expect("at least one group");
    Ok(build_sparse_tensor(out_coords, feats, input.stride())?)
}

/// Affine batch-norm state: learned γ/β plus running statistics.
#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BnState {
    /// γ=1, β=0, running stats (0, 1), ε=1e−5.
    pub fn identity(channels: usize) -> Self {
        BnState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }
}

/// Batch normalization.  Training mode standardizes with the current batch
/// statistics; eval mode uses the stored running statistics.  Running-stat
/// updates are the training loop's job, not this function's.
pub fn batch_norm(x: &Mat, state: &BnState, training: bool) -> Result<Mat, LayerError> {
    if x.cols() != state.gamma.len() {
        return Err(LayerError::ShapeMismatch(format!(
            "{} channels vs {} batch-norm parameters",
            x.cols(),
            state.gamma.len()
        )));
    }
    let out = if training {
        let (mean, var) = batch_norm_stats(x);
        batch_norm_apply(x, &mean, &var, &state.gamma, &state.beta, state.eps)
    } else {
        batch_norm_apply(
            x,
            &state.running_mean,
            &state.running_var,
            &state.gamma,
            &state.beta,
            state.eps,
        )
    };
    Ok(out)
}

/// PReLU over a feature matrix with one slope per channel.
pub fn prelu(x: &Mat, slopes: &[f64]) -> Mat {
    prelu_forward(x, slopes)
}

/// Residual block state: binarize → grouped shifted conv → BN → PReLU on
/// the branch, plus a skip (identity when channels match, otherwise a 1-bit
/// 1×1 convolution).
#[derive(Debug, Clone)]
pub struct SscBlock {
    pub spec: SfscLayerSpec,
    /// `weights[g][j]`: latent branch weights per group per offset.
    pub weights: Vec<Vec<Mat>>,
    pub bn: BnState,
    pub slopes: Vec<f64>,
    /// 1×1 projection latent weights (in × out); `None` means identity skip.
    pub projection: Option<Mat>,
}

/// Forward of one residual block at fixed coordinates.
pub fn ssc_block_forward(
    input: &SparseTensor,
    block: &SscBlock,
    training: bool,
) -> Result<SparseTensor, LayerError> {
    let spec = &block.spec;
    let branch = sfsc_layer_forward(input, spec, &block.weights, input.coords().to_vec())?;
    let branch = batch_norm(branch.features(), &block.bn, training)?;
    let branch = prelu_forward(&branch, &block.slopes);

    let skip = match &block.projection {
        None => {
            if spec.in_channels != spec.out_channels {
                return Err(LayerError::ShapeMismatch(
                    "identity skip needs equal channel counts".into(),
                ));
            }
            input.features().clone()
        }
        Some(w) => {
            let latent = [w.clone()];
            let eff = effective_weights(&latent, spec.binary)?;
            let x = if spec.binary {
                sign_mat(input.features())
            } else {
                input.features().clone()
            };
            x.matmul(&eff[0])
        }
    };
    Ok(input.with_features(branch.add(&skip)))
}

/// Stride-2 encoder transition: binarized size-2 stride-2 conv → BN → PReLU
/// on the main path, average-pool + real-valued 1×1 conv on the skip.
#[derive(Debug, Clone)]
pub struct DownsampleBlock {
    /// Latent weights per offset of the 2³ kernel (in × out).
    pub weights: Vec<Mat>,
    pub bn: BnState,
    pub slopes: Vec<f64>,
    /// Real-valued skip projection (in × out).
    pub skip: Mat,
    pub binary: bool,
}

/// Forward of the downsample block; output stride doubles.
pub fn downsample_block(
    input: &SparseTensor,
    block: &DownsampleBlock,
    training: bool,
) -> Result<SparseTensor, LayerError> {
    let out_stride = input.stride() * 2;
    let coarse = crate::sparse::downsample_coords(input, 2);
    let map = build_kernel_map(input, coarse.clone(), &KernelOffsets::cube(2), out_stride)?;

    let w = effective_weights(&block.weights, block.binary)?;
    let x = if block.binary {
        sign_mat(input.features())
    } else {
        input.features().clone()
    };
    let main = conv_forward(&x, &map, &w);
    let main = batch_norm(&main, &block.bn, training)?;
    let main = prelu_forward(&main, &block.slopes);

    let pooled = avg_pool_forward(input.features(), &map);
    let skip = pooled.matmul(&block.skip);

    Ok(build_sparse_tensor(coarse, main.add(&skip), out_stride)?)
}

/// Decoder transition state for [`upsample_block`].
#[derive(Debug, Clone)]
pub struct UpsampleBlock {
    /// Latent transposed-conv weights per 2³ offset (in_coarse × out_fine).
    pub weights: Vec<Mat>,
    pub bn: BnState,
    pub slopes: Vec<f64>,
    /// Real-valued skip projection (in_coarse × out_fine).
    pub skip: Mat,
    pub binary: bool,
}

/// How the decoder restores resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Binarized transposed conv → BN → PReLU, plus unpool + real 1×1 skip.
    Deconv,
    /// Nearest-parent copy only; no learned weights on the path.
    Interpolate,
}

/// Forward of the upsample transition onto the cached finer-level sites.
pub fn upsample_block(
    input: &SparseTensor,
    block: &UpsampleBlock,
    target_coords: &[Coord],
    mode: UpsampleMode,
    training: bool,
) -> Result<SparseTensor, LayerError> {
    if target_coords.is_empty() {
        return Err(LayerError::MissingTargetCoords);
    }
    let fine_stride = input.stride() / 2;
    assert!(fine_stride >= 1, "input stride must be even to upsample");
    // The pooling map runs fine → coarse; build it against a placeholder
    // tensor holding the target sites.
    let fine = build_sparse_tensor(
        target_coords.to_vec(),
        Mat::zeros(target_coords.len(), 1),
        fine_stride,
    )?;
    let map = build_kernel_map(&fine, input.coords().to_vec(), &KernelOffsets::cube(2), input.stride())?;

    match mode {
        UpsampleMode::Interpolate => {
            let feats = unpool_forward(input.features(), &map);
            Ok(build_sparse_tensor(target_coords.to_vec(), feats, fine_stride)?)
        }
        UpsampleMode::Deconv => {
            let w = effective_weights(&block.weights, block.binary)?;
            let y = if block.binary {
                sign_mat(input.features())
            } else {
                input.features().clone()
            };
            let main = conv_transpose_forward(&y, &map, &w);
            let main = batch_norm(&main, &block.bn, training)?;
            let main = prelu_forward(&main, &block.slopes);

            let skip = unpool_forward(input.features(), &map).matmul(&block.skip);
            Ok(build_sparse_tensor(target_coords.to_vec(), main.add(&skip), fine_stride)?)
        }
    }
}
