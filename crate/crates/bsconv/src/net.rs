//! Network builders for sparse voxel segmentation, with a named parameter
//! store shared by training, checkpointing, architecture derivation, and
//! cost accounting.
//!
//! Two families are provided.  `Fcn` is an encoder pyramid whose per-level
//! features pass real-valued 1×1 score layers, get nearest-upsampled to
//! full resolution and summed.  `Unet` mirrors the encoder with a decoder
//! of learned transposed-conv transitions and encoder-feature
//! concatenation, ending in a real-valued linear classifier.
//!
//! Channel plan: level k carries `base_filters + k·filters_step` channels;
//! each downsample adds a step, each decoder upsample removes one.
//!
//! In binary networks every residual-block convolution, projection and
//! level transition is binarized — except the input block and the
//! classifier/score layers, which stay real, as do the 1×1 convolutions on
//! downsample/upsample skip paths.  In `search_mode`, each residual block
//! conv becomes a fused 5×5×5 convolution mixing all candidate shift
//! windows, weighted by relaxed per-group selectors.
//!
//! All parameters are stored as f64 but every write rounds through f32,
//! so serializing to 32-bit containers is lossless.

use crate::cost::{CostRecorder, CostReport};
use crate::error::NetError;
use crate::mat::Mat;
use crate::search::{
    window_matrix, RelaxMode, SearchSpace, ShiftConfig, argmax_rows, extract_subwindow, relax,
};
use crate::sparse::{
    build_kernel_map, build_sparse_tensor, downsample_coords, KernelMap, KernelOffsets,
    SparseTensor,
};
use crate::tape::{NodeId, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fcn,
    Unet,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(Family::Fcn),
            "unet" => Ok(Family::Unet),
            other => Err(format!("unknown family '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub levels: usize,
    pub base_filters: usize,
    pub filters_step: usize,
    pub blocks_per_level: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub binary: bool,
    pub groups: usize,
    pub shift_config: Option<ShiftConfig>,
    pub search_mode: bool,
    pub relax_mode: RelaxMode,
}

impl NetworkSpec {
    /// Named preset: `fcn-s`, `fcn-h`, `unet-s`, or `unet-h`.
    pub fn preset(name: &str, num_classes: usize) -> Result<NetworkSpec, NetError> {
        let (family, base, step, blocks, levels) = match name {
            "fcn-s" => (Family::Fcn, 16, 16, 1, 8),
            "fcn-h" => (Family::Fcn, 24, 24, 2, 8),
            "unet-s" => (Family::Unet, 16, 16, 1, 6),
            "unet-h" => (Family::Unet, 32, 32, 2, 6),
            other => return Err(NetError::InvalidSpec(format!("unknown preset '{other}'"))),
        };
        Ok(NetworkSpec {
            family,
            levels,
            base_filters: base,
            filters_step: step,
            blocks_per_level: blocks,
            num_classes,
            in_channels: 1,
            binary: true,
            groups: 1,
            shift_config: None,
            search_mode: false,
            relax_mode: RelaxMode::Sigmoid,
        })
    }

    /// Channels at pyramid level `k`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_filters + k * self.filters_step
    }

    /// Number of residual blocks that carry a shift assignment, in forward
    /// order: all encoder blocks, then (for `Unet`) all decoder blocks.
    pub fn num_searchable(&self) -> usize {
        let enc = self.levels * self.blocks_per_level;
        match self.family {
            Family::Fcn => enc,
            Family::Unet => enc + (self.levels - 1) * self.blocks_per_level,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.levels < 2 {
            return Err(NetError::InvalidSpec("need at least 2 levels".into()));
        }
        if self.base_filters == 0 || self.filters_step == 0 {
            return Err(NetError::InvalidSpec("filter counts must be positive".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(NetError::InvalidSpec("need at least one block per level".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.in_channels == 0 {
            return Err(NetError::InvalidSpec("input needs at least one channel".into()));
        }
        if self.groups == 0 {
            return Err(NetError::InvalidSpec("need at least one group".into()));
        }
        for k in 0..self.levels {
            if self.channels(k) % self.groups != 0 {
                return Err(NetError::InvalidSpec(format!(
                    "level {k} has {} channels, not divisible by {} groups",
                    self.channels(k),
                    self.groups
                )));
            }
        }
        if self.search_mode && self.shift_config.is_some() {
            return Err(NetError::InvalidSpec(
                "search mode and a fixed shift config are mutually exclusive".into(),
            ));
        }
        if let Some(cfg) = &self.shift_config {
            if cfg.num_groups() != self.groups {
                return Err(NetError::InvalidSpec(format!(
                    "shift config has {} groups, spec has {}",
                    cfg.num_groups(),
                    self.groups
                )));
            }
            if cfg.layers.len() != 1 && cfg.layers.len() != self.num_searchable() {
                return Err(NetError::InvalidSpec(format!(
                    "shift config has {} layers, network has {} searchable blocks",
                    cfg.layers.len(),
                    self.num_searchable()
                )));
            }
            for d in cfg.layers.iter().flatten() {
                if d.iter().any(|c| c.abs() > 1) {
                    return Err(NetError::InvalidSpec(format!(
                        "shift direction {d:?} exceeds unit distance"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rounds every entry through f32 so the value survives 32-bit
/// serialization bit-exactly.
pub fn round_mat_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// What a named tensor is for: a trainable weight (counted in the storage
/// census), a trainable architecture parameter, or a running-statistics
/// buffer (neither counted nor gradient-trained).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Weight,
    Arch,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub data: Mat,
    /// Logical dims for serialization, e.g. `[27, in, out]` for a stacked
    /// conv weight whose `data` is the (27·in × out) matrix.
    pub shape: Vec<usize>,
    pub class: ParamClass,
    /// True when the tensor is stored 1-bit in a deployed model.
    pub binary: bool,
}

impl ParamTensor {
    pub fn trainable(&self) -> bool {
        self.class != ParamClass::Buffer
    }
}

/// Insertion-ordered named tensor collection.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, mut data: Mat, shape: Vec<usize>, class: ParamClass, binary: bool) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        round_mat_f32(&mut data);
        self.index.insert(name.to_string(), self.tensors.len());
        self.tensors.push(ParamTensor { name: name.to_string(), data, shape, class, binary });
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Replaces a tensor's values (f32-rounded); the shape must match.
    pub fn set_data(&mut self, name: &str, mut data: Mat) -> Result<(), NetError> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| NetError::LayerNotFound(name.to_string()))?;
        if (data.rows(), data.cols()) != (t.data.rows(), t.data.cols()) {
            return Err(NetError::ShapeMismatch(format!(
                "{name}: {}×{} vs stored {}×{}",
                data.rows(),
                data.cols(),
                t.data.rows(),
                t.data.cols()
            )));
        }
        round_mat_f32(&mut data);
        t.data = data;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// (real, binary) trainable-weight element counts.  Buffers and
    /// architecture parameters are excluded.
    pub fn census(&self) -> (u64, u64) {
        let mut real = 0u64;
        let mut binary = 0u64;
        for t in &self.tensors {
            if t.class != ParamClass::Weight {
                continue;
            }
            let n = (t.data.rows() * t.data.cols()) as u64;
            if t.binary {
                binary += n;
            } else {
                real += n;
            }
        }
        (real, binary)
    }
}

/// One residual block's place in the architecture.
#[derive(Debug, Clone)]
pub struct BlockDesc {
    pub prefix: String,
    pub level: usize,
    pub in_c: usize,
    pub out_c: usize,
    /// Real-valued regardless of the network's binary flag (input block).
    pub always_real: bool,
}

fn encoder_blocks(spec: &NetworkSpec) -> Vec<BlockDesc> {
    let mut v = vec![BlockDesc {
        prefix: "input".into(),
        level: 0,
        in_c: spec.in_channels,
        out_c: spec.channels(0),
        always_real: true,
    }];
    for k in 0..spec.levels {
        for b in 0..spec.blocks_per_level {
            v.push(BlockDesc {
                prefix: format!("enc{k}.b{b}"),
                level: k,
                in_c: spec.channels(k),
                out_c: spec.channels(k),
                always_real: false,
            });
        }
    }
    v
}

fn decoder_blocks(spec: &NetworkSpec) -> Vec<BlockDesc> {
    let mut v = Vec::new();
    if spec.family != Family::Unet {
        return v;
    }
    for k in (0..spec.levels - 1).rev() {
        for b in 0..spec.blocks_per_level {
            let c = spec.channels(k);
            v.push(BlockDesc {
                prefix: format!("dec{k}.b{b}"),
                level: k,
                in_c: if b == 0 { 2 * c } else { c },
                out_c: c,
                always_real: false,
            });
        }
    }
    v
}

/// Blocks that carry a per-group shift assignment, in forward order.
pub fn searchable_blocks(spec: &NetworkSpec) -> Vec<BlockDesc> {
    let mut v: Vec<BlockDesc> = encoder_blocks(spec).into_iter().skip(1).collect();
    v.extend(decoder_blocks(spec));
    v
}

/// A built network: the spec, its parameters, and the search space used in
/// search mode.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub space: SearchSpace,
}

fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = (6.0 / fan_in as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

impl Network {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network, NetError> {
        spec.validate()?;
        let space = SearchSpace::nine();
        if spec.search_mode {
            // every config direction must fit the fused window
            window_matrix(&space)?;
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_s = space.len();

        let searchable: Vec<String> =
            searchable_blocks(spec).iter().map(|d| d.prefix.clone()).collect();

        let mut add_block = |params: &mut ParamStore, rng: &mut ChaCha8Rng, d: &BlockDesc| {
            let binary = spec.binary && !d.always_real;
            let groups = if d.always_real { 1 } else { spec.groups };
            let out_g = d.out_c / groups;
            let fused = spec.search_mode && searchable.contains(&d.prefix);
            let offsets = if fused { 125 } else { 27 };
            for g in 0..groups {
                params.add(
                    &format!("{}.conv.g{g}", d.prefix),
                    he_uniform(rng, offsets * d.in_c, out_g, offsets * d.in_c),
                    vec![offsets, d.in_c, out_g],
                    ParamClass::Weight,
                    binary,
                );
            }
            if fused {
                params.add(
                    &format!("{}.alpha", d.prefix),
                    Mat::zeros(groups, n_s),
                    vec![groups, n_s],
                    ParamClass::Arch,
                    false,
                );
            }
            params.add(
                &format!("{}.bn.gamma", d.prefix),
                Mat::from_vec(1, d.out_c, vec![1.0; d.out_c]),
                vec![d.out_c],
                ParamClass::Weight,
                false,
            );
            params.add(
                &format!("{}.bn.beta", d.prefix),
                Mat::zeros(1, d.out_c),
                vec![d.out_c],
                ParamClass::Weight,
                false,
            );
            params.add(
                &format!("{}.bn.mean", d.prefix),
                Mat::zeros(1, d.out_c),
                vec![d.out_c],
                ParamClass::Buffer,
                false,
            );
            params.add(
                &format!("{}.bn.var", d.prefix),
                Mat::from_vec(1, d.out_c, vec![1.0; d.out_c]),
                vec![d.out_c],
                ParamClass::Buffer,
                false,
            );
            params.add(
                &format!("{}.prelu", d.prefix),
                Mat::from_vec(1, d.out_c, vec![0.25; d.out_c]),
                vec![d.out_c],
                ParamClass::Weight,
                false,
            );
            if d.in_c != d.out_c {
                params.add(
                    &format!("{}.proj", d.prefix),
                    he_uniform(rng, d.in_c, d.out_c, d.in_c),
                    vec![d.in_c, d.out_c],
                    ParamClass::Weight,
                    binary,
                );
            }
        };

        let mut add_transition =
            |params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_c: usize, out_c: usize, transposed: bool| {
                let name = if transposed { format!("{prefix}.deconv") } else { format!("{prefix}.conv") };
                params.add(
                    &name,
                    he_uniform(rng, 8 * in_c, out_c, 8 * in_c),
                    vec![8, in_c, out_c],
                    ParamClass::Weight,
                    spec.binary,
                );
                params.add(
                    &format!("{prefix}.bn.gamma"),
                    Mat::from_vec(1, out_c, vec![1.0; out_c]),
                    vec![out_c],
                    ParamClass::Weight,
                    false,
                );
                params.add(
                    &format!("{prefix}.bn.beta"),
                    Mat::zeros(1, out_c),
                    vec![out_c],
                    ParamClass::Weight,
                    false,
                );
                params.add(
                    &format!("{prefix}.bn.mean"),
                    Mat::zeros(1, out_c),
                    vec![out_c],
                    ParamClass::Buffer,
                    false,
                );
                params.add(
                    &format!("{prefix}.bn.var"),
                    Mat::from_vec(1, out_c, vec![1.0; out_c]),
                    vec![out_c],
                    ParamClass::Buffer,
                    false,
                );
                params.add(
                    &format!("{prefix}.prelu"),
                    Mat::from_vec(1, out_c, vec![0.25; out_c]),
                    vec![out_c],
                    ParamClass::Weight,
                    false,
                );
                // skip projections stay real even in binary networks
                params.add(
                    &format!("{prefix}.skip"),
                    he_uniform(rng, in_c, out_c, in_c),
                    vec![in_c, out_c],
                    ParamClass::Weight,
                    false,
                );
            };

        // encoder: input block, then per level blocks + downsample
        let enc = encoder_blocks(spec);
        add_block(&mut params, &mut rng, &enc[0]);
        let mut enc_iter = enc[1..].iter();
        for k in 0..spec.levels {
            for _ in 0..spec.blocks_per_level {
                add_block(&mut params, &mut rng, enc_iter.next().expect("encoder desc"));
            }
            if k + 1 < spec.levels {
                add_transition(
                    &mut params,
                    &mut rng,
                    &format!("down{k}"),
                    spec.channels(k),
                    spec.channels(k + 1),
                    false,
                );
            }
        }

        match spec.family {
            Family::Unet => {
                let dec = decoder_blocks(spec);
                let mut dec_iter = dec.iter();
                for k in (0..spec.levels - 1).rev() {
                    add_transition(
                        &mut params,
                        &mut rng,
                        &format!("up{k}"),
                        spec.channels(k + 1),
                        spec.channels(k),
                        true,
                    );
                    for _ in 0..spec.blocks_per_level {
                        add_block(&mut params, &mut rng, dec_iter.next().expect("decoder desc"));
                    }
                }
                let c0 = spec.channels(0);
                params.add(
                    "head.w",
                    he_uniform(&mut rng, c0, spec.num_classes, c0),
                    vec![c0, spec.num_classes],
                    ParamClass::Weight,
                    false,
                );
                params.add(
                    "head.b",
                    Mat::zeros(1, spec.num_classes),
                    vec![spec.num_classes],
                    ParamClass::Weight,
                    false,
                );
            }
            Family::Fcn => {
                for k in 0..spec.levels {
                    let c = spec.channels(k);
                    params.add(
                        &format!("score{k}.w"),
                        he_uniform(&mut rng, c, spec.num_classes, c),
                        vec![c, spec.num_classes],
                        ParamClass::Weight,
                        false,
                    );
                    params.add(
                        &format!("score{k}.b"),
                        Mat::zeros(1, spec.num_classes),
                        vec![spec.num_classes],
                        ParamClass::Weight,
                        false,
                    );
                }
            }
        }

        Ok(Network { spec: spec.clone(), params, space })
    }

    /// The same architecture and parameters under a different shift
    /// assignment.  Weight shapes are direction-independent, so the
    /// parameters transfer verbatim.
    pub fn with_shift_config(&self, config: ShiftConfig) -> Result<Network, NetError> {
        if self.spec.search_mode {
            return Err(NetError::InvalidSpec(
                "cannot pin shifts on a search-mode network".into(),
            ));
        }
        let mut spec = self.spec.clone();
        spec.shift_config = Some(config);
        spec.validate()?;
        Ok(Network { spec, params: self.params.clone(), space: self.space.clone() })
    }

    /// Directions for searchable block number `idx`.
    fn directions_for(&self, idx: usize) -> Vec<[i32; 3]> {
        match &self.spec.shift_config {
            Some(cfg) => cfg.layer(idx).to_vec(),
            None => vec![[0, 0, 0]; self.spec.groups],
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &SparseTensor,
        opts: ForwardOpts<'_>,
    ) -> Result<ForwardOut, NetError> {
        Walk::new(self, tape, opts, input)?.run()
    }

    /// Logits of an eval-mode forward.
    pub fn predict_logits(
        &self,
        input: &SparseTensor,
        binary_active: bool,
    ) -> Result<Mat, NetError> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            input,
            ForwardOpts { training: false, binary_active, cost: None },
        )?;
        Ok(tape.value(out.logits).clone())
    }

    /// Pre-normalization output of the first binary-capable block.
    pub fn tap_output(
        &self,
        input: &SparseTensor,
        binary_active: bool,
    ) -> Result<Mat, NetError> {
        let mut tape = Tape::new();
        let out = self.forward(
            &mut tape,
            input,
            ForwardOpts { training: false, binary_active, cost: None },
        )?;
        let tap = out.tap.ok_or_else(|| NetError::LayerNotFound("first binary block".into()))?;
        Ok(tape.value(tap).clone())
    }

    /// Work and storage for one sample, at the network's own precision.
    pub fn count_cost(&self, input: &SparseTensor) -> Result<CostReport, NetError> {
        let mut tape = Tape::new();
        let mut rec = CostRecorder::new();
        self.forward(
            &mut tape,
            input,
            ForwardOpts { training: false, binary_active: self.spec.binary, cost: Some(&mut rec) },
        )?;
        let (real, binary) = self.params.census();
        Ok(rec.finish(real, binary, input.num_sites()))
    }
}

pub struct ForwardOpts<'a> {
    pub training: bool,
    /// Whether binarization is applied in binary-capable layers.  False
    /// runs the same parameters at full precision (pretraining, the
    /// real branch of sign-correspondence diagnostics).
    pub binary_active: bool,
    pub cost: Option<&'a mut CostRecorder>,
}

impl ForwardOpts<'_> {
    pub fn eval(binary_active: bool) -> Self {
        ForwardOpts { training: false, binary_active, cost: None }
    }

    pub fn train(binary_active: bool) -> Self {
        ForwardOpts { training: true, binary_active, cost: None }
    }
}

pub struct ForwardOut {
    pub logits: NodeId,
    /// Leaf node per parameter name that entered this forward.
    pub param_nodes: HashMap<String, NodeId>,
    /// Batch-norm nodes recorded in training mode, by name prefix
    /// (`enc0.b0.bn`), for running-statistics updates.
    pub bn_nodes: Vec<(String, NodeId)>,
    /// Pre-normalization conv output of the first binary-capable block.
    pub tap: Option<NodeId>,
    /// Selector node per searchable block prefix (search mode only).
    pub pis: Vec<(String, NodeId)>,
}

/// Fused search-mode convolution: binarize (optionally) each group's 5³
/// latent tensor, scale its per-position row bands by the group's window
/// mask `relax(α)·M`, convolve with the 5³ map, and concatenate groups.
pub fn supernet_conv_on_tape(
    tape: &mut Tape,
    x: NodeId,
    group_weights: &[NodeId],
    alpha: NodeId,
    relax_mode: RelaxMode,
    window: &Rc<Mat>,
    map: &Rc<KernelMap>,
    in_c: usize,
    binarize: bool,
) -> (NodeId, NodeId) {
    let pi = match relax_mode {
        RelaxMode::Sigmoid => tape.sigmoid(alpha),
        RelaxMode::Softmax => tape.softmax_rows(alpha),
    };
    let mask = tape.matmul_const(pi, Rc::clone(window));
    let mut parts = Vec::with_capacity(group_weights.len());
    for (g, &v) in group_weights.iter().enumerate() {
        let row = tape.slice_row(mask, g);
        let eff = if binarize { tape.bin_weights(v) } else { v };
        let scaled = tape.row_block_scale(eff, row, in_c);
        parts.push(tape.conv(x, scaled, Rc::clone(map)));
    }
    let out = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
    (out, pi)
}

/// Placeholder tensors per pyramid level (coordinates only).
struct LevelGrid {
    levels: Vec<SparseTensor>,
}

impl LevelGrid {
    fn build(input: &SparseTensor, levels: usize) -> Result<LevelGrid, NetError> {
        let mut v = vec![input.with_features(Mat::zeros(input.num_sites(), 0))];
        for _ in 1..levels {
            let prev = v.last().unwrap();
            let coarse = downsample_coords(prev, 2);
            let stride = prev.stride() * 2;
            let n = coarse.len();
            v.push(build_sparse_tensor(coarse, Mat::zeros(n, 0), stride)?);
        }
        Ok(LevelGrid { levels: v })
    }

    fn sites(&self, k: usize) -> usize {
        self.levels[k].num_sites()
    }

    /// Same-level 3³ map with a window shift.
    fn k3_map(&self, k: usize, dir: [i32; 3]) -> Result<Rc<KernelMap>, NetError> {
        let t = &self.levels[k];
        let map = build_kernel_map(
            t,
            t.coords().to_vec(),
            &KernelOffsets::cube(3).with_shift(dir),
            t.stride(),
        )?;
        Ok(Rc::new(map))
    }

    /// Same-level 5³ map (fused search window).
    fn k5_map(&self, k: usize) -> Result<Rc<KernelMap>, NetError> {
        let t = &self.levels[k];
        let map = build_kernel_map(t, t.coords().to_vec(), &KernelOffsets::cube(5), t.stride())?;
        Ok(Rc::new(map))
    }

    /// 2³ transition map from level `k` (fine, map inputs) to level `k+1`
    /// (coarse, map outputs).
    fn down_map(&self, k: usize) -> Result<Rc<KernelMap>, NetError> {
        let fine = &self.levels[k];
        let coarse = &self.levels[k + 1];
        let map = build_kernel_map(
            fine,
            coarse.coords().to_vec(),
            &KernelOffsets::cube(2),
            coarse.stride(),
        )?;
        Ok(Rc::new(map))
    }
}

struct Walk<'a, 't> {
    net: &'a Network,
    tape: &'t mut Tape,
    training: bool,
    binary_active: bool,
    cost: Option<&'a mut CostRecorder>,
    grid: LevelGrid,
    input: &'a SparseTensor,
    window: Option<Rc<Mat>>,
    leaves: HashMap<String, NodeId>,
    bn_nodes: Vec<(String, NodeId)>,
    tap: Option<NodeId>,
    pis: Vec<(String, NodeId)>,
    searchable_at: usize,
}

impl<'a, 't> Walk<'a, 't> {
    fn new(
        net: &'a Network,
        tape: &'t mut Tape,
        opts: ForwardOpts<'a>,
        input: &'a SparseTensor,
    ) -> Result<Self, NetError> {
        if input.channels() != net.spec.in_channels {
            return Err(NetError::ShapeMismatch(format!(
                "input has {} channels, spec expects {}",
                input.channels(),
                net.spec.in_channels
            )));
        }
        let grid = LevelGrid::build(input, net.spec.levels)?;
        let window = if net.spec.search_mode {
            Some(Rc::new(window_matrix(&net.space)?))
        } else {
            None
        };
        Ok(Walk {
            net,
            tape,
            training: opts.training,
            binary_active: opts.binary_active,
            cost: opts.cost,
            grid,
            input,
            window,
            leaves: HashMap::new(),
            bn_nodes: Vec::new(),
            tap: None,
            pis: Vec::new(),
            searchable_at: 0,
        })
    }

    fn leaf(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let t = self.net.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        let id = self.tape.leaf(t.data.clone());
        self.leaves.insert(name.to_string(), id);
        id
    }

    fn buffer_vec(&self, name: &str) -> Vec<f64> {
        self.net
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing buffer {name}"))
            .data
            .row(0)
            .to_vec()
    }

    fn bn(&mut self, prefix: &str, x: NodeId, sites: usize, channels: usize) -> NodeId {
        let gamma = self.leaf(&format!("{prefix}.gamma"));
        let beta = self.leaf(&format!("{prefix}.beta"));
        let out = if self.training {
            let node = self.tape.bn_train(x, gamma, beta, 1e-5);
            self.bn_nodes.push((prefix.to_string(), node));
            node
        } else {
            let mean = self.buffer_vec(&format!("{prefix}.mean"));
            let var = self.buffer_vec(&format!("{prefix}.var"));
            self.tape.bn_eval(x, gamma, beta, mean, var, 1e-5)
        };
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.batch_norm(sites, channels);
        }
        out
    }

    fn prelu(&mut self, prefix: &str, x: NodeId, sites: usize, channels: usize) -> NodeId {
        let slopes = self.leaf(&format!("{prefix}.prelu"));
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.prelu(sites, channels);
        }
        self.tape.prelu(x, slopes)
    }

    /// One residual block at level `desc.level`, input node `x`.
    fn ssc_block(&mut self, desc: &BlockDesc, x: NodeId) -> Result<NodeId, NetError> {
        let spec = &self.net.spec;
        let binary = spec.binary && !desc.always_real;
        let binarize = binary && self.binary_active;
        let groups = if desc.always_real { 1 } else { spec.groups };
        let out_g = desc.out_c / groups;
        let sites = self.grid.sites(desc.level);
        let fused = spec.search_mode && !desc.always_real;

        let branch_in = if binarize { self.tape.sign_act(x) } else { x };

        let conv = if fused {
            let idx = self.searchable_at;
            self.searchable_at += 1;
            let _ = idx;
            let map = self.grid.k5_map(desc.level)?;
            let weights: Vec<NodeId> = (0..groups)
                .map(|g| self.leaf(&format!("{}.conv.g{g}", desc.prefix)))
                .collect();
            let alpha = self.leaf(&format!("{}.alpha", desc.prefix));
            let window = Rc::clone(self.window.as_ref().expect("search-mode window"));
            if let Some(rec) = self.cost.as_deref_mut() {
                for _ in 0..groups {
                    rec.conv(map.total_pairs(), desc.in_c, out_g, binarize);
                }
                // per-position kernel masking touches every latent entry
                rec.dense(1, 125 * desc.in_c, desc.out_c);
            }
            let (out, pi) = supernet_conv_on_tape(
                self.tape,
                branch_in,
                &weights,
                alpha,
                spec.relax_mode,
                &window,
                &map,
                desc.in_c,
                binarize,
            );
            self.pis.push((desc.prefix.clone(), pi));
            out
        } else {
            let dirs = if desc.always_real {
                vec![[0, 0, 0]]
            } else {
                let idx = self.searchable_at;
                self.searchable_at += 1;
                self.net.directions_for(idx)
            };
            let mut parts = Vec::with_capacity(groups);
            for (g, dir) in dirs.iter().enumerate() {
                let map = self.grid.k3_map(desc.level, *dir)?;
                let w = self.leaf(&format!("{}.conv.g{g}", desc.prefix));
                let eff = if binarize { self.tape.bin_weights(w) } else { w };
                if let Some(rec) = self.cost.as_deref_mut() {
                    rec.conv(map.total_pairs(), desc.in_c, out_g, binarize);
                }
                parts.push(self.tape.conv(branch_in, eff, map));
            }
            if parts.len() == 1 { parts[0] } else { self.tape.concat_cols(&parts) }
        };

        if self.tap.is_none() && !desc.always_real {
            self.tap = Some(conv);
        }

        let h = self.bn(&format!("{}.bn", desc.prefix), conv, sites, desc.out_c);
        let h = self.prelu(&desc.prefix.clone(), h, sites, desc.out_c);

        let skip = if desc.in_c == desc.out_c {
            if let Some(rec) = self.cost.as_deref_mut() {
                rec.add(sites, desc.out_c);
            }
            x
        } else {
            let proj = self.leaf(&format!("{}.proj", desc.prefix));
            let eff = if binarize { self.tape.bin_weights(proj) } else { proj };
            if let Some(rec) = self.cost.as_deref_mut() {
                rec.conv(sites, desc.in_c, desc.out_c, binarize);
                rec.add(sites, desc.out_c);
            }
            self.tape.matmul(branch_in, eff)
        };
        Ok(self.tape.add(h, skip))
    }

    /// Stride-2 transition from level `k` to `k+1`.
    fn downsample(&mut self, k: usize, x: NodeId) -> Result<NodeId, NetError> {
        let spec = &self.net.spec;
        let prefix = format!("down{k}");
        let in_c = spec.channels(k);
        let out_c = spec.channels(k + 1);
        let binarize = spec.binary && self.binary_active;
        let map = self.grid.down_map(k)?;
        let coarse_sites = self.grid.sites(k + 1);

        let main_in = if binarize { self.tape.sign_act(x) } else { x };
        let w = self.leaf(&format!("{prefix}.conv"));
        let eff = if binarize { self.tape.bin_weights(w) } else { w };
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.conv(map.total_pairs(), in_c, out_c, binarize);
        }
        let main = self.tape.conv(main_in, eff, Rc::clone(&map));
        let main = self.bn(&format!("{prefix}.bn"), main, coarse_sites, out_c);
        let main = self.prelu(&prefix, main, coarse_sites, out_c);

        let pooled = self.tape.avg_pool(x, Rc::clone(&map));
        let skip_w = self.leaf(&format!("{prefix}.skip"));
        let skip = self.tape.matmul(pooled, skip_w);
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.avg_pool(map.total_pairs(), coarse_sites, in_c);
            rec.dense(coarse_sites, in_c, out_c);
            rec.add(coarse_sites, out_c);
        }
        Ok(self.tape.add(main, skip))
    }

    /// Learned transition from level `k+1` back to `k` (transposed conv +
    /// unpooled skip).
    fn upsample(&mut self, k: usize, y: NodeId) -> Result<NodeId, NetError> {
        let spec = &self.net.spec;
        let prefix = format!("up{k}");
        let in_c = spec.channels(k + 1);
        let out_c = spec.channels(k);
        let binarize = spec.binary && self.binary_active;
        let map = self.grid.down_map(k)?;
        let fine_sites = self.grid.sites(k);

        let main_in = if binarize { self.tape.sign_act(y) } else { y };
        let w = self.leaf(&format!("{prefix}.deconv"));
        let eff = if binarize { self.tape.bin_weights(w) } else { w };
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.conv(map.total_pairs(), in_c, out_c, binarize);
        }
        let main = self.tape.conv_t(main_in, eff, Rc::clone(&map));
        let main = self.bn(&format!("{prefix}.bn"), main, fine_sites, out_c);
        let main = self.prelu(&prefix, main, fine_sites, out_c);

        let unpooled = self.tape.unpool(y, Rc::clone(&map));
        let skip_w = self.leaf(&format!("{prefix}.skip"));
        let skip = self.tape.matmul(unpooled, skip_w);
        if let Some(rec) = self.cost.as_deref_mut() {
            rec.dense(fine_sites, in_c, out_c);
            rec.add(fine_sites, out_c);
        }
        Ok(self.tape.add(main, skip))
    }

    fn run(mut self) -> Result<ForwardOut, NetError> {
        let spec = self.net.spec.clone();
        let x0 = self.tape.leaf(self.input.features().clone());

        let enc = encoder_blocks(&spec);
        let mut h = self.ssc_block(&enc[0], x0)?;
        let mut enc_iter = enc[1..].iter();
        let mut level_feats = Vec::with_capacity(spec.levels);
        for k in 0..spec.levels {
            for _ in 0..spec.blocks_per_level {
                h = self.ssc_block(enc_iter.next().expect("encoder desc"), h)?;
            }
            level_feats.push(h);
            if k + 1 < spec.levels {
                h = self.downsample(k, h)?;
            }
        }

        let logits = match spec.family {
            Family::Unet => {
                let dec = decoder_blocks(&spec);
                let mut dec_iter = dec.iter();
                for k in (0..spec.levels - 1).rev() {
                    h = self.upsample(k, h)?;
                    h = self.tape.concat_cols(&[h, level_feats[k]]);
                    for _ in 0..spec.blocks_per_level {
                        h = self.ssc_block(dec_iter.next().expect("decoder desc"), h)?;
                    }
                }
                let w = self.leaf("head.w");
                let b = self.leaf("head.b");
                let sites = self.grid.sites(0);
                if let Some(rec) = self.cost.as_deref_mut() {
                    rec.dense(sites, spec.channels(0), spec.num_classes);
                    rec.add(sites, spec.num_classes);
                }
                let z = self.tape.matmul(h, w);
                self.tape.add_bias(z, b)
            }
            Family::Fcn => {
                // per-level real score layers, nearest-upsampled and summed
                let mut score = |walk: &mut Self, k: usize| -> NodeId {
                    let w = walk.leaf(&format!("score{k}.w"));
                    let b = walk.leaf(&format!("score{k}.b"));
                    let sites = walk.grid.sites(k);
                    if let Some(rec) = walk.cost.as_deref_mut() {
                        rec.dense(sites, spec.channels(k), spec.num_classes);
                        rec.add(sites, spec.num_classes);
                    }
                    let z = walk.tape.matmul(level_feats[k], w);
                    walk.tape.add_bias(z, b)
                };
                let mut s = score(&mut self, spec.levels - 1);
                for k in (0..spec.levels - 1).rev() {
                    let map = self.grid.down_map(k)?;
                    s = self.tape.unpool(s, map);
                    let sk = score(&mut self, k);
                    if let Some(rec) = self.cost.as_deref_mut() {
                        rec.add(self.grid.sites(k), spec.num_classes);
                    }
                    s = self.tape.add(s, sk);
                }
                s
            }
        };

        Ok(ForwardOut {
            logits,
            param_nodes: self.leaves,
            bn_nodes: self.bn_nodes,
            tap: self.tap,
            pis: self.pis,
        })
    }
}

/// Collapses a trained search-mode network to a discrete one: per block,
/// per group, the direction with the largest architecture parameter wins
/// (ties to the lowest index), and the winning 3³ sub-window of the fused
/// kernel transfers verbatim — optionally rescaled by the converged
/// selector weight.  Everything else copies by name.
pub fn derive_architecture(
    supernet: &Network,
    scale_by_pi: bool,
) -> Result<(ShiftConfig, Network), NetError> {
    let spec = &supernet.spec;
    if !spec.search_mode {
        return Err(NetError::InvalidSpec("derivation needs a search-mode network".into()));
    }
    let blocks = searchable_blocks(spec);
    let mut rows = Vec::with_capacity(blocks.len());
    for d in &blocks {
        let alpha = supernet
            .params
            .get(&format!("{}.alpha", d.prefix))
            .ok_or_else(|| NetError::LayerNotFound(format!("{}.alpha", d.prefix)))?;
        let picks = argmax_rows(&alpha.data);
        rows.push(
            picks.iter().map(|&j| supernet.space.directions()[j]).collect::<Vec<_>>(),
        );
    }
    let config = ShiftConfig { layers: rows };

    let mut dspec = spec.clone();
    dspec.search_mode = false;
    dspec.shift_config = Some(config.clone());
    let mut derived = Network::build(&dspec, 0)?;

    let fused_conv_names: std::collections::HashSet<String> = blocks
        .iter()
        .flat_map(|d| (0..spec.groups).map(move |g| format!("{}.conv.g{g}", d.prefix)))
        .collect();

    for t in supernet.params.iter() {
        if t.name.ends_with(".alpha") {
            continue;
        }
        if !fused_conv_names.contains(&t.name) {
            derived.params.set_data(&t.name, t.data.clone())?;
        }
    }
    for (layer_idx, d) in blocks.iter().enumerate() {
        let alpha = &supernet.params.get(&format!("{}.alpha", d.prefix)).unwrap().data;
        let picks = argmax_rows(alpha);
        let pi = relax(alpha, spec.relax_mode);
        for (g, &j) in picks.iter().enumerate() {
            let name = format!("{}.conv.g{g}", d.prefix);
            let fused = &supernet.params.get(&name).unwrap().data;
            let dir = config.layers[layer_idx][g];
            let mut sub = extract_subwindow(fused, d.in_c, dir)?;
            if scale_by_pi {
                let s = pi[(g, j)];
                sub = sub.map(|v| v * s);
            }
            derived.params.set_data(&name, sub)?;
        }
    }
    Ok((config, derived))
}

/// Fraction of matching signs between two equal-shape feature matrices,
/// with sign(0) counted as positive.
pub fn sign_correspondence_taps(a: &Mat, b: &Mat) -> Result<f64, NetError> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(NetError::ShapeMismatch(format!(
            "{}×{} vs {}×{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.rows() * a.cols();
    if n == 0 {
        return Err(NetError::ShapeMismatch("empty activation".into()));
    }
    let matches = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| (x >= 0.0) == (y >= 0.0))
        .count();
    Ok(matches as f64 / n as f64)
}

/// Quantization-error proxy: the real-valued forward of `real_net` versus
/// the binarized forward of `binary_net`, compared by activation signs at
/// the first binary-capable block.
pub fn sign_correspondence(
    real_net: &Network,
    binary_net: &Network,
    input: &SparseTensor,
) -> Result<f64, NetError> {
    let a = real_net.tap_output(input, false)?;
    let b = binary_net.tap_output(input, true)?;
    sign_correspondence_taps(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{
        sfsc_layer_forward, BnState, SfscLayerSpec, ShiftDirection,
    };
    use crate::sparse::Coord;
    use crate::tape::split_stacked;

    fn rand_tensor(rng: &mut ChaCha8Rng, side: i32, occ: f64, channels: usize) -> SparseTensor {
        let mut coords = Vec::new();
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    if rng.random::<f64>() < occ {
                        coords.push(Coord::new(0, x, y, z));
                    }
                }
            }
        }
        if coords.is_empty() {
            coords.push(Coord::new(0, 0, 0, 0));
        }
        let n = coords.len();
        let feats = Mat::from_vec(
            n,
            channels,
            (0..n * channels).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        );
        build_sparse_tensor(coords, feats, 1).unwrap()
    }

    fn tiny_unet(binary: bool) -> NetworkSpec {
        NetworkSpec {
            family: Family::Unet,
            levels: 3,
            base_filters: 8,
            filters_step: 8,
            blocks_per_level: 1,
            num_classes: 3,
            in_channels: 1,
            binary,
            groups: 1,
            shift_config: None,
            search_mode: false,
            relax_mode: RelaxMode::Sigmoid,
        }
    }

    #[test]
    fn preset_channel_plans() {
        let unet_s = NetworkSpec::preset("unet-s", 20).unwrap();
        assert_eq!(
            (0..unet_s.levels).map(|k| unet_s.channels(k)).collect::<Vec<_>>(),
            vec![16, 32, 48, 64, 80, 96]
        );
        let fcn_h = NetworkSpec::preset("fcn-h", 20).unwrap();
        assert_eq!((fcn_h.base_filters, fcn_h.blocks_per_level, fcn_h.levels), (24, 2, 8));
        let net = Network::build(&fcn_h, 0).unwrap();
        // 24 filters into the input layer, two blocks per level
        assert_eq!(net.params.get("input.conv.g0").unwrap().shape, vec![27, 1, 24]);
        assert!(net.params.get("enc0.b1.conv.g0").is_some());
        assert!(net.params.get("enc0.b2.conv.g0").is_none());
        assert!(NetworkSpec::preset("vgg", 2).is_err());
    }

    #[test]
    fn spec_validation_catches_bad_configs() {
        let mut spec = tiny_unet(true);
        spec.groups = 3; // 8 % 3 != 0
        assert!(matches!(Network::build(&spec, 0), Err(NetError::InvalidSpec(_))));

        let mut spec = tiny_unet(true);
        spec.groups = 4;
        spec.shift_config = Some(ShiftConfig::unshifted(8)); // wrong group count
        assert!(Network::build(&spec, 0).is_err());

        let mut spec = tiny_unet(true);
        spec.shift_config = Some(ShiftConfig {
            layers: vec![vec![[0, 0, 0]]; 4], // 4 rows for 5 searchable blocks
        });
        assert!(Network::build(&spec, 0).is_err());

        let mut spec = tiny_unet(true);
        spec.search_mode = true;
        spec.shift_config = Some(ShiftConfig::unshifted(1));
        assert!(Network::build(&spec, 0).is_err());
    }

    #[test]
    fn forward_shapes_cover_all_input_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let input = rand_tensor(&mut rng, 6, 0.4, 1);
        for binary in [false, true] {
            let mut spec = tiny_unet(binary);
            spec.groups = 2;
            let net = Network::build(&spec, 7).unwrap();
            let logits = net.predict_logits(&input, binary).unwrap();
            assert_eq!((logits.rows(), logits.cols()), (input.num_sites(), 3));
            assert!(logits.is_finite());
        }
        // FCN family too
        let mut spec = tiny_unet(true);
        spec.family = Family::Fcn;
        let net = Network::build(&spec, 7).unwrap();
        let logits = net.predict_logits(&input, true).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (input.num_sites(), 3));
        assert!(logits.is_finite());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let input = rand_tensor(&mut rng, 5, 0.5, 1);
        let net = Network::build(&tiny_unet(true), 3).unwrap();
        let a = net.predict_logits(&input, true).unwrap();
        let b = net.predict_logits(&input, true).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn block_forward_matches_layer_composition() {
        // the tape walk of one residual block must agree with the pure
        // layer-function composition for the same parameters
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let input = rand_tensor(&mut rng, 4, 0.6, 8);
        let mut spec = tiny_unet(true);
        spec.in_channels = 8;
        spec.groups = 2;
        spec.shift_config = Some(ShiftConfig {
            layers: vec![vec![[1, 0, -1], [0, 1, 1]]],
        });
        let net = Network::build(&spec, 11).unwrap();

        // tape path: tap is the pre-normalization conv output of enc0.b0,
        // whose input is the input block's output; replicate both by hand.
        let tap = net.tap_output(&input, true).unwrap();

        // hand path: input block (real, unshifted, 8→8 channels, identity
        // skip), then the binary grouped conv of enc0.b0
        let p = |name: &str| net.params.get(name).unwrap().data.clone();
        let in_block = SscBlock {
            spec: SfscLayerSpec {
                in_channels: 8,
                out_channels: 8,
                groups: 1,
                directions: vec![ShiftDirection::ZERO],
                kernel_size: 3,
                binary: false,
            },
            weights: vec![split_stacked(&p("input.conv.g0"), 27)],
            bn: BnState {
                gamma: p("input.bn.gamma").data().to_vec(),
                beta: p("input.bn.beta").data().to_vec(),
                running_mean: p("input.bn.mean").data().to_vec(),
                running_var: p("input.bn.var").data().to_vec(),
                eps: 1e-5,
            },
            slopes: p("input.prelu").data().to_vec(),
            projection: None,
        };
        let h = crate::layers::ssc_block_forward(&input, &in_block, false).unwrap();

        let conv = sfsc_layer_forward(
            &h,
            &SfscLayerSpec {
                in_channels: 8,
                out_channels: 8,
                groups: 2,
                directions: vec![
                    ShiftDirection::checked([1, 0, -1], 1).unwrap(),
                    ShiftDirection::checked([0, 1, 1], 1).unwrap(),
                ],
                kernel_size: 3,
                binary: true,
            },
            &[
                split_stacked(&p("enc0.b0.conv.g0"), 27),
                split_stacked(&p("enc0.b0.conv.g1"), 27),
            ],
            h.coords().to_vec(),
        )
        .unwrap();
        assert!(tap.max_abs_diff(conv.features()) < 1e-12);
    }

    use crate::layers::SscBlock;

    #[test]
    fn fused_forward_equals_explicit_shift_sum() {
        // the 5³ fused conv with window-masked kernel must equal
        // Σ_j π_j · (3³ conv shifted by s_j with the shared sub-window)
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let space = SearchSpace::nine();
        let window = Rc::new(window_matrix(&space).unwrap());
        for case in 0..10 {
            let in_c = 2;
            let out_c = 3;
            let input = rand_tensor(&mut rng, 5, 0.4, in_c);
            let v = Mat::from_vec(
                125 * in_c,
                out_c,
                (0..125 * in_c * out_c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            );
            let alpha = Mat::from_vec(
                1,
                9,
                (0..9).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
            );
            let binarize = case % 2 == 0;

            let mut tape = Tape::new();
            let x = tape.leaf(input.features().clone());
            let vid = tape.leaf(v.clone());
            let aid = tape.leaf(alpha.clone());
            let map = Rc::new(
                build_kernel_map(
                    &input,
                    input.coords().to_vec(),
                    &KernelOffsets::cube(5),
                    1,
                )
                .unwrap(),
            );
            let (out, _) = supernet_conv_on_tape(
                &mut tape,
                x,
                &[vid],
                aid,
                RelaxMode::Sigmoid,
                &window,
                &map,
                in_c,
                binarize,
            );
            let fused = tape.value(out).clone();

            // explicit oracle on the same (possibly binarized) values
            let veff = if binarize {
                let n = (125 * in_c * out_c) as f64;
                let scale = v.data().iter().map(|x| x.abs()).sum::<f64>() / n;
                v.map(|x| if x >= 0.0 { scale } else { -scale })
            } else {
                v.clone()
            };
            let pi = crate::search::relax_sigmoid(&alpha);
            let mut expect = Mat::zeros(input.num_sites(), out_c);
            for (j, &dir) in space.directions().iter().enumerate() {
                let sub = extract_subwindow(&veff, in_c, dir).unwrap();
                let m3 = build_kernel_map(
                    &input,
                    input.coords().to_vec(),
                    &KernelOffsets::cube(3).with_shift(dir),
                    1,
                )
                .unwrap();
                let y = crate::layers::conv_forward(
                    input.features(),
                    &m3,
                    &split_stacked(&sub, 27),
                );
                expect = expect.add_scaled(&y, pi[(0, j)]);
            }
            let scale = expect.data().iter().fold(1.0f64, |m, &v| m.max(v.abs()));
            assert!(
                fused.max_abs_diff(&expect) <= 1e-10 * scale,
                "fused vs explicit mismatch (case {case})"
            );
        }
    }

    #[test]
    fn saturated_search_net_collapses_to_derived() {
        // drive α to near-one-hot; the derived discrete network at real
        // precision must match the supernet forward within 1e−5
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let input = rand_tensor(&mut rng, 5, 0.5, 1);
        let mut spec = tiny_unet(false); // real precision: collapse is exact
        spec.groups = 2;
        spec.search_mode = true;
        let net = Network::build(&spec, 5).unwrap();

        // saturate every alpha row at a random winner
        let mut net = net;
        let alpha_names: Vec<String> = net
            .params
            .iter()
            .filter(|t| t.name.ends_with(".alpha"))
            .map(|t| t.name.clone())
            .collect();
        let mut winners = Vec::new();
        for name in &alpha_names {
            let t = net.params.get(name).unwrap();
            let mut a = Mat::from_vec(
                t.data.rows(),
                t.data.cols(),
                vec![-40.0; t.data.rows() * t.data.cols()],
            );
            for r in 0..a.rows() {
                let j = rng.random_range(0..a.cols());
                a[(r, j)] = 40.0;
                winners.push(j);
            }
            net.params.set_data(name, a).unwrap();
        }

        let supernet_logits = net.predict_logits(&input, false).unwrap();
        let (config, derived) = derive_architecture(&net, false).unwrap();

        // chosen directions match the saturated winners
        let flat: Vec<usize> = config
            .indices(&net.space)
            .unwrap()
            .into_iter()
            .flatten()
            .collect();
        assert_eq!(flat, winners);

        let derived_logits = derived.predict_logits(&input, false).unwrap();
        let scale = supernet_logits.data().iter().fold(1.0f64, |m, &v| m.max(v.abs()));
        assert!(
            supernet_logits.max_abs_diff(&derived_logits) <= 1e-5 * scale,
            "collapse mismatch {}",
            supernet_logits.max_abs_diff(&derived_logits)
        );
    }

    #[test]
    fn derive_rejects_discrete_nets_and_preserves_side_state() {
        let net = Network::build(&tiny_unet(true), 0).unwrap();
        assert!(derive_architecture(&net, false).is_err());

        let mut spec = tiny_unet(true);
        spec.search_mode = true;
        let mut supernet = Network::build(&spec, 1).unwrap();
        // make BN state distinctive, then check it transfers
        supernet
            .params
            .set_data("enc1.b0.bn.beta", Mat::from_vec(1, 16, (0..16).map(|i| i as f64 / 7.0).collect()))
            .unwrap();
        let (config, derived) = derive_architecture(&supernet, false).unwrap();
        assert_eq!(config.layers.len(), spec.num_searchable());
        assert_eq!(
            derived.params.get("enc1.b0.bn.beta").unwrap().data,
            supernet.params.get("enc1.b0.bn.beta").unwrap().data
        );
        // zero alpha ties → every pick is the unshifted direction
        assert!(config.layers.iter().flatten().all(|&d| d == [0, 0, 0]));
        // derived conv weights are the center sub-window of the fused kernel
        let fused = &supernet.params.get("enc0.b0.conv.g0").unwrap().data;
        let sub = extract_subwindow(fused, 8, [0, 0, 0]).unwrap();
        assert_eq!(derived.params.get("enc0.b0.conv.g0").unwrap().data, sub);
    }

    #[test]
    fn sign_correspondence_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let input = rand_tensor(&mut rng, 5, 0.5, 1);
        let net = Network::build(&tiny_unet(true), 9).unwrap();

        // same network, same forward mode → 1.0 exactly
        let t1 = net.tap_output(&input, true).unwrap();
        let t2 = net.tap_output(&input, true).unwrap();
        assert_eq!(sign_correspondence_taps(&t1, &t2).unwrap(), 1.0);
        let r1 = net.tap_output(&input, false).unwrap();
        let r2 = net.tap_output(&input, false).unwrap();
        assert_eq!(sign_correspondence_taps(&r1, &r2).unwrap(), 1.0);

        // real vs binary correspondence is a proportion
        let c = sign_correspondence(&net, &net, &input).unwrap();
        assert!((0.0..=1.0).contains(&c));

        // negating the first binary conv's latent weights flips every
        // output sign, so the correspondence complements
        let mut negated = net.clone();
        let w = negated.params.get("enc0.b0.conv.g0").unwrap().data.clone();
        negated.params.set_data("enc0.b0.conv.g0", w.map(|v| -v)).unwrap();
        let c_neg = sign_correspondence(&net, &negated, &input).unwrap();
        assert!((c + c_neg - 1.0).abs() < 1e-12, "{c} + {c_neg} should be 1");
    }

    #[test]
    fn sign_matched_binary_layer_corresponds_exactly() {
        // when the latent weights are already ±1 and the layer input is
        // already ±1, the real and binarized paths coincide
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let coords: Vec<Coord> = (0..6)
            .flat_map(|x| (0..3).map(move |y| Coord::new(0, x, y, 0)))
            .collect();
        let n = coords.len();
        let feats = Mat::from_vec(
            n,
            4,
            (0..n * 4).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        );
        let t = build_sparse_tensor(coords, feats, 1).unwrap();
        let spec = SfscLayerSpec {
            in_channels: 4,
            out_channels: 4,
            groups: 1,
            directions: vec![ShiftDirection::ZERO],
            kernel_size: 3,
            binary: false,
        };
        let weights = vec![(0..27)
            .map(|_| {
                Mat::from_vec(
                    4,
                    4,
                    (0..16).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
                )
            })
            .collect::<Vec<_>>()];
        let real = sfsc_layer_forward(&t, &spec, &weights, t.coords().to_vec()).unwrap();
        let mut bspec = spec;
        bspec.binary = true;
        let binary = sfsc_layer_forward(&t, &bspec, &weights, t.coords().to_vec()).unwrap();
        assert!(real.features().max_abs_diff(binary.features()) < 1e-12);
        assert_eq!(
            sign_correspondence_taps(real.features(), binary.features()).unwrap(),
            1.0
        );
    }

    #[test]
    fn cost_report_matches_hand_count_on_cube_fixture() {
        // full 2×2×2 cube, tiny 2-level binary UNET: every pair count is
        // hand-enumerable.  3³ maps on the cube have (2+1+1)³ = 64 pairs,
        // the 2³ transition collapses to one coarse site with 8 pairs, and
        // the deepest 3³ map has a single self-pair.
        let coords: Vec<Coord> = (0..2)
            .flat_map(|x| {
                (0..2).flat_map(move |y| (0..2).map(move |z| Coord::new(0, x, y, z)))
            })
            .collect();
        let input = build_sparse_tensor(coords, Mat::from_vec(8, 1, vec![1.0; 8]), 1).unwrap();
        let spec = NetworkSpec {
            family: Family::Unet,
            levels: 2,
            base_filters: 4,
            filters_step: 4,
            blocks_per_level: 1,
            num_classes: 2,
            in_channels: 1,
            binary: true,
            groups: 1,
            shift_config: None,
            search_mode: false,
            relax_mode: RelaxMode::Sigmoid,
        };
        let net = Network::build(&spec, 0).unwrap();
        let report = net.count_cost(&input).unwrap();

        // hand spreadsheet, layer by layer (8 fine sites, 1 coarse site)
        let mut bops = 0.0;
        let mut flops = 0.0;
        // input block (real): conv 2·64·1·4, bn 2·8·4, prelu 8·4,
        // projection 1→4 (real 1×1 over 8 sites) + skip add
        flops += 2.0 * 64.0 * 1.0 * 4.0 + 64.0 + 32.0 + 2.0 * 8.0 * 1.0 * 4.0 + 32.0;
        // enc0.b0 (binary 4→4): conv 2·64·4·4 bops; bn, prelu, identity add
        bops += 2.0 * 64.0 * 4.0 * 4.0;
        flops += 64.0 + 32.0 + 32.0;
        // down0 (binary 4→8): conv 2·8·4·8 bops; bn 2·1·8, prelu 8;
        // avg-pool (8 pairs + 1 parent)·4, skip dense 2·1·4·8, join add 8
        bops += 2.0 * 8.0 * 4.0 * 8.0;
        flops += 16.0 + 8.0 + (8.0 + 1.0) * 4.0 + 2.0 * 1.0 * 4.0 * 8.0 + 8.0;
        // enc1.b0 (binary 8→8, single site, one pair): conv 2·1·8·8 bops
        bops += 2.0 * 1.0 * 8.0 * 8.0;
        flops += 16.0 + 8.0 + 8.0;
        // up0 (binary deconv 8→4): conv 2·8·8·4 bops; bn 2·8·4, prelu 8·4;
        // skip dense 2·8·8·4 real, join add 8·4
        bops += 2.0 * 8.0 * 8.0 * 4.0;
        flops += 64.0 + 32.0 + 2.0 * 8.0 * 8.0 * 4.0 + 32.0;
        // dec0.b0 (binary 8→4 after concat): conv 2·64·8·4 bops;
        // bn, prelu; binary 1×1 projection over 8 sites + add
        bops += 2.0 * 64.0 * 8.0 * 4.0 + 2.0 * 8.0 * 8.0 * 4.0;
        flops += 64.0 + 32.0 + 32.0;
        // head (real 4→2): dense 2·8·4·2 + bias add 8·2
        flops += 2.0 * 8.0 * 4.0 * 2.0 + 16.0;

        assert_eq!(report.bops, bops);
        assert_eq!(report.flops, flops);
        assert_eq!(report.ops, bops / 64.0 + flops);

        // storage census, hand-counted
        let binary_params = 27 * 4 * 4   // enc0.b0 conv
            + 8 * 4 * 8                  // down0 conv
            + 27 * 8 * 8                 // enc1.b0 conv
            + 8 * 8 * 4                  // up0 deconv
            + 27 * 8 * 4                 // dec0.b0 conv
            + 8 * 4; // dec0.b0 projection
        let real_params = 27 * 1 * 4 + 1 * 4      // input conv + projection
            + 2 * (4 + 4 + 8 + 8 + 4 + 4)         // bn gamma+beta per layer
            + (4 + 4 + 8 + 8 + 4 + 4)             // prelu slopes
            + 4 * 8                               // down0 skip
            + 8 * 4                               // up0 skip
            + 4 * 2 + 2; // head
        assert_eq!(report.params_binary, binary_params as u64);
        assert_eq!(report.params_real, real_params as u64);
        let storage = real_params as f64 + binary_params as f64 / 32.0;
        assert_eq!(report.storage_m, storage / 1e6);
    }

    #[test]
    fn unshifted_config_equals_no_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let input = rand_tensor(&mut rng, 5, 0.5, 1);
        let net = Network::build(&tiny_unet(true), 2).unwrap();
        let pinned = net.with_shift_config(ShiftConfig::unshifted(1)).unwrap();
        let a = net.predict_logits(&input, true).unwrap();
        let b = pinned.predict_logits(&input, true).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn search_forward_records_selectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let input = rand_tensor(&mut rng, 5, 0.5, 1);
        let mut spec = tiny_unet(true);
        spec.groups = 2;
        spec.search_mode = true;
        let net = Network::build(&spec, 3).unwrap();
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &input, ForwardOpts::train(true)).unwrap();
        assert_eq!(out.pis.len(), spec.num_searchable());
        // fresh α = 0 → π = 0.5 everywhere
        for (_, pi) in &out.pis {
            assert!(tape.value(*pi).data().iter().all(|&v| v == 0.5));
        }
        assert!(out.tap.is_some());
        assert_eq!(out.bn_nodes.len(), 1 + 3 + 2 + 2 + 2); // input + enc×3 + down×2 + up×2 + dec×2... counted below
    }
}
