//! Sparse voxel tensors, kernel maps and voxelization.
//!
//! A [`SparseTensor`] is the set of active lattice sites of one (batched)
//! voxel grid together with a feature row per site.  Convolutions never touch
//! dense grids: a [`KernelMap`] lists, per kernel offset, which input rows
//! feed which output rows, and every conv/pool/upsample in the crate is a
//! gather (or scatter) driven by such a map.
//!
//! The gather convention used throughout: the output at coordinate `u`
//! gathers the input at `u + (offset + shift) · stride_in`.  A nonzero shift
//! therefore recenters the window without a separate code path.

use crate::error::{PointIoError, SparseError};
use crate::mat::Mat;
use crate::points::Point;
use std::collections::HashMap;

/// Lattice site: batch index plus integer voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub batch: i32,
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Coord {
    pub fn new(batch: i32, x: i32, y: i32, z: i32) -> Self {
        Coord { batch, x, y, z }
    }

    /// Coordinate translated by `delta` scaled by `stride`; batch unchanged.
    pub fn offset_by(&self, delta: [i32; 3], stride: i32) -> Coord {
        Coord {
            batch: self.batch,
            x: self.x + delta[0] * stride,
            y: self.y + delta[1] * stride,
            z: self.z + delta[2] * stride,
        }
    }
}

/// Active sites of one voxel grid with per-site features.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    coords: Vec<Coord>,
    features: Mat,
    stride: i32,
    index: HashMap<Coord, usize>,
}

impl SparseTensor {
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Mat {
        &mut self.features
    }

    /// Replaces the feature matrix, keeping coordinates.  Panics if the row
    /// count does not match the site count.
    pub fn with_features(&self, features: Mat) -> SparseTensor {
        assert_eq!(features.rows(), self.coords.len(), "one feature row per site");
        SparseTensor {
            coords: self.coords.clone(),
            features,
            stride: self.stride,
            index: self.index.clone(),
        }
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn num_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Row index of a coordinate, if active.
    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }
}

/// Builds a sparse tensor, validating uniqueness and stride alignment.
pub fn build_sparse_tensor(
    coords: Vec<Coord>,
    features: Mat,
    stride: i32,
) -> Result<SparseTensor, SparseError> {
    assert!(stride >= 1, "stride must be positive");
    if features.rows() != coords.len() {
        return Err(SparseError::ShapeMismatch(format!(
            "{} coords but {} feature rows",
            coords.len(),
            features.rows()
        )));
    }
    let mut index = HashMap::with_capacity(coords.len());
    for (row, &c) in coords.iter().enumerate() {
        if c.x % stride != 0 || c.y % stride != 0 || c.z % stride != 0 {
            return Err(SparseError::StrideViolation { coord: c, stride });
        }
        if index.insert(c, row).is_some() {
            return Err(SparseError::DuplicateCoordinate(c));
        }
    }
    Ok(SparseTensor { coords, features, stride, index })
}

/// A convolution window: an ordered list of integer offsets plus a shift
/// vector that recenters the whole window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelOffsets {
    offsets: Vec<[i32; 3]>,
    shift: [i32; 3],
}

impl KernelOffsets {
    /// Cubic window of size `k` per axis: `k=3` spans −1..=1, `k=2` spans
    /// 0..=1, `k=5` spans −2..=2.  Offsets are ordered lexicographically by
    /// (dz, dy, dx), most negative first, so weight tensors serialize in a
    /// fixed order.
    pub fn cube(k: i32) -> Self {
        assert!(k >= 1, "kernel size must be positive");
        let lo = -((k - 1) / 2);
        let hi = k / 2;
        let mut offsets = Vec::with_capacity((k * k * k) as usize);
        for dz in lo..=hi {
            for dy in lo..=hi {
                for dx in lo..=hi {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
        KernelOffsets { offsets, shift: [0, 0, 0] }
    }

    /// The 1×1×1 window.
    pub fn single() -> Self {
        KernelOffsets { offsets: vec![[0, 0, 0]], shift: [0, 0, 0] }
    }

    /// Same window recentered by `shift`.
    pub fn with_shift(mut self, shift: [i32; 3]) -> Self {
        self.shift = shift;
        self
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn shift(&self) -> [i32; 3] {
        self.shift
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Position of an offset in the fixed ordering, if present.
    pub fn position(&self, offset: [i32; 3]) -> Option<usize> {
        self.offsets.iter().position(|&o| o == offset)
    }
}

/// Per-offset gather lists connecting input rows to output rows.
#[derive(Debug, Clone)]
pub struct KernelMap {
    /// `pairs[j]` lists `(input_row, output_row)` for offset `j`.
    pairs: Vec<Vec<(usize, usize)>>,
    out_coords: Vec<Coord>,
    in_stride: i32,
    out_stride: i32,
    num_inputs: usize,
}

impl KernelMap {
    pub fn pairs(&self) -> &[Vec<(usize, usize)>] {
        &self.pairs
    }

    pub fn out_coords(&self) -> &[Coord] {
        &self.out_coords
    }

    pub fn in_stride(&self) -> i32 {
        self.in_stride
    }

    pub fn out_stride(&self) -> i32 {
        self.out_stride
    }

    /// Site count of the input tensor the map was built against; scatter
    /// (transposed) application needs it to size its output.
    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn num_outputs(&self) -> usize {
        self.out_coords.len()
    }

    /// Total gather pair count across all offsets.
    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Builds the gather map: for each output coordinate `u` and offset `o`, a
/// pair exists exactly when the input has a site at `u + (o + shift)·stride_in`.
///
/// Pair lists are ordered by output row, so identical inputs always produce
/// identical maps.
pub fn build_kernel_map(
    input: &SparseTensor,
    out_coords: Vec<Coord>,
    kernel: &KernelOffsets,
    out_stride: i32,
) -> Result<KernelMap, SparseError> {
    assert!(out_stride >= 1, "output stride must be positive");
    for &c in &out_coords {
        if c.x % out_stride != 0 || c.y % out_stride != 0 || c.z % out_stride != 0 {
            return Err(SparseError::StrideViolation { coord: c, stride: out_stride });
        }
    }
    let shift = kernel.shift();
    let mut pairs = Vec::with_capacity(kernel.len());
    for &o in kernel.offsets() {
        let delta = [o[0] + shift[0], o[1] + shift[1], o[2] + shift[2]];
        let mut list = Vec::new();
        for (r_out, c_out) in out_coords.iter().enumerate() {
            let c_in = c_out.offset_by(delta, input.stride());
            if let Some(r_in) = input.row_of(&c_in) {
                list.push((r_in, r_out));
            }
        }
        pairs.push(list);
    }
    Ok(KernelMap {
        pairs,
        out_coords,
        in_stride: input.stride(),
        out_stride,
        num_inputs: input.num_sites(),
    })
}

/// Unique coarse coordinates after floor-dividing by `stride·factor`,
/// sorted lexicographically by (batch, x, y, z).
pub fn downsample_coords(input: &SparseTensor, factor: i32) -> Vec<Coord> {
    assert!(factor >= 1, "factor must be positive");
    let coarse = input.stride() * factor;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for c in input.coords() {
        let q = Coord {
            batch: c.batch,
            x: c.x.div_euclid(coarse) * coarse,
            y: c.y.div_euclid(coarse) * coarse,
            z: c.z.div_euclid(coarse) * coarse,
        };
        if seen.insert(q, ()).is_none() {
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Which dimensions voxelization quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelMode {
    /// Quantize x, y and z by the resolution.
    AllDims,
    /// Quantize only z; x and y are taken as already-integer pixel indices.
    DepthOnly,
}

/// Voxelization result: the sparse grid, one label per site, and the site
/// row each input point landed in.
#[derive(Debug, Clone)]
pub struct Voxelization {
    pub tensor: SparseTensor,
    pub labels: Vec<i32>,
    pub point_sites: Vec<usize>,
}

/// Quantizes points onto a voxel grid.
///
/// Each occupied voxel gets feature `[1.0, mean of extra point features…]`
/// and the majority label of its points (ties break toward the smallest
/// label id).  Sites appear in first-point order.  `origin` shifts the grid
/// before quantization: the voxel coordinate is `floor((p − origin) / res)`.
pub fn voxelize_full(
    points: &[Point],
    resolution: f64,
    mode: VoxelMode,
    origin: [f64; 3],
) -> Result<Voxelization, SparseError> {
    assert!(resolution > 0.0, "resolution must be positive");
    if points.is_empty() {
        return Err(SparseError::EmptyInput);
    }
    let extra = points[0].feats.len();
    let mut index: HashMap<Coord, usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut votes: Vec<HashMap<i32, usize>> = Vec::new();
    let mut point_sites = Vec::with_capacity(points.len());
    for p in points {
        let q = |v: f64, o: f64| ((v - o) / resolution).floor() as i32;
        let c = match mode {
            VoxelMode::AllDims => Coord::new(
                0,
                q(p.pos[0], origin[0]),
                q(p.pos[1], origin[1]),
                q(p.pos[2], origin[2]),
            ),
            VoxelMode::DepthOnly => Coord::new(
                0,
                p.pos[0].floor() as i32,
                p.pos[1].floor() as i32,
                q(p.pos[2], origin[2]),
            ),
        };
        let row = *index.entry(c).or_insert_with(|| {
            coords.push(c);
            sums.push(vec![0.0; extra]);
            counts.push(0);
            votes.push(HashMap::new());
            coords.len() - 1
        });
        for (s, &f) in sums[row].iter_mut().zip(&p.feats) {
            *s += f;
        }
        counts[row] += 1;
        *votes[row].entry(p.label).or_insert(0) += 1;
        point_sites.push(row);
    }
    let mut features = Mat::zeros(coords.len(), 1 + extra);
    let mut labels = Vec::with_capacity(coords.len());
    for row in 0..coords.len() {
        features[(row, 0)] = 1.0;
        for k in 0..extra {
            features[(row, 1 + k)] = sums[row][k] / counts[row] as f64;
        }
        let best = votes[row]
            .iter()
            .map(|(&label, &n)| (n, std::cmp::Reverse(label)))
            .max()
            .map(|(_, std::cmp::Reverse(label))| label)
            .expect("every site has at least one point");
        labels.push(best);
    }
    let tensor = build_sparse_tensor(coords, features, 1)?;
    Ok(Voxelization { tensor, labels, point_sites })
}

/// [`voxelize_full`] with a zero origin, returning just the grid and labels.
pub fn voxelize(
    points: &[Point],
    resolution: f64,
    mode: VoxelMode,
) -> Result<(SparseTensor, Vec<i32>), SparseError> {
    let v = voxelize_full(points, resolution, mode, [0.0, 0.0, 0.0])?;
    Ok((v.tensor, v.labels))
}

/// Merges single-scene tensors into one batch.  Scene `i` keeps its
/// coordinates with batch index `i`; features and labels concatenate in
/// scene order.  All scenes must share stride and channel count.
pub fn batch_scenes(
    scenes: &[(SparseTensor, Vec<i32>)],
) -> Result<(SparseTensor, Vec<i32>), SparseError> {
    if scenes.is_empty() {
        return Err(SparseError::EmptyInput);
    }
    let stride = scenes[0].0.stride();
    let channels = scenes[0].0.channels();
    let mut coords = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, (t, l)) in scenes.iter().enumerate() {
        if t.stride() != stride || t.channels() != channels {
            return Err(SparseError::ShapeMismatch(format!(
                "scene {i} has stride {} / {} channels, expected {stride} / {channels}",
                t.stride(),
                t.channels()
            )));
        }
        for (r, c) in t.coords().iter().enumerate() {
            coords.push(Coord { batch: i as i32, ..*c });
            rows.push(t.features().row(r).to_vec());
        }
        labels.extend_from_slice(l);
    }
    let features = Mat::from_rows(&rows);
    Ok((build_sparse_tensor(coords, features, stride)?, labels))
}

/// Reads points from a file, auto-detecting the binary magic.
pub fn load_points(path: &std::path::Path) -> Result<Vec<Point>, PointIoError> {
    crate::points::load_points(path)
}
