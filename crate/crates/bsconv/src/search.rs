//! Shift-direction search: the candidate space, relaxed selectors, window
//! algebra for the fused 5×5×5 kernel, discrete configurations, and the
//! size of the combinatorial design space.
//!
//! A *shift direction* recenters a 3×3×3 convolution window at `u + s`
//! instead of `u`.  With shift distance 1, every candidate window lies
//! inside one 5×5×5 cube, so a weighted mixture over all candidates can be
//! evaluated as a single 5×5×5 convolution whose kernel positions are
//! masked by the per-candidate selector weights — the fused supernet layer.
//!
//! This module holds the parts with no network attached: direction sets,
//! selector math, sub-window extraction, and config (de)serialization.
//! The fused forward itself lives with the network builder, on the tape.

use crate::error::SearchError;
use crate::mat::Mat;
use crate::sparse::KernelOffsets;
use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ordered candidate set of shift directions.  Index 0 is always the
/// conservative "stay" direction when present, so argmax ties resolve to
/// no shift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    directions: Vec<[i32; 3]>,
}

impl SearchSpace {
    /// The default 9-candidate space: stay, plus all eight corner moves
    /// (±1, ±1, ±1) in lexicographic order.
    pub fn nine() -> Self {
        let mut directions = vec![[0, 0, 0]];
        for &x in &[-1i32, 1] {
            for &y in &[-1i32, 1] {
                for &z in &[-1i32, 1] {
                    directions.push([x, y, z]);
                }
            }
        }
        SearchSpace { directions }
    }

    /// A custom space.  Directions must be distinct and within unit
    /// Chebyshev distance (so their windows fit the fused cube).
    pub fn new(directions: Vec<[i32; 3]>) -> Result<Self, SearchError> {
        for (i, d) in directions.iter().enumerate() {
            if d.iter().any(|c| c.abs() > 1) {
                return Err(SearchError::SpaceTooLarge(*d));
            }
            if directions[..i].contains(d) {
                return Err(SearchError::ShapeMismatch(format!(
                    "duplicate direction {d:?}"
                )));
            }
        }
        Ok(SearchSpace { directions })
    }

    pub fn directions(&self) -> &[[i32; 3]] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn index_of(&self, d: [i32; 3]) -> Option<usize> {
        self.directions.iter().position(|&x| x == d)
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace::nine()
    }
}

/// Elementwise logistic relaxation of architecture parameters.
pub fn relax_sigmoid(alpha: &Mat) -> Mat {
    alpha.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Row-wise softmax relaxation of architecture parameters.
pub fn relax_softmax(alpha: &Mat) -> Mat {
    let mut out = Mat::zeros(alpha.rows(), alpha.cols());
    for r in 0..alpha.rows() {
        let row = alpha.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.row_mut(r) {
            *o /= sum;
        }
    }
    out
}

/// How architecture parameters map to selector weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelaxMode {
    Sigmoid,
    Softmax,
}

pub fn relax(alpha: &Mat, mode: RelaxMode) -> Mat {
    match mode {
        RelaxMode::Sigmoid => relax_sigmoid(alpha),
        RelaxMode::Softmax => relax_softmax(alpha),
    }
}

/// Saturation pressure on a sigmoid selector: `−mean |π − 0.5|`, zero at
/// the undecided point and −0.5 when fully discrete.
pub fn confidence_sigmoid(pi: &Mat) -> f64 {
    let n = (pi.rows() * pi.cols()) as f64;
    -pi.data().iter().map(|&v| (v - 0.5).abs()).sum::<f64>() / n
}

/// Saturation pressure on a softmax selector: negative log-likelihood of
/// each row's argmax, summed over rows.
pub fn confidence_softmax(pi: &Mat) -> f64 {
    let mut loss = 0.0;
    for r in 0..pi.rows() {
        let row = pi.row(r);
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        loss -= best.ln();
    }
    loss
}

/// How far a selector has moved from the undecided point: `mean |π − 0.5|`.
pub fn mean_saturation(pi: &Mat) -> f64 {
    -confidence_sigmoid(pi)
}

/// 0/1 window-membership matrix (n_s × 125): entry (j, p) is 1 when the
/// 5³ kernel position p lies in the 3³ window centered at direction j.
/// Right-multiplying a selector by this matrix yields the per-position
/// mask of the fused kernel.
pub fn window_matrix(space: &SearchSpace) -> Result<Mat, SearchError> {
    let cube5 = KernelOffsets::cube(5);
    let mut m = Mat::zeros(space.len(), cube5.len());
    for (j, s) in space.directions().iter().enumerate() {
        if s.iter().any(|c| c.abs() > 1) {
            return Err(SearchError::SpaceTooLarge(*s));
        }
        for (p, o) in cube5.offsets().iter().enumerate() {
            let inside = (0..3).all(|a| (o[a] - s[a]).abs() <= 1);
            if inside {
                m[(j, p)] = 1.0;
            }
        }
    }
    Ok(m)
}

/// For each 3³ offset (in kernel order), the index of the matching 5³
/// position when the window is centered at `dir`.
pub fn subwindow_positions(dir: [i32; 3]) -> Result<Vec<usize>, SearchError> {
    if dir.iter().any(|c| c.abs() > 1) {
        return Err(SearchError::SpaceTooLarge(dir));
    }
    let cube3 = KernelOffsets::cube(3);
    let cube5 = KernelOffsets::cube(5);
    Ok(cube3
        .offsets()
        .iter()
        .map(|q| {
            cube5
                .position([q[0] + dir[0], q[1] + dir[1], q[2] + dir[2]])
                .expect("unit-shifted 3-cube offset lies in the 5-cube")
        })
        .collect())
}

/// Copies the 3³ sub-window centered at `dir` out of a stacked 5³ weight
/// tensor (125·in_c × out_c), preserving kernel order — the weight
/// transfer used when collapsing a fused layer to a discrete one.
pub fn extract_subwindow(
    stacked5: &Mat,
    in_c: usize,
    dir: [i32; 3],
) -> Result<Mat, SearchError> {
    if stacked5.rows() != 125 * in_c {
        return Err(SearchError::ShapeMismatch(format!(
            "expected {} rows for a stacked 5³ tensor with {} input channels, got {}",
            125 * in_c,
            in_c,
            stacked5.rows()
        )));
    }
    let positions = subwindow_positions(dir)?;
    let mut out = Mat::zeros(27 * in_c, stacked5.cols());
    for (q, &p) in positions.iter().enumerate() {
        for i in 0..in_c {
            out.row_mut(q * in_c + i)
                .copy_from_slice(stacked5.row(p * in_c + i));
        }
    }
    Ok(out)
}

/// Discrete per-layer, per-group shift assignment.  A single-row config
/// broadcasts to every searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub layers: Vec<Vec<[i32; 3]>>,
}

impl ShiftConfig {
    /// Uniform config: every group of every layer stays unshifted.
    pub fn unshifted(groups: usize) -> Self {
        ShiftConfig { layers: vec![vec![[0, 0, 0]; groups]] }
    }

    /// Directions for searchable layer `layer`; a one-row config is
    /// shared by all layers.
    pub fn layer(&self, layer: usize) -> &[[i32; 3]] {
        if self.layers.len() == 1 {
            &self.layers[0]
        } else {
            &self.layers[layer]
        }
    }

    pub fn num_groups(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    /// Index form relative to a search space.
    pub fn indices(&self, space: &SearchSpace) -> Result<Vec<Vec<usize>>, SearchError> {
        self.layers
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&d| {
                        space.index_of(d).ok_or(SearchError::ShapeMismatch(format!(
                            "direction {d:?} not in search space"
                        )))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_indices(space: &SearchSpace, idx: &[Vec<usize>]) -> Self {
        ShiftConfig {
            layers: idx
                .iter()
                .map(|row| row.iter().map(|&j| space.directions()[j]).collect())
                .collect(),
        }
    }

    /// One line per layer; each group as a comma-joined triple, groups
    /// separated by spaces: `0,0,0 1,1,1 -1,-1,-1`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for layer in &self.layers {
            let line: Vec<String> =
                layer.iter().map(|d| format!("{},{},{}", d[0], d[1], d[2])).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SearchError> {
        let mut layers = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split_whitespace() {
                let parts: Vec<&str> = tok.split(',').collect();
                if parts.len() != 3 {
                    return Err(SearchError::MalformedConfig(lineno + 1));
                }
                let mut d = [0i32; 3];
                for (slot, p) in d.iter_mut().zip(&parts) {
                    *slot = p
                        .parse::<i32>()
                        .map_err(|_| SearchError::MalformedConfig(lineno + 1))?;
                }
                row.push(d);
            }
            if row.is_empty() {
                return Err(SearchError::MalformedConfig(lineno + 1));
            }
            layers.push(row);
        }
        if layers.is_empty() {
            return Err(SearchError::MalformedConfig(1));
        }
        let groups = layers[0].len();
        if layers.iter().any(|l| l.len() != groups) {
            return Err(SearchError::ShapeMismatch(
                "layers disagree on group count".into(),
            ));
        }
        Ok(ShiftConfig { layers })
    }
}

/// Hand-designed shift presets mirroring the fractions that work well on
/// indoor-scan and depth-image data: half the groups stay, the remaining
/// half split between one diagonal and its opposite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftPreset {
    /// Quarter shifts along (+1,+1,+1) and (−1,−1,−1).
    Scannet,
    /// Quarter shifts along (+1,+1,0) and (−1,−1,0) — depth-style data
    /// keeps the depth axis unshifted.
    Nyu,
}

impl std::str::FromStr for ShiftPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scannet" => Ok(ShiftPreset::Scannet),
            "nyu" => Ok(ShiftPreset::Nyu),
            other => Err(format!("unknown shift preset '{other}'")),
        }
    }
}

/// Builds the preset assignment for `groups` channel groups (must divide
/// by 4), shared across all searchable layers.
pub fn manual_shift_config(
    preset: ShiftPreset,
    groups: usize,
) -> Result<ShiftConfig, SearchError> {
    if groups == 0 || groups % 4 != 0 {
        return Err(SearchError::IndivisibleGroups(groups));
    }
    let (plus, minus) = match preset {
        ShiftPreset::Scannet => ([1, 1, 1], [-1, -1, -1]),
        ShiftPreset::Nyu => ([1, 1, 0], [-1, -1, 0]),
    };
    let mut row = vec![[0, 0, 0]; groups / 2];
    row.extend(std::iter::repeat_n(plus, groups / 4));
    row.extend(std::iter::repeat_n(minus, groups / 4));
    Ok(ShiftConfig { layers: vec![row] })
}

/// Uniform random assignment, one independent draw per (layer, group).
pub fn random_shift_config<R: Rng>(
    space: &SearchSpace,
    groups: usize,
    layers: usize,
    rng: &mut R,
) -> ShiftConfig {
    let dirs = space.directions();
    ShiftConfig {
        layers: (0..layers)
            .map(|_| (0..groups).map(|_| dirs[rng.random_range(0..dirs.len())]).collect())
            .collect(),
    }
}

/// Number of distinct discrete architectures: `(n_s^n_g)^layers`, exact.
pub fn design_space_size(n_s: usize, n_g: usize, layers: usize) -> BigUint {
    BigUint::from(n_s).pow((n_g * layers) as u32)
}

/// Scientific notation with two significant figures, e.g. `9.1e46`.
pub fn format_scientific_2sf(n: &BigUint) -> String {
    let digits = n.to_string();
    if digits.len() == 1 {
        return format!("{}.0e0", digits);
    }
    let d0 = digits.as_bytes()[0] - b'0';
    let d1 = digits.as_bytes()[1] - b'0';
    let next = if digits.len() > 2 { digits.as_bytes()[2] - b'0' } else { 0 };
    let mut lead = d0 as u32 * 10 + d1 as u32;
    if next >= 5 {
        lead += 1;
    }
    let mut exp = digits.len() - 1;
    if lead >= 100 {
        // rounding carried into a new digit (e.g. 99.6 → 10)
        lead /= 10;
        exp += 1;
    }
    format!("{}.{}e{}", lead / 10, lead % 10, exp)
}

/// Per-row argmax of architecture parameters; ties resolve to the lowest
/// index, which prefers the unshifted candidate in the default space.
pub fn argmax_rows(alpha: &Mat) -> Vec<usize> {
    (0..alpha.rows())
        .map(|r| {
            let row = alpha.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
