//! Three-channel position index for concatenated multi-resolution token
//! sequences, and the rotary embedding driven by it.
//!
//! Every token carries `(condition id, row, col)`. The noisy target occupies
//! id 0 with integer grid coordinates; each condition image keeps its own grid
//! but has its coordinates rescaled by the target/condition resolution ratio,
//! so a condition rendered at half resolution lands on the same coordinate
//! range as the target.

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::tensor::{Mat, Scalar};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Fixed meaning of the first index channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ConditionSlot {
    Noise = 0,
    /// Agnostic image in mask mode, synthesized person image in mask-free mode.
    Person = 1,
    Cloth = 2,
    Reference = 3,
}

impl ConditionSlot {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Self::Noise),
            1 => Some(Self::Person),
            2 => Some(Self::Cloth),
            3 => Some(Self::Reference),
            _ => None,
        }
    }
}

/// Patch grid contributed by one input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub condition_id: u8,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, slot: ConditionSlot) -> Self {
        Self { rows, cols, condition_id: slot.id() }
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionEntry {
    pub id: u8,
    pub row: f64,
    pub col: f64,
}

impl PositionEntry {
    /// Coordinates in channel order `(id, row, col)`.
    pub fn coords(&self) -> [f64; 3] {
        [self.id as f64, self.row, self.col]
    }
}

/// A contiguous run of tokens belonging to one input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub grid: GridSpec,
    pub start: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.grid.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionIndex {
    pub entries: Vec<PositionEntry>,
    pub blocks: Vec<Block>,
}

impl PositionIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Token count of the id-0 (noisy target) block.
    pub fn noise_tokens(&self) -> usize {
        self.blocks.iter().find(|b| b.grid.condition_id == 0).map_or(0, |b| b.len())
    }

    pub fn block(&self, id: u8) -> Option<&Block> {
        self.blocks.iter().find(|b| b.grid.condition_id == id)
    }
}

/// Builds the `[L, 3]` index: noise entries first, then each condition in
/// the given order with coordinates scaled by `target / condition` per axis.
pub fn build_position_index(target: GridSpec, conditions: &[GridSpec]) -> Result<PositionIndex> {
    if target.condition_id != 0 {
        return Err(Error::InvalidArgument(format!(
            "target grid must carry condition id 0, got {}",
            target.condition_id
        )));
    }
    let mut seen = [false; 4];
    seen[0] = true;
    for grid in std::iter::once(&target).chain(conditions) {
        if grid.rows == 0 || grid.cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "zero-size grid {}x{} for condition id {}",
                grid.rows, grid.cols, grid.condition_id
            )));
        }
    }
    for grid in conditions {
        let id = grid.condition_id;
        if !(1..=3).contains(&id) {
            return Err(Error::InvalidArgument(format!("condition id {id} outside 1..=3")));
        }
        if seen[id as usize] {
            return Err(Error::DuplicateCondition(id));
        }
        seen[id as usize] = true;
    }

    let total: usize = target.tokens() + conditions.iter().map(GridSpec::tokens).sum::<usize>();
    let mut entries = Vec::with_capacity(total);
    let mut blocks = Vec::with_capacity(conditions.len() + 1);
    for grid in std::iter::once(&target).chain(conditions) {
        blocks.push(Block { grid: *grid, start: entries.len() });
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                // One rounding per coordinate: exact whenever the ratio divides evenly.
                let row = (r * target.rows) as f64 / grid.rows as f64;
                let col = (c * target.cols) as f64 / grid.cols as f64;
                entries.push(PositionEntry { id: grid.condition_id, row, col });
            }
        }
    }
    Ok(PositionIndex { entries, blocks })
}

/// Frequency schedule for one axis: `angle(k, p) = p * base^(-2k/dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub dim: usize,
    pub base: f64,
    pub inv_freq: Vec<f64>,
}

impl RopeTable {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("rope dim must be even and positive, got {dim}")));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::InvalidArgument(format!("rope base must be > 1, got {base}")));
        }
        let inv_freq = (0..dim / 2).map(|k| base.powf(-2.0 * k as f64 / dim as f64)).collect();
        Ok(Self { dim, base, inv_freq })
    }

    pub fn frequencies(&self) -> usize {
        self.inv_freq.len()
    }

    pub fn angle(&self, k: usize, position: f64) -> f64 {
        position * self.inv_freq[k]
    }
}

pub fn rope_table(dim: usize, base: f64) -> Result<RopeTable> {
    RopeTable::new(dim, base)
}

/// Split of a vector width into the `(id, row, col)` axis blocks.
///
/// Widths are equal when the pair count divides by three; a single leftover
/// pair goes to the id axis and two leftover pairs go one each to row and col,
/// so the two spatial axes always match.
pub fn axis_layout(width: usize) -> Result<[usize; 3]> {
    if width < 6 || width % 2 != 0 {
        return Err(Error::Shape(format!("width {width} cannot be split into three even rotary blocks")));
    }
    let pairs = width / 2;
    let base = pairs / 3;
    let (id, spatial) = match pairs % 3 {
        0 => (base, base),
        1 => (base + 1, base),
        _ => (base, base + 1),
    };
    Ok([2 * id, 2 * spatial, 2 * spatial])
}

/// Rotary embedding over a three-axis layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotary {
    pub width: usize,
    pub layout: [usize; 3],
    pub tables: [RopeTable; 3],
}

impl Rotary {
    pub fn new(width: usize, base: f64) -> Result<Self> {
        let layout = axis_layout(width)?;
        let tables = [RopeTable::new(layout[0], base)?, RopeTable::new(layout[1], base)?, RopeTable::new(layout[2], base)?];
        Ok(Self { width, layout, tables })
    }

    /// Per-token cosine/sine tables, one column per rotated pair.
    pub fn cache<T: Scalar>(&self, index: &PositionIndex) -> RotaryCache<T> {
        let pairs = self.width / 2;
        let mut cos = Mat::zeros(index.len(), pairs);
        let mut sin = Mat::zeros(index.len(), pairs);
        for (t, entry) in index.entries.iter().enumerate() {
            let coords = entry.coords();
            let mut pair = 0;
            for (axis, table) in self.tables.iter().enumerate() {
                for k in 0..table.frequencies() {
                    let angle = table.angle(k, coords[axis]);
                    cos.data[t * pairs + pair] = T::from_f64(angle.cos());
                    sin.data[t * pairs + pair] = T::from_f64(angle.sin());
                    pair += 1;
                }
            }
        }
        RotaryCache { cos, sin }
    }
}

/// Precomputed rotations for a specific position index.
#[derive(Clone, Debug)]
pub struct RotaryCache<T> {
    pub cos: Mat<T>,
    pub sin: Mat<T>,
}

impl<T: Scalar> RotaryCache<T> {
    /// Rotates columns `[offset, offset + width)` of every row of `m` in place.
    /// `inverse` applies the transpose rotation (used for gradients).
    pub fn rotate(&self, m: &mut Mat<T>, offset: usize, inverse: bool) {
        let pairs = self.cos.cols;
        debug_assert!(m.rows <= self.cos.rows);
        for r in 0..m.rows {
            let cos = self.cos.row(r);
            let sin = self.sin.row(r);
            let row = &mut m.row_mut(r)[offset..offset + 2 * pairs];
            for p in 0..pairs {
                let (c, s) = (cos[p], if inverse { -sin[p] } else { sin[p] });
                let x0 = row[2 * p];
                let x1 = row[2 * p + 1];
                row[2 * p] = x0 * c - x1 * s;
                row[2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

/// Rotates each token's `(id, row, col)` blocks by the angles of its index entry.
pub fn apply_rope<T: Scalar>(tokens: &TokenSequence<T>, rotary: &Rotary) -> Result<TokenSequence<T>> {
    if tokens.tokens.cols != rotary.width {
        return Err(Error::Shape(format!(
            "token width {} does not match rotary layout width {}",
            tokens.tokens.cols, rotary.width
        )));
    }
    if tokens.tokens.rows != tokens.index.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} index entries",
            tokens.tokens.rows,
            tokens.index.len()
        )));
    }
    let cache = rotary.cache::<T>(&tokens.index);
    let mut out = tokens.tokens.clone();
    cache.rotate(&mut out, 0, false);
    Ok(TokenSequence { tokens: out, index: tokens.index.clone() })
}
