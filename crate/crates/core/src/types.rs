//! Shared domain types: masks, quadruples, rendered descriptions, embedding
//! batches, loss weights and the semantic-change confusion matrix.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index reserved for "no change" in every label raster.
pub const NO_CHANGE: u16 = 0;

/// Boolean raster, row-major, with a cached foreground count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    count: usize,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height, bits.len())?;
        let count = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            width,
            height,
            bits,
            count,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    /// Builds a mask from a list of `(x, y)` foreground coordinates.
    pub fn from_points(width: usize, height: usize, points: &[(usize, usize)]) -> Result<Self> {
        let mut bits = vec![false; width.saturating_mul(height)];
        for &(x, y) in points {
            if x >= width || y >= height {
                return Err(Error::OutOfBounds {
                    x,
                    y,
                    width,
                    height,
                });
            }
            bits[y * width + x] = true;
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }
}

/// One entry of a mask's class table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeClass {
    pub index: u16,
    pub category: String,
    pub change_type: String,
}

impl ChangeClass {
    pub fn new(index: u16, category: impl Into<String>, change_type: impl Into<String>) -> Self {
        Self {
            index,
            category: category.into(),
            change_type: change_type.into(),
        }
    }
}

/// Single-label raster of class indices plus the table describing each index.
///
/// Construction only checks raster geometry; class-table consistency is
/// reported by [`ChangeMask::validate`] so that malformed inputs can be
/// inspected instead of rejected outright.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    class_table: Vec<ChangeClass>,
}

/// A single invariant violation found by [`ChangeMask::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    /// A pixel carries a label with no class-table entry. Reports the first
    /// offending pixel and how many pixels share the label.
    UnknownLabel {
        label: u16,
        x: usize,
        y: usize,
        pixels: usize,
    },
    /// The class table describes index 0, which is reserved for no-change.
    ReservedIndex { position: usize },
    /// The same index is described twice.
    DuplicateIndex { index: u16, position: usize },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::UnknownLabel {
                label,
                x,
                y,
                pixels,
            } => write!(
                f,
                "unknown label {label} at ({x}, {y}) ({pixels} pixels) has no class table entry"
            ),
            Finding::ReservedIndex { position } => {
                write!(f, "class table entry #{position} uses reserved index 0")
            }
            Finding::DuplicateIndex { index, position } => {
                write!(f, "class table entry #{position} repeats index {index}")
            }
        }
    }
}

impl ChangeMask {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u16>,
        class_table: Vec<ChangeClass>,
    ) -> Result<Self> {
        check_dims(width, height, labels.len())?;
        Ok(Self {
            width,
            height,
            labels,
            class_table,
        })
    }

    /// All-no-change mask with an empty class table.
    pub fn blank(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![NO_CHANGE; width * height], Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn class_table(&self) -> &[ChangeClass] {
        &self.class_table
    }

    pub fn label(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn class(&self, index: u16) -> Option<&ChangeClass> {
        self.class_table.iter().find(|c| c.index == index)
    }

    /// Checks the class-table invariants. An empty result means the mask is valid.
    pub fn validate(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (position, class) in self.class_table.iter().enumerate() {
            if class.index == NO_CHANGE {
                findings.push(Finding::ReservedIndex { position });
            } else if !seen.insert(class.index) {
                findings.push(Finding::DuplicateIndex {
                    index: class.index,
                    position,
                });
            }
        }

        let known: std::collections::HashSet<u16> =
            self.class_table.iter().map(|c| c.index).collect();
        // label -> (first pixel, count), in order of first appearance
        let mut unknown: Vec<(u16, usize, usize)> = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if label == NO_CHANGE || known.contains(&label) {
                continue;
            }
            match unknown.iter_mut().find(|(l, _, _)| *l == label) {
                Some(entry) => entry.2 += 1,
                None => unknown.push((label, i, 1)),
            }
        }
        for (label, first, pixels) in unknown {
            findings.push(Finding::UnknownLabel {
                label,
                x: first % self.width,
                y: first / self.width,
                pixels,
            });
        }
        findings
    }

    /// Per-class binary masks in class-table order.
    pub fn decompose(&self) -> Vec<(ChangeClass, BinaryMask)> {
        self.class_table
            .iter()
            .map(|class| {
                let bits = self.labels.iter().map(|&l| l == class.index).collect();
                let mask = BinaryMask::new(self.width, self.height, bits)
                    .expect("dimensions already validated");
                (class.clone(), mask)
            })
            .collect()
    }

    /// Inverse of [`decompose`](Self::decompose) for pixel-disjoint classes.
    pub fn recompose(
        parts: &[(ChangeClass, BinaryMask)],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let mut labels = vec![NO_CHANGE; width * height];
        for (class, mask) in parts {
            if mask.width() != width || mask.height() != height {
                return Err(Error::ShapeMismatch(format!(
                    "class {} mask is {}x{}, expected {width}x{height}",
                    class.index,
                    mask.width(),
                    mask.height()
                )));
            }
            for (label, &bit) in labels.iter_mut().zip(mask.bits()) {
                if bit {
                    *label = class.index;
                }
            }
        }
        Self::new(
            width,
            height,
            labels,
            parts.iter().map(|(c, _)| c.clone()).collect(),
        )
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions(format!("{width}x{height} raster")));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::InvalidDimensions(format!(
            "{width}x{height} raster needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

/// Nine-way location label from a 3x3 partition of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    North,
    South,
    East,
    West,
    Center,
    Northeast,
    Northwest,
    Southeast,
    Southwest,
}

impl Direction {
    pub const ALL: [Direction; 9] = [
        Direction::North,
        Direction::South,
        Direction::East,
        Direction::West,
        Direction::Center,
        Direction::Northeast,
        Direction::Northwest,
        Direction::Southeast,
        Direction::Southwest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::South => "south",
            Direction::East => "east",
            Direction::West => "west",
            Direction::Center => "center",
            Direction::Northeast => "northeast",
            Direction::Northwest => "northwest",
            Direction::Southeast => "southeast",
            Direction::Southwest => "southwest",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == word)
    }

    /// East and west swapped.
    pub fn mirror_horizontal(self) -> Self {
        use Direction::*;
        match self {
            East => West,
            West => East,
            Northeast => Northwest,
            Northwest => Northeast,
            Southeast => Southwest,
            Southwest => Southeast,
            d => d,
        }
    }

    /// North and south swapped.
    pub fn mirror_vertical(self) -> Self {
        use Direction::*;
        match self {
            North => South,
            South => North,
            Northeast => Southeast,
            Southeast => Northeast,
            Northwest => Southwest,
            Southwest => Northwest,
            d => d,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Four-level area-binned count descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "a single")]
    Single,
    #[serde(rename = "a few")]
    Few,
    #[serde(rename = "several")]
    Several,
    #[serde(rename = "multiple")]
    Multiple,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [
        Quantity::Single,
        Quantity::Few,
        Quantity::Several,
        Quantity::Multiple,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Single => "a single",
            Quantity::Few => "a few",
            Quantity::Several => "several",
            Quantity::Multiple => "multiple",
        }
    }

    pub fn from_phrase(phrase: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.as_str() == phrase)
    }

    pub fn is_singular(self) -> bool {
        self == Quantity::Single
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where / what / how / how many for one change class of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticQuadruple {
    pub location: Direction,
    pub quantity: Quantity,
    pub category: String,
    pub change_type: String,
    pub pixel_count: usize,
    /// `(c_x, c_y)`: column and row averages of the foreground pixels.
    pub centroid: (f64, f64),
}

/// A rendered sentence together with what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDescription {
    pub sentence: String,
    pub template_id: u8,
    pub quadruple: SemanticQuadruple,
    pub rng_seed_used: u64,
}

/// Dense row-major `rows x cols` matrix of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions(format!(
                "{rows}x{cols} embedding batch"
            )));
        }
        if rows * cols != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} batch needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding entry {i}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged embedding rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Loss weighting and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Focal weight.
    pub alpha: f64,
    /// Dice weight.
    pub beta: f64,
    /// Lovász weight.
    pub gamma: f64,
    /// Contrastive weight in the total objective.
    pub lambda: f64,
    /// Similarity temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.3,
            gamma: 0.3,
            lambda: 0.5,
            tau: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (name, w) in named {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidWeight(format!("{name} = {w}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        Ok(())
    }
}

/// `(n+1) x (n+1)` confusion matrix; row = ground truth, column = prediction,
/// index 0 = no-change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScdConfusion {
    n_classes: usize,
    cells: Vec<u64>,
}

impl ScdConfusion {
    pub fn new(n_classes: usize) -> Self {
        let side = n_classes + 1;
        Self {
            n_classes,
            cells: vec![0; side * side],
        }
    }

    pub fn from_cells(n_classes: usize, cells: Vec<u64>) -> Result<Self> {
        let side = n_classes + 1;
        if cells.len() != side * side {
            return Err(Error::ShapeMismatch(format!(
                "{side}x{side} confusion needs {} cells, got {}",
                side * side,
                cells.len()
            )));
        }
        Ok(Self { n_classes, cells })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Matrix side length, `n_classes + 1`.
    pub fn side(&self) -> usize {
        self.n_classes + 1
    }

    pub fn cells(&self) -> &[u64] {
        &self.cells
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.cells[gt * self.side() + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, count: u64) {
        let side = self.side();
        self.cells[gt * side + pred] += count;
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    /// Cell-wise sum with another confusion of the same size.
    pub fn merge(&mut self, other: &ScdConfusion) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge {}-class confusion into {}-class confusion",
                other.n_classes, self.n_classes
            )));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
        Ok(())
    }

    /// Ground truth and prediction swapped.
    pub fn transposed(&self) -> Self {
        let side = self.side();
        let mut cells = vec![0; side * side];
        for r in 0..side {
            for c in 0..side {
                cells[c * side + r] = self.cells[r * side + c];
            }
        }
        Self {
            n_classes: self.n_classes,
            cells,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blank_mask_is_valid() {
        let mask = ChangeMask::blank(4, 4).unwrap();
        assert!(mask.validate().is_empty());
    }

    #[test]
    fn unknown_label_is_reported_once() {
        let mut labels = vec![0; 16];
        labels[5] = 3;
        labels[6] = 3;
        let mask = ChangeMask::new(
            4,
            4,
            labels,
            vec![ChangeClass::new(1, "buildings", "destroyed")],
        )
        .unwrap();
        assert_eq!(
            mask.validate(),
            vec![Finding::UnknownLabel {
                label: 3,
                x: 1,
                y: 1,
                pixels: 2
            }]
        );
    }

    #[test]
    fn reserved_index_is_reported() {
        let mask = ChangeMask::new(4, 4, vec![0; 16], vec![ChangeClass::new(0, "x", "y")]).unwrap();
        assert_eq!(
            mask.validate(),
            vec![Finding::ReservedIndex { position: 0 }]
        );
    }

    #[test]
    fn bad_dimensions_rejected() {
        assert!(BinaryMask::new(0, 3, vec![]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
        assert!(ChangeMask::new(3, 3, vec![0; 8], vec![]).is_err());
    }

    #[test]
    fn embedding_batch_rejects_nan() {
        assert!(EmbeddingBatch::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingBatch::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            (w.alpha, w.beta, w.gamma, w.lambda, w.tau),
            (0.4, 0.3, 0.3, 0.5, 0.7)
        );
        assert!(w.validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { beta: -0.1, ..w }.validate().is_err());
    }

    fn arb_mask() -> impl Strategy<Value = ChangeMask> {
        (1usize..24, 1usize..24, 0u16..5).prop_flat_map(|(w, h, n)| {
            proptest::collection::vec(0..=n, w * h).prop_map(move |labels| {
                let table = (1..=n)
                    .map(|i| ChangeClass::new(i, format!("c{i}"), "t"))
                    .collect();
                ChangeMask::new(w, h, labels, table).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn decompose_recompose_round_trip(mask in arb_mask()) {
            let parts = mask.decompose();
            let back = ChangeMask::recompose(&parts, mask.width(), mask.height()).unwrap();
            prop_assert_eq!(back, mask);
        }

        #[test]
        fn cached_count_matches_naive(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
            let mut state = seed;
            let bits: Vec<bool> = (0..w * h)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    state >> 63 == 1
                })
                .collect();
            let naive = bits.iter().filter(|&&b| b).count();
            let mask = BinaryMask::new(w, h, bits).unwrap();
            prop_assert_eq!(mask.count(), naive);
            prop_assert_eq!(mask.foreground().count(), naive);
        }
    }
}
