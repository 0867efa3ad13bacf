//! Core value types: rasters, slices, masks, region grids and dataset splits.
//!
//! All rasters are stored row-major with `(height, width)` = `(rows, cols)`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes in the binary infection task.
pub const NUM_CLASSES: usize = 2;

/// Background class id.
pub const BACKGROUND: u8 = 0;
/// Infected class id.
pub const INFECTED: u8 = 1;
/// Marker for pixels that carry no supervision.
pub const UNLABELED: i8 = -1;

/// A dense row-major 2D array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "raster {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    /// Panics on zero dimensions.
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "raster dimensions must be positive");
        Raster {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "raster dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Raster {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Copy of the sub-rectangle `rect`.
    pub fn crop(&self, rect: Rect) -> Raster<T> {
        Raster::from_fn(rect.height, rect.width, |r, c| {
            self.get(rect.row0 + r, rect.col0 + c)
        })
    }
}

/// A preprocessed 2D slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSlice {
    pub id: String,
    pub scan_id: String,
    pub slice_index: usize,
    pub pixels: Raster<f64>,
}

impl ImageSlice {
    pub fn new(
        id: impl Into<String>,
        scan_id: impl Into<String>,
        slice_index: usize,
        pixels: Raster<f64>,
    ) -> Self {
        ImageSlice {
            id: id.into(),
            scan_id: scan_id.into(),
            slice_index,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.shape()
    }
}

/// Full per-pixel binary ground truth for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    pub image_id: String,
    classes: Raster<u8>,
}

impl GroundTruthMask {
    pub fn new(image_id: impl Into<String>, classes: Raster<u8>) -> Result<Self> {
        if let Some(v) = classes.as_slice().iter().find(|&&v| v > INFECTED) {
            return Err(Error::invalid(format!("mask value {v} is not a binary class")));
        }
        Ok(GroundTruthMask {
            image_id: image_id.into(),
            classes,
        })
    }

    pub fn classes(&self) -> &Raster<u8> {
        &self.classes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.classes.shape()
    }

    pub fn infected_pixels(&self) -> usize {
        self.classes.as_slice().iter().filter(|&&v| v == INFECTED).count()
    }

    /// The mask as a fully labeled tri-state mask.
    pub fn to_partial(&self) -> PartialLabelMask {
        PartialLabelMask {
            image_id: self.image_id.clone(),
            labels: self.classes.map(|&v| v as i8),
        }
    }
}

/// Tri-state supervision raster: `-1` unlabeled, `0` background, `1` infected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialLabelMask {
    pub image_id: String,
    labels: Raster<i8>,
}

impl PartialLabelMask {
    pub fn new(image_id: impl Into<String>, labels: Raster<i8>) -> Result<Self> {
        if let Some(v) = labels.as_slice().iter().find(|&&v| !(-1..=1).contains(&v)) {
            return Err(Error::invalid(format!("label value {v} outside {{-1, 0, 1}}")));
        }
        Ok(PartialLabelMask {
            image_id: image_id.into(),
            labels,
        })
    }

    pub fn unlabeled(image_id: impl Into<String>, height: usize, width: usize) -> Self {
        PartialLabelMask {
            image_id: image_id.into(),
            labels: Raster::filled(height, width, UNLABELED),
        }
    }

    pub fn labels(&self) -> &Raster<i8> {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn set(&mut self, row: usize, col: usize, value: i8) {
        debug_assert!((-1..=1).contains(&value));
        self.labels.set(row, col, value);
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.labels.get(row, col)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.as_slice().iter().filter(|&&v| v != UNLABELED).count()
    }

    /// Copy every labeled pixel of `delta` into `self`.
    pub fn merge(&mut self, delta: &PartialLabelMask) -> Result<()> {
        if delta.shape() != self.shape() {
            return Err(Error::invalid("label delta shape mismatch"));
        }
        for (dst, &src) in self
            .labels
            .as_mut_slice()
            .iter_mut()
            .zip(delta.labels.as_slice())
        {
            if src != UNLABELED {
                *dst = src;
            }
        }
        Ok(())
    }
}

/// An axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0
            && row < self.row0 + self.height
            && col >= self.col0
            && col < self.col0 + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Row-major pixel coordinates inside the rectangle.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row0 + self.height)
            .flat_map(move |r| (self.col0..self.col0 + self.width).map(move |c| (r, c)))
    }
}

/// A `rows x cols` rectangular partition of an image, indexed row-major.
///
/// When a dimension does not divide evenly, the last row (column) absorbs
/// the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub rows: usize,
    pub cols: usize,
    pub image_height: usize,
    pub image_width: usize,
}

/// Build a square `sqrt(k) x sqrt(k)` grid.
pub fn build_grid(height: usize, width: usize, k: usize) -> Result<RegionGrid> {
    if k == 0 {
        return Err(Error::invalid("region count must be at least 1"));
    }
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k {
        return Err(Error::invalid(format!(
            "region count {k} is not a perfect square; pass an explicit shape"
        )));
    }
    RegionGrid::with_shape(height, width, side, side)
}

impl RegionGrid {
    pub fn with_shape(height: usize, width: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid needs at least one row and column"));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if rows * cols > height * width || rows > height || cols > width {
            return Err(Error::invalid(format!(
                "{rows}x{cols} regions do not fit a {height}x{width} image"
            )));
        }
        Ok(RegionGrid {
            rows,
            cols,
            image_height: height,
            image_width: width,
        })
    }

    /// Number of regions K.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn span(extent: usize, parts: usize, i: usize) -> (usize, usize) {
        let base = extent / parts;
        let start = i * base;
        let len = if i + 1 == parts { extent - start } else { base };
        (start, len)
    }

    pub fn region_bounds(&self, index: usize) -> Result<Rect> {
        if index >= self.len() {
            return Err(Error::invalid(format!(
                "region index {index} out of range for {} regions",
                self.len()
            )));
        }
        let (row0, height) = Self::span(self.image_height, self.rows, index / self.cols);
        let (col0, width) = Self::span(self.image_width, self.cols, index % self.cols);
        Ok(Rect {
            row0,
            col0,
            height,
            width,
        })
    }

    /// Index of the region containing pixel `(row, col)`.
    pub fn region_of(&self, row: usize, col: usize) -> usize {
        let rbase = self.image_height / self.rows;
        let cbase = self.image_width / self.cols;
        let r = (row / rbase).min(self.rows - 1);
        let c = (col / cbase).min(self.cols - 1);
        r * self.cols + c
    }

    pub fn regions(&self) -> impl Iterator<Item = (usize, Rect)> + '_ {
        (0..self.len()).map(move |i| (i, self.region_bounds(i).expect("index in range")))
    }
}

/// Labeling state of one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegionState {
    Unlabeled,
    PointLabeled,
    BackgroundTagged,
    PixelLabeled,
}

impl RegionState {
    pub fn is_labeled(self) -> bool {
        self != RegionState::Unlabeled
    }
}

/// An addressable region of one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionRef {
    pub image_id: String,
    pub region_index: usize,
    pub state: RegionState,
}

impl RegionRef {
    pub fn unlabeled(image_id: impl Into<String>, region_index: usize) -> Self {
        RegionRef {
            image_id: image_id.into(),
            region_index,
            state: RegionState::Unlabeled,
        }
    }

    /// Apply a state transition. Only `Unlabeled -> labeled` is allowed.
    pub fn transition(&mut self, next: RegionState) -> Result<()> {
        if self.state.is_labeled() {
            return Err(Error::InvalidState(format!(
                "region {}#{} is already {:?}",
                self.image_id, self.region_index, self.state
            )));
        }
        if !next.is_labeled() {
            return Err(Error::InvalidState("cannot transition to Unlabeled".into()));
        }
        self.state = next;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// Every scan contributes a prefix to train, then val, then test.
    Mixed,
    /// Whole scans are assigned to one split.
    Separate,
}

/// How to size the splits: fractions (Mixed) or scan counts (Separate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    Fractions { train: f64, val: f64, test: f64 },
    Counts { train: usize, val: usize, test: usize },
}

/// One scan's slice ids in acquisition order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSlices {
    pub scan_id: String,
    pub slice_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub mode: SplitMode,
}

pub fn make_split(scans: &[ScanSlices], mode: SplitMode, sizes: SplitSizes) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        mode,
    };
    match (mode, sizes) {
        (SplitMode::Mixed, SplitSizes::Fractions { train, val, test }) => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f))
                || (train + val + test - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid("split fractions must lie in [0, 1] and sum to 1"));
            }
            for scan in scans {
                let n = scan.slice_ids.len();
                // Tolerance guards products like 0.45 * 20 landing a ulp low.
                let b1 = ((train * n as f64) + 1e-9).floor() as usize;
                let b2 = (((train + val) * n as f64) + 1e-9).floor() as usize;
                let b2 = b2.clamp(b1, n);
                split.train.extend_from_slice(&scan.slice_ids[..b1.min(n)]);
                split.val.extend_from_slice(&scan.slice_ids[b1.min(n)..b2]);
                split.test.extend_from_slice(&scan.slice_ids[b2..]);
            }
        }
        (SplitMode::Separate, SplitSizes::Counts { train, val, test }) => {
            if scans.len() < 3 {
                return Err(Error::invalid(format!(
                    "separate split needs at least 3 scans, got {}",
                    scans.len()
                )));
            }
            if train + val + test != scans.len() {
                return Err(Error::invalid(format!(
                    "scan counts {train}+{val}+{test} do not sum to {} scans",
                    scans.len()
                )));
            }
            for (i, scan) in scans.iter().enumerate() {
                let dst = if i < train {
                    &mut split.train
                } else if i < train + val {
                    &mut split.val
                } else {
                    &mut split.test
                };
                dst.extend_from_slice(&scan.slice_ids);
            }
        }
        (SplitMode::Mixed, _) => return Err(Error::invalid("mixed split needs fractions")),
        (SplitMode::Separate, _) => return Err(Error::invalid("separate split needs scan counts")),
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::invalid(format!(
            "split leaves an empty partition (train {}, val {}, test {})",
            split.train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    let mut seen = HashSet::new();
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("slice id `{id}` appears twice")));
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scans(sizes: &[usize]) -> Vec<ScanSlices> {
        sizes
            .iter()
            .enumerate()
            .map(|(s, &n)| ScanSlices {
                scan_id: format!("scan{s}"),
                slice_ids: (0..n).map(|i| format!("s{s}_{i}")).collect(),
            })
            .collect()
    }

    #[test]
    fn full_size_grid_has_44px_regions() {
        let g = build_grid(352, 352, 64).unwrap();
        assert_eq!((g.rows, g.cols), (8, 8));
        for (_, r) in g.regions() {
            assert_eq!((r.height, r.width), (44, 44));
        }
        assert_eq!(g.region_bounds(0).unwrap(), Rect { row0: 0, col0: 0, height: 44, width: 44 });
        assert_eq!(
            g.region_bounds(63).unwrap(),
            Rect { row0: 308, col0: 308, height: 44, width: 44 }
        );
    }

    #[test]
    fn even_and_remainder_grids() {
        let g = build_grid(4, 4, 4).unwrap();
        assert!(g.regions().all(|(_, r)| r.height == 2 && r.width == 2));

        let g = build_grid(5, 5, 4).unwrap();
        let dims: Vec<_> = g.regions().map(|(_, r)| (r.height, r.width)).collect();
        assert_eq!(dims, vec![(2, 2), (2, 3), (3, 2), (3, 3)]);

        let g = build_grid(7, 9, 1).unwrap();
        assert_eq!(g.region_bounds(0).unwrap(), Rect { row0: 0, col0: 0, height: 7, width: 9 });
    }

    #[test]
    fn grid_errors() {
        assert!(build_grid(8, 8, 0).is_err());
        assert!(build_grid(8, 8, 5).is_err());
        assert!(build_grid(2, 2, 9).is_err());
        assert!(build_grid(4, 4, 4).unwrap().region_bounds(4).is_err());
    }

    #[test]
    fn region_state_is_monotone() {
        let mut r = RegionRef::unlabeled("a", 0);
        assert!(r.transition(RegionState::Unlabeled).is_err());
        r.transition(RegionState::PointLabeled).unwrap();
        assert!(r.transition(RegionState::BackgroundTagged).is_err());
        assert_eq!(r.state, RegionState::PointLabeled);
    }

    #[test]
    fn separate_split_follows_scan_order() {
        let s = scans(&[2; 9]);
        let split = make_split(&s, SplitMode::Separate, SplitSizes::Counts { train: 5, val: 1, test: 3 })
            .unwrap();
        assert_eq!(split.train.len(), 10);
        assert_eq!(split.train[0], "s0_0");
        assert_eq!(split.train[9], "s4_1");
        assert_eq!(split.val, vec!["s5_0", "s5_1"]);
        assert_eq!(split.test.first().unwrap(), "s6_0");
    }

    #[test]
    fn mixed_split_uses_floor_boundaries() {
        let s = scans(&[20]);
        let split = make_split(
            &s,
            SplitMode::Mixed,
            SplitSizes::Fractions { train: 0.45, val: 0.05, test: 0.50 },
        )
        .unwrap();
        let idx = |v: &[String]| -> Vec<usize> {
            v.iter().map(|id| id.split('_').nth(1).unwrap().parse().unwrap()).collect()
        };
        assert_eq!(idx(&split.train), (0..9).collect::<Vec<_>>());
        assert_eq!(idx(&split.val), vec![9]);
        assert_eq!(idx(&split.test), (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn split_errors() {
        let one = scans(&[10]);
        assert!(make_split(&one, SplitMode::Separate, SplitSizes::Counts { train: 1, val: 0, test: 0 })
            .is_err());
        let s = scans(&[3, 3, 3]);
        assert!(make_split(&s, SplitMode::Separate, SplitSizes::Counts { train: 1, val: 1, test: 2 })
            .is_err());
        // two slices cannot feed three non-empty mixed partitions
        let tiny = scans(&[2]);
        assert!(make_split(
            &tiny,
            SplitMode::Mixed,
            SplitSizes::Fractions { train: 0.45, val: 0.05, test: 0.5 }
        )
        .is_err());
    }

    #[test]
    fn exhaustive_pixel_ownership_small_grids() {
        for h in 1..=9 {
            for w in 1..=9 {
                for side in 1..=3 {
                    let Ok(g) = build_grid(h, w, side * side) else { continue };
                    let mut owner = vec![usize::MAX; h * w];
                    for (i, rect) in g.regions() {
                        for (r, c) in rect.pixels() {
                            assert_eq!(owner[r * w + c], usize::MAX, "pixel owned twice");
                            owner[r * w + c] = i;
                        }
                    }
                    for r in 0..h {
                        for c in 0..w {
                            assert_eq!(owner[r * w + c], g.region_of(r, c));
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn region_areas_sum_to_image(h in 1usize..400, w in 1usize..400, rows in 1usize..20, cols in 1usize..20) {
            prop_assume!(rows <= h && cols <= w);
            let g = RegionGrid::with_shape(h, w, rows, cols).unwrap();
            let total: usize = g.regions().map(|(_, r)| r.area()).sum();
            prop_assert_eq!(total, h * w);
            // sampled ownership check
            for (r, c) in [(0, 0), (h - 1, w - 1), (h / 2, w / 3), (h / 3, w - 1)] {
                let idx = g.region_of(r, c);
                prop_assert!(g.region_bounds(idx).unwrap().contains(r, c));
            }
        }

        #[test]
        fn separate_splits_never_share_scans(
            sizes in prop::collection::vec(1usize..6, 3..12),
            a in 1usize..4, b in 1usize..4,
        ) {
            let n = sizes.len();
            prop_assume!(a + b < n);
            let s = scans(&sizes);
            let split = make_split(&s, SplitMode::Separate, SplitSizes::Counts { train: a, val: b, test: n - a - b }).unwrap();
            let scan_of = |id: &String| id.split('_').next().unwrap().to_string();
            let tr: HashSet<_> = split.train.iter().map(scan_of).collect();
            let va: HashSet<_> = split.val.iter().map(scan_of).collect();
            let te: HashSet<_> = split.test.iter().map(scan_of).collect();
            prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            prop_assert_eq!(split.train.len() + split.val.len() + split.test.len(), sizes.iter().sum::<usize>());
        }

        #[test]
        fn mixed_splits_are_disjoint_and_exhaustive(sizes in prop::collection::vec(20usize..40, 1..6)) {
            let s = scans(&sizes);
            let split = make_split(&s, SplitMode::Mixed, SplitSizes::Fractions { train: 0.45, val: 0.05, test: 0.5 }).unwrap();
            let all: HashSet<_> = split.train.iter().chain(&split.val).chain(&split.test).collect();
            prop_assert_eq!(all.len(), sizes.iter().sum::<usize>());
        }
    }
}
