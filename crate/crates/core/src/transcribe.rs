//! Mask to quadruple transcription: centroid, direction and quantity binning,
//! plus connected-component statistics for QA.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ChangeMask, Direction, Quantity, SemanticQuadruple};

/// Pixel-area cut points between the four quantity levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantityThresholds {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

impl Default for QuantityThresholds {
    fn default() -> Self {
        Self {
            t1: 800,
            t2: 4000,
            t3: 8000,
        }
    }
}

impl QuantityThresholds {
    pub fn new(t1: usize, t2: usize, t3: usize) -> Result<Self> {
        let t = Self { t1, t2, t3 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if 0 < self.t1 && self.t1 < self.t2 && self.t2 < self.t3 {
            Ok(())
        } else {
            Err(Error::InvalidThresholds(format!(
                "need 0 < t1 < t2 < t3, got {}, {}, {}",
                self.t1, self.t2, self.t3
            )))
        }
    }
}

/// Mean column and row of the foreground pixels.
pub fn centroid(mask: &BinaryMask) -> Result<(f64, f64)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut sx, mut sy) = (0u64, 0u64);
    for (x, y) in mask.foreground() {
        sx += x as u64;
        sy += y as u64;
    }
    let n = mask.count() as f64;
    Ok((sx as f64 / n, sy as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Low,
    Mid,
    High,
}

fn band(coord: f64, extent: f64) -> Band {
    if coord < extent / 3.0 {
        Band::Low
    } else if coord < 2.0 * extent / 3.0 {
        Band::Mid
    } else {
        Band::High
    }
}

/// Location of a centroid in the 3x3 grid over a `width x height` image.
///
/// Bands are half-open: a coordinate exactly on `H/3` is in the middle band
/// and one exactly on `2H/3` is in the last band.
pub fn direction(cx: f64, cy: f64, width: usize, height: usize) -> Direction {
    use Direction::*;
    let vertical = band(cy, height as f64);
    let horizontal = band(cx, width as f64);
    match (vertical, horizontal) {
        (Band::Low, Band::Low) => Northwest,
        (Band::Low, Band::Mid) => North,
        (Band::Low, Band::High) => Northeast,
        (Band::Mid, Band::Low) => West,
        (Band::Mid, Band::Mid) => Center,
        (Band::Mid, Band::High) => East,
        (Band::High, Band::Low) => Southwest,
        (Band::High, Band::Mid) => South,
        (Band::High, Band::High) => Southeast,
    }
}

pub fn quantity(pixel_count: usize, thresholds: &QuantityThresholds) -> Quantity {
    if pixel_count < thresholds.t1 {
        Quantity::Single
    } else if pixel_count < thresholds.t2 {
        Quantity::Few
    } else if pixel_count < thresholds.t3 {
        Quantity::Several
    } else {
        Quantity::Multiple
    }
}

/// One quadruple per non-empty class, in class-table order.
///
/// The mask is expected to pass [`ChangeMask::validate`]; labels without a
/// class-table entry are ignored.
pub fn transcribe_mask(
    mask: &ChangeMask,
    thresholds: &QuantityThresholds,
) -> Vec<SemanticQuadruple> {
    transcribe_mask_indexed(mask, thresholds)
        .into_iter()
        .map(|(_, q)| q)
        .collect()
}

/// Like [`transcribe_mask`], paired with each quadruple's class index.
pub fn transcribe_mask_indexed(
    mask: &ChangeMask,
    thresholds: &QuantityThresholds,
) -> Vec<(u16, SemanticQuadruple)> {
    let table = mask.class_table();
    if table.is_empty() {
        return Vec::new();
    }
    let max_index = table.iter().map(|c| c.index as usize).max().unwrap_or(0);
    // (count, sum_x, sum_y) per label value
    let mut acc = vec![(0u64, 0u64, 0u64); max_index + 1];
    let width = mask.width();
    for (row, labels) in mask.labels().chunks_exact(width).enumerate() {
        for (col, &label) in labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            if let Some(slot) = acc.get_mut(label as usize) {
                slot.0 += 1;
                slot.1 += col as u64;
                slot.2 += row as u64;
            }
        }
    }

    table
        .iter()
        .filter_map(|class| {
            let (n, sx, sy) = acc[class.index as usize];
            if n == 0 {
                return None;
            }
            let cx = sx as f64 / n as f64;
            let cy = sy as f64 / n as f64;
            let pixel_count = n as usize;
            Some((
                class.index,
                SemanticQuadruple {
                    location: direction(cx, cy, mask.width(), mask.height()),
                    quantity: quantity(pixel_count, thresholds),
                    category: class.category.clone(),
                    change_type: class.change_type.clone(),
                    pixel_count,
                    centroid: (cx, cy),
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Inclusive pixel bounds of a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub area: usize,
    pub bbox: BoundingBox,
    pub centroid: (f64, f64),
}

/// Connected components of the foreground, ordered by their first pixel in
/// row-major scan order.
pub fn region_stats(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Region> {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    let mut visited = vec![false; bits.len()];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..bits.len() {
        if !bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let (mut area, mut sx, mut sy) = (0usize, 0u64, 0u64);
        let mut bbox = BoundingBox {
            x_min: w,
            y_min: h,
            x_max: 0,
            y_max: 0,
        };
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as u64;
            sy += y as u64;
            bbox.x_min = bbox.x_min.min(x);
            bbox.y_min = bbox.y_min.min(y);
            bbox.x_max = bbox.x_max.max(x);
            bbox.y_max = bbox.y_max.max(y);
            for (nx, ny) in neighbours(x, y, w, h, connectivity) {
                let j = ny * w + nx;
                if bits[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        regions.push(Region {
            area,
            bbox,
            centroid: (sx as f64 / area as f64, sy as f64 / area as f64),
        });
    }
    regions
}

fn neighbours(
    x: usize,
    y: usize,
    w: usize,
    h: usize,
    connectivity: Connectivity,
) -> impl Iterator<Item = (usize, usize)> {
    const FOUR: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
    const EIGHT: [(isize, isize); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (-1, 0),
        (1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
    ];
    let offsets: &'static [(isize, isize)] = match connectivity {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    };
    offsets.iter().filter_map(move |&(dx, dy)| {
        let nx = x.checked_add_signed(dx)?;
        let ny = y.checked_add_signed(dy)?;
        (nx < w && ny < h).then_some((nx, ny))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChangeClass;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centroid_single_and_pair() {
        let m = BinaryMask::from_points(32, 32, &[(10, 10)]).unwrap();
        assert_eq!(centroid(&m).unwrap(), (10.0, 10.0));
        let m = BinaryMask::from_points(32, 32, &[(0, 0), (10, 20)]).unwrap();
        assert_eq!(centroid(&m).unwrap(), (5.0, 10.0));
        let empty = BinaryMask::empty(4, 4).unwrap();
        assert!(matches!(centroid(&empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn centroid_matches_brute_force_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<(usize, usize)> = (0..100)
            .map(|_| (rng.gen_range(0..512), rng.gen_range(0..512)))
            .collect();
        let mask = BinaryMask::from_points(512, 512, &points).unwrap();
        // brute force: scan every pixel, accumulate in floating point
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..512 {
            for x in 0..512 {
                if mask.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        let (cx, cy) = centroid(&mask).unwrap();
        assert!((cx - sx / n).abs() < 1e-12);
        assert!((cy - sy / n).abs() < 1e-12);
    }

    #[test]
    fn direction_examples() {
        assert_eq!(direction(10.0, 10.0, 512, 512), Direction::Northwest);
        assert_eq!(direction(256.0, 256.0, 512, 512), Direction::Center);
        // c_y == H/3 exactly falls into the middle band
        assert_eq!(direction(256.0, 256.0, 512, 768), Direction::Center);
        assert_eq!(direction(256.0, 255.9, 512, 768), Direction::North);
        // c_y == 2H/3 exactly falls into the last band
        assert_eq!(direction(256.0, 512.0, 512, 768), Direction::South);
    }

    /// Independent nine-way classification: compares against both cut points
    /// explicitly instead of going through a band enum.
    fn direction_oracle(cx: f64, cy: f64, w: usize, h: usize) -> &'static str {
        let (w, h) = (w as f64, h as f64);
        let north = cy < h / 3.0;
        let south = cy >= 2.0 * h / 3.0;
        let west = cx < w / 3.0;
        let east = cx >= 2.0 * w / 3.0;
        match (north, south, west, east) {
            (true, _, true, _) => "northwest",
            (true, _, _, true) => "northeast",
            (true, _, false, false) => "north",
            (_, true, true, _) => "southwest",
            (_, true, _, true) => "southeast",
            (_, true, false, false) => "south",
            (false, false, true, _) => "west",
            (false, false, _, true) => "east",
            _ => "center",
        }
    }

    #[test]
    fn direction_agrees_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let w = rng.gen_range(1..2048usize);
            let h = rng.gen_range(1..2048usize);
            // mix continuous and grid-boundary coordinates
            let cx = if rng.gen_bool(0.2) {
                (w as f64 / 3.0) * rng.gen_range(0..3) as f64
            } else {
                rng.gen_range(0.0..w as f64)
            };
            let cy = if rng.gen_bool(0.2) {
                (h as f64 / 3.0) * rng.gen_range(0..3) as f64
            } else {
                rng.gen_range(0.0..h as f64)
            };
            assert_eq!(
                direction(cx, cy, w, h).as_str(),
                direction_oracle(cx, cy, w, h)
            );
        }
    }

    #[test]
    fn quantity_boundaries() {
        let t = QuantityThresholds::default();
        let cases = [
            (1, Quantity::Single),
            (799, Quantity::Single),
            (800, Quantity::Few),
            (3999, Quantity::Few),
            (4000, Quantity::Several),
            (7999, Quantity::Several),
            (8000, Quantity::Multiple),
        ];
        for (n, q) in cases {
            assert_eq!(quantity(n, &t), q, "N = {n}");
        }
    }

    #[test]
    fn thresholds_must_increase() {
        assert!(QuantityThresholds::new(0, 1, 2).is_err());
        assert!(QuantityThresholds::new(5, 5, 6).is_err());
        assert!(QuantityThresholds::new(1, 2, 3).is_ok());
    }

    #[test]
    fn transcribe_constructed_rectangle() {
        // 100 x 50 block spanning x 400..500, y 35..85: N = 5000, centroid (449.5, 59.5)
        let (w, h) = (512, 512);
        let mut labels = vec![0u16; w * h];
        for y in 35..85 {
            for x in 400..500 {
                labels[y * w + x] = 1;
            }
        }
        let mask = ChangeMask::new(
            w,
            h,
            labels,
            vec![ChangeClass::new(1, "buildings", "destroyed")],
        )
        .unwrap();
        let q = transcribe_mask(&mask, &QuantityThresholds::default());
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].location, Direction::Northeast);
        assert_eq!(q[0].quantity, Quantity::Several);
        assert_eq!(q[0].category, "buildings");
        assert_eq!(q[0].change_type, "destroyed");
        assert_eq!(q[0].pixel_count, 5000);
        assert_eq!(q[0].centroid, (449.5, 59.5));
    }

    #[test]
    fn transcribe_empty_and_order() {
        let t = QuantityThresholds::default();
        assert!(transcribe_mask(&ChangeMask::blank(8, 8).unwrap(), &t).is_empty());

        let mut labels = vec![0u16; 64];
        labels[0] = 2;
        labels[63] = 1;
        let table = vec![
            ChangeClass::new(2, "greenhouse", "newly built"),
            ChangeClass::new(5, "refugee camp", "newly established"),
            ChangeClass::new(1, "buildings", "destroyed"),
        ];
        let mask = ChangeMask::new(8, 8, labels, table).unwrap();
        let q = transcribe_mask(&mask, &t);
        let cats: Vec<_> = q.iter().map(|q| q.category.as_str()).collect();
        assert_eq!(cats, ["greenhouse", "buildings"]);
        assert_eq!(q[0].location, Direction::Northwest);
        assert_eq!(q[1].location, Direction::Southeast);
    }

    #[test]
    fn region_stats_blocks() {
        assert!(region_stats(&BinaryMask::empty(5, 5).unwrap(), Connectivity::Four).is_empty());
        let pts = [
            (0, 0),
            (1, 0),
            (0, 1),
            (1, 1),
            (4, 3),
            (5, 3),
            (4, 4),
            (5, 4),
        ];
        let m = BinaryMask::from_points(8, 8, &pts).unwrap();
        let r = region_stats(&m, Connectivity::Four);
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|c| c.area == 4));
        assert_eq!(
            r[0].bbox,
            BoundingBox {
                x_min: 0,
                y_min: 0,
                x_max: 1,
                y_max: 1
            }
        );
        assert_eq!(r[1].centroid, (4.5, 3.5));
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let m = BinaryMask::from_points(4, 4, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(region_stats(&m, Connectivity::Four).len(), 2);
        assert_eq!(region_stats(&m, Connectivity::Eight).len(), 1);
    }

    /// Union-find labelling, independent of the BFS flood fill.
    fn union_find_areas(mask: &BinaryMask) -> Vec<usize> {
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let (w, h) = (mask.width(), mask.height());
        let mut parent: Vec<usize> = (0..w * h).collect();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) {
                    continue;
                }
                if x + 1 < w && mask.get(x + 1, y) {
                    let (a, b) = (
                        find(&mut parent, y * w + x),
                        find(&mut parent, y * w + x + 1),
                    );
                    parent[a] = b;
                }
                if y + 1 < h && mask.get(x, y + 1) {
                    let (a, b) = (
                        find(&mut parent, y * w + x),
                        find(&mut parent, (y + 1) * w + x),
                    );
                    parent[a] = b;
                }
            }
        }
        let mut areas = std::collections::BTreeMap::new();
        for (i, &b) in mask.bits().iter().enumerate() {
            if b {
                *areas.entry(find(&mut parent, i)).or_insert(0usize) += 1;
            }
        }
        let mut v: Vec<usize> = areas.into_values().collect();
        v.sort_unstable();
        v
    }

    proptest! {
        #[test]
        fn regions_match_union_find(w in 1usize..30, h in 1usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits = (0..w * h).map(|_| rng.gen_bool(0.45)).collect();
            let mask = BinaryMask::new(w, h, bits).unwrap();
            let regions = region_stats(&mask, Connectivity::Four);
            prop_assert_eq!(regions.iter().map(|r| r.area).sum::<usize>(), mask.count());
            let mut areas: Vec<usize> = regions.iter().map(|r| r.area).collect();
            areas.sort_unstable();
            prop_assert_eq!(areas, union_find_areas(&mask));
        }

        #[test]
        fn quantity_is_monotone(a in 1usize..20_000, b in 1usize..20_000) {
            let t = QuantityThresholds::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(quantity(lo, &t) <= quantity(hi, &t));
        }

        #[test]
        fn reflection_mirrors_direction(w in 3usize..64, h in 3usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(usize, usize)> =
                (0..rng.gen_range(1..20)).map(|_| (rng.gen_range(0..w), rng.gen_range(0..h))).collect();
            let mask = BinaryMask::from_points(w, h, &pts).unwrap();
            let (cx, cy) = centroid(&mask).unwrap();
            prop_assume!(band_is_symmetric(cx, w) && band_is_symmetric(cy, h));
            let d = direction(cx, cy, w, h);
            let flip_h: Vec<_> = pts.iter().map(|&(x, y)| (w - 1 - x, y)).collect();
            let flip_v: Vec<_> = pts.iter().map(|&(x, y)| (x, h - 1 - y)).collect();
            let mh = BinaryMask::from_points(w, h, &flip_h).unwrap();
            let mv = BinaryMask::from_points(w, h, &flip_v).unwrap();
            let (hx, hy) = centroid(&mh).unwrap();
            let (vx, vy) = centroid(&mv).unwrap();
            prop_assert_eq!(direction(hx, hy, w, h), d.mirror_horizontal());
            prop_assert_eq!(direction(vx, vy, w, h), d.mirror_vertical());
        }

        #[test]
        fn translation_moves_centroid(dx in 0usize..20, dy in 0usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(usize, usize)> =
                (0..rng.gen_range(1..30)).map(|_| (rng.gen_range(0..40), rng.gen_range(0..40))).collect();
            let moved: Vec<_> = pts.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
            let (ax, ay) = centroid(&BinaryMask::from_points(64, 64, &pts).unwrap()).unwrap();
            let (bx, by) = centroid(&BinaryMask::from_points(64, 64, &moved).unwrap()).unwrap();
            prop_assert!((bx - ax - dx as f64).abs() < 1e-9);
            prop_assert!((by - ay - dy as f64).abs() < 1e-9);
        }
    }

    /// Pixel-index reflection maps `c` to `e - 1 - c`, which maps the band
    /// `[0, e/3)` onto `(2e/3 - 1, e - 1]`. The mirror property only holds
    /// when the reflected coordinate lands in the mirrored band, which is the
    /// case away from the cut points by more than one pixel.
    fn band_is_symmetric(c: f64, e: usize) -> bool {
        let mirrored = e as f64 - 1.0 - c;
        let b = band(c, e as f64);
        let m = band(mirrored, e as f64);
        matches!(
            (b, m),
            (Band::Low, Band::High) | (Band::High, Band::Low) | (Band::Mid, Band::Mid)
        )
    }
}
