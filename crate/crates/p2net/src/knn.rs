//! Exact nearest-neighbor search into a target frame, with a brute-force
//! oracle and a timing hook.
//!
//! All distance math runs in f64 regardless of the f32 coordinates so that
//! argmin comparisons are stable near ties; ties break to the lowest target
//! index everywhere.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame_io::Frame;

/// Result of a nearest-neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    pub target_index: usize,
    pub distance: f64,
}

#[inline]
fn dist_sq(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// `(d2, idx)` beats the current best if strictly closer, or equally close
/// with a lower index.
#[inline]
fn better(d2: f64, idx: usize, best_d2: f64, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

#[derive(Debug, Clone)]
struct KdNode {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone)]
enum Structure {
    KdTree { nodes: Vec<KdNode>, root: i32 },
    Grid(Grid),
}

/// Immutable snapshot of a target frame's coordinates plus an acceleration
/// structure. Queries never mutate the index, so it is safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    coords: Vec<[f32; 3]>,
    structure: Structure,
}

impl SpatialIndex {
    /// Balanced KD-tree over the target's coordinates.
    pub fn build(target: &Frame) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let coords: Vec<[f32; 3]> = target.points.iter().map(|p| p.coords()).collect();
        let mut order: Vec<u32> = (0..coords.len() as u32).collect();
        let mut nodes = Vec::with_capacity(coords.len());
        let root = build_kd(&coords, &mut order, &mut nodes, 0);
        Ok(SpatialIndex {
            coords,
            structure: Structure::KdTree { nodes, root },
        })
    }

    /// Uniform-grid variant with the given cell edge in meters.
    pub fn build_grid(target: &Frame, cell_size: f32) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if !cell_size.is_finite() || cell_size <= 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("grid cell size {cell_size} must be positive"),
            });
        }
        let coords: Vec<[f32; 3]> = target.points.iter().map(|p| p.coords()).collect();
        let grid = Grid::build(&coords, cell_size as f64);
        Ok(SpatialIndex {
            coords,
            structure: Structure::Grid(grid),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Exact nearest neighbor of `query`; ties break to the lowest index.
    pub fn query_nearest(&self, query: [f32; 3]) -> NeighborHit {
        self.query_nearest_within(query, f64::INFINITY)
            .expect("index is nonempty and the search is unbounded")
    }

    /// Nearest neighbor within `max_distance` (inclusive), or `None` when no
    /// indexed point is that close. The search cutoff only prunes work; the
    /// returned hit is still the exact argmin under the same tie rule.
    pub fn query_nearest_within(
        &self,
        query: [f32; 3],
        max_distance: f64,
    ) -> Option<NeighborHit> {
        let bound = if max_distance.is_finite() {
            max_distance * max_distance
        } else {
            f64::INFINITY
        };
        let (best_d2, best_idx) = match &self.structure {
            Structure::KdTree { nodes, root } => {
                let mut best = (bound, usize::MAX);
                search_kd(&self.coords, nodes, *root, query, &mut best);
                best
            }
            Structure::Grid(grid) => grid.nearest(&self.coords, query, bound),
        };
        (best_idx != usize::MAX).then(|| NeighborHit {
            target_index: best_idx,
            distance: best_d2.sqrt(),
        })
    }
}

fn build_kd(coords: &[[f32; 3]], order: &mut [u32], nodes: &mut Vec<KdNode>, depth: u32) -> i32 {
    if order.is_empty() {
        return -1;
    }
    let axis = (depth % 3) as usize;
    let mid = order.len() / 2;
    // deterministic partition: compare coordinate, break ties by index
    order.select_nth_unstable_by(mid, |&a, &b| {
        let ca = coords[a as usize][axis];
        let cb = coords[b as usize][axis];
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let point = order[mid];
    let id = nodes.len() as i32;
    nodes.push(KdNode {
        point,
        axis: axis as u8,
        left: -1,
        right: -1,
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_kd(coords, lo, nodes, depth + 1);
    let right = build_kd(coords, &mut hi[1..], nodes, depth + 1);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    id
}

fn search_kd(
    coords: &[[f32; 3]],
    nodes: &[KdNode],
    node: i32,
    query: [f32; 3],
    best: &mut (f64, usize),
) {
    if node < 0 {
        return;
    }
    let n = &nodes[node as usize];
    let idx = n.point as usize;
    let d2 = dist_sq(query, coords[idx]);
    if better(d2, idx, best.0, best.1) {
        *best = (d2, idx);
    }
    let axis = n.axis as usize;
    let delta = query[axis] as f64 - coords[idx][axis] as f64;
    let (near, far) = if delta < 0.0 {
        (n.left, n.right)
    } else {
        (n.right, n.left)
    };
    search_kd(coords, nodes, near, query, best);
    // visit the far side on exact ties too, so equal-distance candidates
    // with lower indices are still found
    if delta * delta <= best.0 {
        search_kd(coords, nodes, far, query, best);
    }
}

#[derive(Debug, Clone)]
struct Grid {
    cells: HashMap<[i32; 3], Vec<u32>>,
    cell: f64,
    min_cell: [i32; 3],
    max_cell: [i32; 3],
}

impl Grid {
    fn build(coords: &[[f32; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i32; 3], Vec<u32>> = HashMap::new();
        let mut min_cell = [i32::MAX; 3];
        let mut max_cell = [i32::MIN; 3];
        for (i, c) in coords.iter().enumerate() {
            let key = Self::key_of(*c, cell);
            for k in 0..3 {
                min_cell[k] = min_cell[k].min(key[k]);
                max_cell[k] = max_cell[k].max(key[k]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        Grid {
            cells,
            cell,
            min_cell,
            max_cell,
        }
    }

    fn key_of(c: [f32; 3], cell: f64) -> [i32; 3] {
        [
            (c[0] as f64 / cell).floor() as i32,
            (c[1] as f64 / cell).floor() as i32,
            (c[2] as f64 / cell).floor() as i32,
        ]
    }

    fn nearest(&self, coords: &[[f32; 3]], query: [f32; 3], bound: f64) -> (f64, usize) {
        let center = Self::key_of(query, self.cell);
        let mut best = (bound, usize::MAX);
        // farthest ring that can exist given the occupied bounding box
        let mut max_ring = 0i64;
        for k in 0..3 {
            max_ring = max_ring
                .max((center[k] as i64 - self.min_cell[k] as i64).abs())
                .max((self.max_cell[k] as i64 - center[k] as i64).abs());
        }
        for ring in 0..=max_ring {
            // cells in ring r are at least (r-1) cell widths away; that also
            // terminates bounded searches that found nothing
            let lower = (ring - 1).max(0) as f64 * self.cell;
            if lower * lower > best.0 {
                break;
            }
            self.scan_ring(coords, query, center, ring as i32, &mut best);
        }
        best
    }

    fn scan_ring(
        &self,
        coords: &[[f32; 3]],
        query: [f32; 3],
        center: [i32; 3],
        ring: i32,
        best: &mut (f64, usize),
    ) {
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                for dz in -ring..=ring {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                        continue;
                    }
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    let Some(points) = self.cells.get(&key) else {
                        continue;
                    };
                    if self.cell_lower_bound(query, key) > best.0 {
                        continue;
                    }
                    for &i in points {
                        let idx = i as usize;
                        let d2 = dist_sq(query, coords[idx]);
                        if better(d2, idx, best.0, best.1) {
                            *best = (d2, idx);
                        }
                    }
                }
            }
        }
    }

    /// Squared distance from the query to the cell's axis-aligned box.
    fn cell_lower_bound(&self, query: [f32; 3], key: [i32; 3]) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let lo = key[k] as f64 * self.cell;
            let hi = lo + self.cell;
            let v = query[k] as f64;
            let d = if v < lo {
                lo - v
            } else if v > hi {
                v - hi
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }
}

/// Literal linear-scan argmin; the oracle the accelerated index is checked
/// against.
pub fn brute_force_nearest(target: &Frame, query: [f32; 3]) -> Result<NeighborHit> {
    Ok(brute_force_nearest_within(target, query, f64::INFINITY)?
        .expect("target is nonempty and the search is unbounded"))
}

/// Linear-scan twin of [`SpatialIndex::query_nearest_within`].
pub fn brute_force_nearest_within(
    target: &Frame,
    query: [f32; 3],
    max_distance: f64,
) -> Result<Option<NeighborHit>> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let bound = if max_distance.is_finite() {
        max_distance * max_distance
    } else {
        f64::INFINITY
    };
    let mut best = (bound, usize::MAX);
    for (i, p) in target.points.iter().enumerate() {
        let d2 = dist_sq(query, p.coords());
        if better(d2, i, best.0, best.1) {
            best = (d2, i);
        }
    }
    Ok((best.1 != usize::MAX).then(|| NeighborHit {
        target_index: best.1,
        distance: best.0.sqrt(),
    }))
}

/// Configuration for the search benchmark sweep.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub target_sizes: Vec<usize>,
    pub queries: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub target_n: usize,
    pub queries: usize,
    pub build_ms: f64,
    pub query_us_mean: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "target_n={}", e.target_n);
            let _ = writeln!(out, "queries={}", e.queries);
            let _ = writeln!(out, "build_ms={:.6}", e.build_ms);
            let _ = writeln!(out, "query_us_mean={:.6}", e.query_us_mean);
            let _ = writeln!(out, "total_ms={:.6}", e.total_ms);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<BenchEntry> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                path: "bench report".into(),
                line: lineno + 1,
                detail: "expected key=value".into(),
            })?;
            let bad = |detail: String| Error::MalformedLine {
                path: "bench report".into(),
                line: lineno + 1,
                detail,
            };
            if key == "target_n" {
                entries.push(BenchEntry {
                    target_n: value.parse().map_err(|_| bad(format!("bad int {value}")))?,
                    queries: 0,
                    build_ms: 0.0,
                    query_us_mean: 0.0,
                    total_ms: 0.0,
                });
                continue;
            }
            let entry = entries
                .last_mut()
                .ok_or_else(|| bad("field before first target_n".into()))?;
            let num = || value.parse::<f64>().map_err(|_| bad(format!("bad float {value}")));
            match key {
                "queries" => entry.queries = value.parse().map_err(|_| bad(format!("bad int {value}")))?,
                "build_ms" => entry.build_ms = num()?,
                "query_us_mean" => entry.query_us_mean = num()?,
                "total_ms" => entry.total_ms = num()?,
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        Ok(BenchReport { entries })
    }
}

/// Times KD-tree build and query on uniform-random clouds of the configured
/// sizes. Informational only; there is no pass/fail threshold.
pub fn bench_search(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.target_sizes.is_empty() || cfg.target_sizes.contains(&0) {
        return Err(Error::InvalidConfig {
            detail: "target sizes must be nonempty and positive".into(),
        });
    }
    if cfg.queries == 0 {
        return Err(Error::InvalidConfig {
            detail: "query count must be positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for &n in &cfg.target_sizes {
        let frame = random_cloud(&mut rng, n);
        let queries: Vec<[f32; 3]> = (0..cfg.queries)
            .map(|_| {
                [
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-10.0..10.0),
                ]
            })
            .collect();
        let t0 = Instant::now();
        let index = SpatialIndex::build(&frame)?;
        let build_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let mut sink = 0usize;
        for q in &queries {
            sink = sink.wrapping_add(index.query_nearest(*q).target_index);
        }
        let query_s = t1.elapsed().as_secs_f64();
        std::hint::black_box(sink);
        entries.push(BenchEntry {
            target_n: n,
            queries: cfg.queries,
            build_ms,
            query_us_mean: query_s * 1e6 / cfg.queries as f64,
            total_ms: build_ms + query_s * 1e3,
        });
    }
    Ok(BenchReport { entries })
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Frame {
    use crate::frame_io::Point;
    let points = (0..n)
        .map(|_| Point {
            x: rng.gen_range(-100.0..100.0),
            y: rng.gen_range(-100.0..100.0),
            z: rng.gen_range(-10.0..10.0),
            r: 0.0,
        })
        .collect();
    Frame {
        points,
        frame_id: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_io::Point;

    fn frame_of(coords: &[[f32; 3]]) -> Frame {
        Frame {
            points: coords
                .iter()
                .map(|c| Point {
                    x: c[0],
                    y: c[1],
                    z: c[2],
                    r: 0.0,
                })
                .collect(),
            frame_id: 0,
        }
    }

    #[test]
    fn empty_target_rejected() {
        let empty = Frame {
            points: vec![],
            frame_id: 0,
        };
        assert!(matches!(
            SpatialIndex::build(&empty),
            Err(Error::EmptyTarget)
        ));
        assert!(matches!(
            brute_force_nearest(&empty, [0.0; 3]),
            Err(Error::EmptyTarget)
        ));
    }

    #[test]
    fn single_point_always_returned() {
        let frame = frame_of(&[[1.0, 2.0, 3.0]]);
        let index = SpatialIndex::build(&frame).unwrap();
        for q in [[0.0, 0.0, 0.0], [5.0, 5.0, 5.0], [1.0, 2.0, 3.0]] {
            let hit = index.query_nearest(q);
            assert_eq!(hit.target_index, 0);
            assert_eq!(hit, brute_force_nearest(&frame, q).unwrap());
        }
    }

    #[test]
    fn self_query_returns_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let frame = random_cloud(&mut rng, 500);
        let index = SpatialIndex::build(&frame).unwrap();
        for (i, p) in frame.points.iter().enumerate() {
            let hit = index.query_nearest(p.coords());
            assert_eq!(hit.distance, 0.0);
            // with unique coordinates the point finds itself
            assert_eq!(hit.target_index, i);
        }
    }

    #[test]
    fn forced_ordering_example() {
        let frame = frame_of(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let index = SpatialIndex::build(&frame).unwrap();
        let hit = index.query_nearest([0.0, 0.0, 0.0]);
        assert_eq!(hit.target_index, 0);
        assert!((hit.distance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_coordinates_tie_to_lowest_index() {
        // duplicates scattered between other points
        let frame = frame_of(&[
            [5.0, 5.0, 5.0],
            [1.0, 1.0, 1.0],
            [9.0, 0.0, 0.0],
            [1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0],
        ]);
        let kd = SpatialIndex::build(&frame).unwrap();
        let grid = SpatialIndex::build_grid(&frame, 2.0).unwrap();
        let q = [1.2, 1.0, 1.0];
        for index in [&kd, &grid] {
            let hit = index.query_nearest(q);
            assert_eq!(hit.target_index, 1);
            assert_eq!(hit, brute_force_nearest(&frame, q).unwrap());
        }
        // symmetric pair equidistant from the query
        let frame = frame_of(&[[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]);
        let index = SpatialIndex::build(&frame).unwrap();
        assert_eq!(index.query_nearest([0.0, 0.0, 0.0]).target_index, 0);
    }

    #[test]
    fn oracle_equivalence_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let frame = random_cloud(&mut rng, 1000);
            let kd = SpatialIndex::build(&frame).unwrap();
            let grid = SpatialIndex::build_grid(&frame, 7.5).unwrap();
            for _ in 0..200 {
                let q = [
                    rng.gen_range(-110.0..110.0),
                    rng.gen_range(-110.0..110.0),
                    rng.gen_range(-12.0..12.0),
                ];
                let expect = brute_force_nearest(&frame, q).unwrap();
                assert_eq!(kd.query_nearest(q), expect);
                assert_eq!(grid.query_nearest(q), expect);
            }
        }
    }

    #[test]
    fn distance_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let frame = random_cloud(&mut rng, 800);
        let index = SpatialIndex::build(&frame).unwrap();
        for _ in 0..100 {
            let q = [
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-10.0..10.0),
            ];
            let hit = index.query_nearest(q);
            let p = frame.points[hit.target_index].coords();
            let d = dist_sq(q, p).sqrt();
            assert!((hit.distance - d).abs() < 1e-6);
            assert!(hit.distance >= 0.0);
        }
    }

    #[test]
    fn concurrent_queries_match_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let frame = random_cloud(&mut rng, 2000);
        let index = SpatialIndex::build(&frame).unwrap();
        let queries: Vec<[f32; 3]> = (0..400)
            .map(|_| {
                [
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-100.0..100.0),
                    rng.gen_range(-10.0..10.0),
                ]
            })
            .collect();
        let serial: Vec<NeighborHit> = queries.iter().map(|q| index.query_nearest(*q)).collect();
        let chunk = queries.len() / 4;
        std::thread::scope(|scope| {
            let handles: Vec<_> = queries
                .chunks(chunk)
                .map(|qs| {
                    let index = &index;
                    scope.spawn(move || qs.iter().map(|q| index.query_nearest(*q)).collect::<Vec<_>>())
                })
                .collect();
            let parallel: Vec<NeighborHit> = handles
                .into_iter()
                .flat_map(|h| h.join().unwrap())
                .collect();
            assert_eq!(serial, parallel);
        });
    }

    #[test]
    fn radius_cutoff_agrees_with_bounded_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let frame = random_cloud(&mut rng, 600);
        let kd = SpatialIndex::build(&frame).unwrap();
        let grid = SpatialIndex::build_grid(&frame, 9.0).unwrap();
        let mut some = 0;
        let mut none = 0;
        for _ in 0..300 {
            let q = [
                rng.gen_range(-120.0..120.0),
                rng.gen_range(-120.0..120.0),
                rng.gen_range(-15.0..15.0),
            ];
            let radius = rng.gen_range(0.5..15.0);
            let expect = brute_force_nearest_within(&frame, q, radius).unwrap();
            assert_eq!(kd.query_nearest_within(q, radius), expect);
            assert_eq!(grid.query_nearest_within(q, radius), expect);
            match expect {
                Some(hit) => {
                    assert!(hit.distance <= radius);
                    some += 1;
                }
                None => none += 1,
            }
        }
        // the sweep exercises both outcomes
        assert!(some > 0 && none > 0, "some={some} none={none}");
        // the cutoff is inclusive
        let one = frame_of(&[[3.0, 0.0, 0.0]]);
        let idx = SpatialIndex::build(&one).unwrap();
        assert!(idx.query_nearest_within([0.0; 3], 3.0).is_some());
        assert!(idx.query_nearest_within([0.0; 3], 2.999).is_none());
    }

    #[test]
    fn bench_rejects_zero_sizes() {
        let cfg = BenchConfig {
            target_sizes: vec![0],
            queries: 10,
            seed: 1,
        };
        assert!(matches!(bench_search(&cfg), Err(Error::InvalidConfig { .. })));
        let cfg = BenchConfig {
            target_sizes: vec![100],
            queries: 0,
            seed: 1,
        };
        assert!(matches!(bench_search(&cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn bench_report_structure_and_roundtrip() {
        let cfg = BenchConfig {
            target_sizes: vec![1000, 10_000, 100_000],
            queries: 200,
            seed: 9,
        };
        let report = bench_search(&cfg).unwrap();
        assert_eq!(report.entries.len(), 3);
        for (e, &n) in report.entries.iter().zip(&cfg.target_sizes) {
            assert_eq!(e.target_n, n);
            assert_eq!(e.queries, 200);
            assert!(e.build_ms >= 0.0 && e.query_us_mean >= 0.0);
        }
        // two orders of magnitude more work per step: total time grows
        assert!(report.entries[0].total_ms <= report.entries[1].total_ms);
        assert!(report.entries[1].total_ms <= report.entries[2].total_ms);
        let parsed = BenchReport::parse(&report.to_text()).unwrap();
        assert_eq!(parsed.entries.len(), report.entries.len());
        for (a, b) in parsed.entries.iter().zip(&report.entries) {
            assert_eq!(a.target_n, b.target_n);
            assert_eq!(a.queries, b.queries);
            assert!((a.build_ms - b.build_ms).abs() < 1e-3);
            assert!((a.query_us_mean - b.query_us_mean).abs() < 1e-3);
            assert!((a.total_ms - b.total_ms).abs() < 1e-3);
        }
    }
}
