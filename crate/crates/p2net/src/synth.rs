//! Synthetic registered LiDAR-like sequences: surface-sampled scenes with
//! ground truth labels, sensor motion, per-point occlusion flags from a
//! spherical depth buffer, and a corruptible score oracle standing in for a
//! pre-trained segmentation model.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_io::{apply_pose, Frame, LabelArray, Point, Pose, RemapTable};
use crate::fusion::ScoreMatrix;
use crate::knn::SpatialIndex;
use crate::seeds;

/// Class ids assigned to generated geometry; defaults follow the standard
/// learning-map ids (road, building, car, pole, person).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub ground: u16,
    pub building: u16,
    pub car: u16,
    pub pole: u16,
    pub person: u16,
}

impl Default for ClassMap {
    fn default() -> Self {
        ClassMap {
            ground: 9,
            building: 13,
            car: 1,
            pole: 18,
            person: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Side length of the square world, meters, centered on the origin.
    pub extent: f64,
    pub buildings: usize,
    pub cars: usize,
    pub poles: usize,
    pub pedestrians: usize,
    /// Car displacement per frame, meters.
    pub car_speed: f64,
    pub pedestrian_speed: f64,
    pub frames: usize,
    pub points_per_frame: usize,
    pub sensor_height: f64,
    /// Sensor displacement per frame along +x, meters.
    pub sensor_speed: f64,
    pub sensor_yaw_rate_deg: f64,
    pub azimuth_res_deg: f64,
    pub elevation_res_deg: f64,
    pub num_classes: u16,
    pub classes: ClassMap,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: 50.0,
            buildings: 4,
            cars: 3,
            poles: 6,
            pedestrians: 0,
            car_speed: 0.8,
            pedestrian_speed: 0.15,
            frames: 30,
            points_per_frame: 20_000,
            sensor_height: 1.8,
            sensor_speed: 0.7,
            sensor_yaw_rate_deg: 0.6,
            azimuth_res_deg: 0.15,
            elevation_res_deg: 0.25,
            num_classes: 20,
            classes: ClassMap::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::InvalidConfig { detail });
        if !self.extent.is_finite() || self.extent <= 0.0 {
            return fail(format!("world extent {} must be positive", self.extent));
        }
        if self.frames < 3 {
            return fail(format!("frame count {} must be at least 3", self.frames));
        }
        if self.points_per_frame < 100 {
            return fail(format!(
                "points per frame {} must be at least 100",
                self.points_per_frame
            ));
        }
        if self.azimuth_res_deg <= 0.0 || self.elevation_res_deg <= 0.0 {
            return fail("depth-buffer resolution must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("class count {} must be at least 2", self.num_classes));
        }
        let c = &self.classes;
        for id in [c.ground, c.building, c.car, c.pole, c.person] {
            if id >= self.num_classes {
                return fail(format!("class id {id} outside [0, {})", self.num_classes));
            }
        }
        Ok(())
    }

    fn sensor_pose(&self, t: usize) -> Pose {
        let yaw = (self.sensor_yaw_rate_deg * t as f64).to_radians();
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [
                -self.extent * 0.25 + self.sensor_speed * t as f64,
                0.0,
                self.sensor_height,
            ],
        }
    }
}

/// Score-oracle corruption model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Base confusion: 1-epsilon lands on the winning class, the rest is
    /// spread uniformly over the others.
    pub epsilon: f64,
    /// Probability that an occluded point's mass moves to its confusable
    /// class.
    pub p_occ: f64,
    /// Source class -> class it gets confused with when occluded.
    pub confusable: BTreeMap<u16, u16>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let classes = ClassMap::default();
        NoiseConfig {
            epsilon: 0.05,
            p_occ: 0.6,
            confusable: BTreeMap::from([
                (classes.car, classes.ground), // car mistaken for road
                (classes.ground, 10),          // road mistaken for parking
                (classes.building, 15),        // building mistaken for vegetation
                (classes.pole, 16),            // pole mistaken for trunk
                (classes.person, 7),           // person mistaken for bicyclist
            ]),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self, q: u16) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig {
                detail: format!("epsilon {} must be in [0, 1)", self.epsilon),
            });
        }
        if !(0.0..=1.0).contains(&self.p_occ) {
            return Err(Error::InvalidConfig {
                detail: format!("p_occ {} must be in [0, 1]", self.p_occ),
            });
        }
        for (&from, &to) in &self.confusable {
            if to >= q || from >= q {
                return Err(Error::InvalidConfig {
                    detail: format!("confusable pair {from}->{to} outside [0, {q})"),
                });
            }
            if from == to {
                return Err(Error::InvalidConfig {
                    detail: format!("class {from} mapped to itself"),
                });
            }
        }
        Ok(())
    }
}

/// One generated frame: sensor-local points plus everything needed to score
/// and evaluate them.
#[derive(Debug, Clone)]
pub struct GenFrame {
    pub frame: Frame,
    pub pose: Pose,
    pub labels: LabelArray,
    pub occluded: Vec<bool>,
    pub object_ids: Vec<u32>,
}

#[derive(Debug, Clone)]
enum SurfaceKind {
    /// Parallelogram patch spanned by two orthogonal edges.
    Rect {
        origin: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
    },
    /// Open lateral surface of a vertical cylinder.
    Cylinder {
        base: [f64; 3],
        radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone)]
struct Surface {
    kind: SurfaceKind,
    velocity: [f64; 3],
    class: u16,
    intensity: f64,
    object_id: u32,
    area: f64,
}

impl Surface {
    fn sample(&self, t: usize, rng: &mut impl Rng) -> [f64; 3] {
        let shift = |p: [f64; 3]| {
            [
                p[0] + self.velocity[0] * t as f64,
                p[1] + self.velocity[1] * t as f64,
                p[2] + self.velocity[2] * t as f64,
            ]
        };
        match &self.kind {
            SurfaceKind::Rect { origin, u, v } => {
                let a = rng.gen_range(0.0..1.0);
                let b = rng.gen_range(0.0..1.0);
                shift([
                    origin[0] + a * u[0] + b * v[0],
                    origin[1] + a * u[1] + b * v[1],
                    origin[2] + a * u[2] + b * v[2],
                ])
            }
            SurfaceKind::Cylinder {
                base,
                radius,
                height,
            } => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let h = rng.gen_range(0.0..*height);
                shift([
                    base[0] + radius * theta.cos(),
                    base[1] + radius * theta.sin(),
                    base[2] + h,
                ])
            }
        }
    }

}

#[cfg(test)]
impl Surface {
    /// Distance from a world point to this surface as placed at frame `t`.
    fn distance(&self, p: [f64; 3], t: usize) -> f64 {
        let p = [
            p[0] - self.velocity[0] * t as f64,
            p[1] - self.velocity[1] * t as f64,
            p[2] - self.velocity[2] * t as f64,
        ];
        match &self.kind {
            SurfaceKind::Rect { origin, u, v } => {
                let d = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
                let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                let a = (dot(&d, u) / dot(u, u)).clamp(0.0, 1.0);
                let b = (dot(&d, v) / dot(v, v)).clamp(0.0, 1.0);
                let q = [
                    origin[0] + a * u[0] + b * v[0],
                    origin[1] + a * u[1] + b * v[1],
                    origin[2] + a * u[2] + b * v[2],
                ];
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            }
            SurfaceKind::Cylinder {
                base,
                radius,
                height,
            } => {
                let radial = ((p[0] - base[0]).powi(2) + (p[1] - base[1]).powi(2)).sqrt() - radius;
                let dz = if p[2] < base[2] {
                    base[2] - p[2]
                } else if p[2] > base[2] + height {
                    p[2] - base[2] - height
                } else {
                    0.0
                };
                (radial * radial + dz * dz).sqrt()
            }
        }
    }
}

fn rect(origin: [f64; 3], u: [f64; 3], v: [f64; 3]) -> (SurfaceKind, f64) {
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let area = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    (SurfaceKind::Rect { origin, u, v }, area)
}

/// Four walls plus roof of an axis-aligned box.
#[allow(clippy::too_many_arguments)]
fn box_surfaces(
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    z0: f64,
    z1: f64,
    velocity: [f64; 3],
    class: u16,
    intensity: f64,
    object_id: u32,
    out: &mut Vec<Surface>,
) {
    let (w, d, h) = (x1 - x0, y1 - y0, z1 - z0);
    let faces = [
        rect([x0, y0, z0], [w, 0.0, 0.0], [0.0, 0.0, h]),
        rect([x0, y1, z0], [w, 0.0, 0.0], [0.0, 0.0, h]),
        rect([x0, y0, z0], [0.0, d, 0.0], [0.0, 0.0, h]),
        rect([x1, y0, z0], [0.0, d, 0.0], [0.0, 0.0, h]),
        rect([x0, y0, z1], [w, 0.0, 0.0], [0.0, d, 0.0]),
    ];
    for (kind, area) in faces {
        out.push(Surface {
            kind,
            velocity,
            class,
            intensity,
            object_id,
            area,
        });
    }
}

fn build_scene(cfg: &SceneConfig) -> Vec<Surface> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[seeds::stream::GEOMETRY, cfg.seed]));
    let mut surfaces = Vec::new();
    let half = cfg.extent / 2.0;
    let mut next_id = 0u32;

    // ground plane
    let (kind, area) = rect(
        [-half, -half, 0.0],
        [cfg.extent, 0.0, 0.0],
        [0.0, cfg.extent, 0.0],
    );
    surfaces.push(Surface {
        kind,
        velocity: [0.0; 3],
        class: cfg.classes.ground,
        intensity: 0.20,
        object_id: next_id,
        area,
    });
    next_id += 1;

    // static building blocks flanking the road strip
    for b in 0..cfg.buildings {
        let w = rng.gen_range(8.0..12.0);
        let d = rng.gen_range(6.0..10.0);
        let h = rng.gen_range(5.0..8.0);
        let sx = if b % 2 == 0 { 1.0 } else { -1.0 };
        let sy = if (b / 2) % 2 == 0 { 1.0 } else { -1.0 };
        let x_hi = (half - w / 2.0 - 1.0).max(5.0);
        let y_lo = 11.0 + d / 2.0;
        let y_hi = (half - d / 2.0 - 1.0).max(y_lo + 1.0);
        let cx = sx * rng.gen_range(4.0..x_hi);
        let cy = sy * rng.gen_range(y_lo..y_hi);
        box_surfaces(
            cx - w / 2.0,
            cx + w / 2.0,
            cy - d / 2.0,
            cy + d / 2.0,
            0.0,
            h,
            [0.0; 3],
            cfg.classes.building,
            0.40,
            next_id,
            &mut surfaces,
        );
        next_id += 1;
    }

    // cars drive along x in two lanes with opposing directions
    for c in 0..cfg.cars {
        let lane = if c % 2 == 0 { -4.5 } else { 4.5 };
        let dir = if c % 2 == 0 { 1.0 } else { -1.0 };
        let travel = cfg.car_speed * cfg.frames as f64;
        let span = (cfg.extent - travel - 8.0).max(1.0);
        let x0 = if dir > 0.0 {
            -half + 2.0 + rng.gen_range(0.0..span)
        } else {
            half - 6.0 - rng.gen_range(0.0..span)
        };
        let y = lane + rng.gen_range(-0.5..0.5);
        box_surfaces(
            x0,
            x0 + 4.2,
            y - 0.9,
            y + 0.9,
            0.3,
            1.8,
            [dir * cfg.car_speed, 0.0, 0.0],
            cfg.classes.car,
            0.55,
            next_id,
            &mut surfaces,
        );
        next_id += 1;
    }

    // poles flank the road
    for _ in 0..cfg.poles {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = rng.gen_range(-half + 3.0..half - 3.0);
        let y = side * rng.gen_range(2.5..9.0);
        let radius = rng.gen_range(0.2..0.3);
        let height = rng.gen_range(4.0..6.0);
        surfaces.push(Surface {
            kind: SurfaceKind::Cylinder {
                base: [x, y, 0.0],
                radius,
                height,
            },
            velocity: [0.0; 3],
            class: cfg.classes.pole,
            intensity: 0.45,
            object_id: next_id,
            area: std::f64::consts::TAU * radius * height,
        });
        next_id += 1;
    }

    // pedestrians drift slowly in the open strip
    for _ in 0..cfg.pedestrians {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = rng.gen_range(-half + 3.0..half - 3.0);
        let y = side * rng.gen_range(2.0..8.0);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        surfaces.push(Surface {
            kind: SurfaceKind::Cylinder {
                base: [x, y, 0.0],
                radius: 0.3,
                height: 1.7,
            },
            velocity: [
                heading.cos() * cfg.pedestrian_speed,
                heading.sin() * cfg.pedestrian_speed,
                0.0,
            ],
            class: cfg.classes.person,
            intensity: 0.35,
            object_id: next_id,
            area: std::f64::consts::TAU * 0.3 * 1.7,
        });
        next_id += 1;
    }

    surfaces
}

/// Flags a point occluded when another point of the same frame wins its
/// angular depth-buffer cell at strictly smaller range. Recomputable from
/// the emitted frame alone.
pub fn occlusion_flags(frame: &Frame, azimuth_res_deg: f64, elevation_res_deg: f64) -> Vec<bool> {
    let az_res = azimuth_res_deg.to_radians();
    let el_res = elevation_res_deg.to_radians();
    let cell_and_range = |p: &Point| {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let horiz = (x * x + y * y).sqrt();
        let range = (x * x + y * y + z * z).sqrt();
        let az = y.atan2(x);
        let el = z.atan2(horiz);
        (
            ((az / az_res).floor() as i32, (el / el_res).floor() as i32),
            range,
        )
    };
    let mut nearest: HashMap<(i32, i32), f64> = HashMap::new();
    for p in &frame.points {
        let (cell, range) = cell_and_range(p);
        nearest
            .entry(cell)
            .and_modify(|r| *r = r.min(range))
            .or_insert(range);
    }
    frame
        .points
        .iter()
        .map(|p| {
            let (cell, range) = cell_and_range(p);
            nearest[&cell] < range
        })
        .collect()
}

/// Generates the full sequence: per frame, sensor-local points with ground
/// truth labels, the pose that restores world coordinates, and occlusion
/// flags.
pub fn gen_sequence(cfg: &SceneConfig) -> Result<Vec<GenFrame>> {
    cfg.validate()?;
    let surfaces = build_scene(cfg);
    let total_area: f64 = surfaces.iter().map(|s| s.area).sum();
    if total_area <= 0.0 || !total_area.is_finite() {
        return Err(Error::InvalidConfig {
            detail: "scene has no samplable surface area".into(),
        });
    }
    let cumulative: Vec<f64> = surfaces
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.area;
            Some(*acc)
        })
        .collect();
    // raw label ids chosen so the default remap table reads them back
    let table = RemapTable::semantic_kitti();
    let raw_of = |class: u16| table.raw_for(class).unwrap_or(class as u32);

    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::mix(&[seeds::stream::SAMPLE, cfg.seed, t as u64]));
        let pose = cfg.sensor_pose(t);
        let inverse = pose.inverse();
        let mut points = Vec::with_capacity(cfg.points_per_frame);
        let mut labels = Vec::with_capacity(cfg.points_per_frame);
        let mut raw_labels = Vec::with_capacity(cfg.points_per_frame);
        let mut object_ids = Vec::with_capacity(cfg.points_per_frame);
        for _ in 0..cfg.points_per_frame {
            let draw = rng.gen_range(0.0..total_area);
            let si = cumulative
                .partition_point(|&c| c <= draw)
                .min(surfaces.len() - 1);
            let surface = &surfaces[si];
            let world = surface.sample(t, &mut rng);
            let local = inverse.transform(world);
            let intensity = (surface.intensity + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0) as f32;
            points.push(Point {
                x: local[0] as f32,
                y: local[1] as f32,
                z: local[2] as f32,
                r: intensity,
            });
            labels.push(surface.class);
            raw_labels.push(raw_of(surface.class));
            object_ids.push(surface.object_id);
        }
        let frame = Frame {
            points,
            frame_id: t as u64,
        };
        let occluded = occlusion_flags(&frame, cfg.azimuth_res_deg, cfg.elevation_res_deg);
        frames.push(GenFrame {
            frame,
            pose,
            labels: LabelArray { labels, raw_labels },
            occluded,
            object_ids,
        });
    }
    Ok(frames)
}

/// Near-correct probability rows, corrupted on occluded points: the winning
/// mass moves to the configured confusable class with probability `p_occ`.
pub fn oracle_scores(
    frame: &Frame,
    labels: &LabelArray,
    occluded: &[bool],
    noise: &NoiseConfig,
    q: u16,
) -> Result<ScoreMatrix> {
    noise.validate(q)?;
    let n = frame.len();
    if labels.len() != n || occluded.len() != n {
        return Err(Error::ShapeError {
            detail: format!(
                "frame has {n} points, {} labels, {} occlusion flags",
                labels.len(),
                occluded.len()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(&[
        seeds::stream::NOISE,
        noise.seed,
        frame.frame_id,
    ]));
    let spread = noise.epsilon / (q as f64 - 1.0);
    let mut data = Vec::with_capacity(n * q as usize);
    for i in 0..n {
        let label = labels.labels[i];
        if label >= q {
            return Err(Error::ShapeError {
                detail: format!("label {label} outside [0, {q})"),
            });
        }
        let mut winner = label;
        if occluded[i] && rng.gen_range(0.0..1.0) < noise.p_occ {
            if let Some(&to) = noise.confusable.get(&label) {
                winner = to;
            }
        }
        let mut row = vec![spread; q as usize];
        row[winner as usize] = 1.0 - noise.epsilon;
        let sum: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| (v / sum) as f32));
    }
    ScoreMatrix::new(n, q, data)
}

/// Measured refinability of a generated sequence: how often an occluded
/// point's world-space nearest neighbor in frame t-1 or t-2 is itself
/// non-occluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinabilityStats {
    pub total_points: usize,
    pub occluded_points: usize,
    pub occluded_fraction: f64,
    pub checked_points: usize,
    pub refinable_fraction: f64,
}

pub fn refinability(frames: &[GenFrame]) -> Result<RefinabilityStats> {
    if frames.len() < 3 {
        return Err(Error::InvalidConfig {
            detail: "refinability needs at least 3 frames".into(),
        });
    }
    let world: Vec<Frame> = frames
        .iter()
        .map(|g| apply_pose(&g.frame, &g.pose))
        .collect::<Result<_>>()?;
    let total_points: usize = frames.iter().map(|g| g.frame.len()).sum();
    let occluded_points: usize = frames
        .iter()
        .map(|g| g.occluded.iter().filter(|&&o| o).count())
        .sum();
    let mut checked = 0usize;
    let mut refinable = 0usize;
    for t in 2..frames.len() {
        let idx1 = SpatialIndex::build(&world[t - 1])?;
        let idx2 = SpatialIndex::build(&world[t - 2])?;
        for (i, &occ) in frames[t].occluded.iter().enumerate() {
            if !occ {
                continue;
            }
            let p = world[t].points[i].coords();
            let n1 = idx1.query_nearest(p).target_index;
            let n2 = idx2.query_nearest(p).target_index;
            checked += 1;
            if !frames[t - 1].occluded[n1] || !frames[t - 2].occluded[n2] {
                refinable += 1;
            }
        }
    }
    Ok(RefinabilityStats {
        total_points,
        occluded_points,
        occluded_fraction: occluded_points as f64 / total_points as f64,
        checked_points: checked,
        refinable_fraction: if checked == 0 {
            1.0
        } else {
            refinable as f64 / checked as f64
        },
    })
}

/// Everything needed to regenerate and audit a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub stats: RefinabilityStats,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let cfg = SceneConfig::default();
        assert!(cfg.validate().is_ok());
        let zero_extent = SceneConfig {
            extent: 0.0,
            ..SceneConfig::default()
        };
        assert!(matches!(
            zero_extent.validate(),
            Err(Error::InvalidConfig { .. })
        ));
        let too_few_points = SceneConfig {
            points_per_frame: 50,
            ..SceneConfig::default()
        };
        assert!(matches!(
            too_few_points.validate(),
            Err(Error::InvalidConfig { .. })
        ));
        let too_few_frames = SceneConfig {
            frames: 2,
            ..SceneConfig::default()
        };
        assert!(matches!(
            too_few_frames.validate(),
            Err(Error::InvalidConfig { .. })
        ));
        let mut bad_class = SceneConfig::default();
        bad_class.classes.pole = 25;
        assert!(matches!(
            bad_class.validate(),
            Err(Error::InvalidConfig { .. })
        ));
        assert!(matches!(
            gen_sequence(&zero_extent),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn noise_validation() {
        let q = 20;
        assert!(NoiseConfig::default().validate(q).is_ok());
        let bad_eps = NoiseConfig {
            epsilon: 1.0,
            ..NoiseConfig::default()
        };
        assert!(matches!(bad_eps.validate(q), Err(Error::InvalidConfig { .. })));
        let self_map = NoiseConfig {
            confusable: BTreeMap::from([(3u16, 3u16)]),
            ..NoiseConfig::default()
        };
        assert!(matches!(self_map.validate(q), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn static_plane_static_sensor_has_no_occlusion() {
        let cfg = SceneConfig {
            buildings: 0,
            cars: 0,
            poles: 0,
            pedestrians: 0,
            sensor_speed: 0.0,
            sensor_yaw_rate_deg: 0.0,
            frames: 3,
            points_per_frame: 500,
            // a fine buffer so sparse plane samples cannot share cells
            azimuth_res_deg: 0.02,
            elevation_res_deg: 0.02,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        for g in &frames {
            let occluded = g.occluded.iter().filter(|&&o| o).count();
            assert_eq!(occluded, 0, "bare plane has nothing to occlude");
        }
    }

    #[test]
    fn occlusion_flags_are_recomputable() {
        let cfg = SceneConfig {
            frames: 4,
            points_per_frame: 4000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        for g in &frames {
            // independent two-pass recomputation over the emitted frame
            let az = cfg.azimuth_res_deg.to_radians();
            let el = cfg.elevation_res_deg.to_radians();
            let keyed: Vec<((i64, i64), f64)> = g
                .frame
                .points
                .iter()
                .map(|p| {
                    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
                    let range = (x * x + y * y + z * z).sqrt();
                    let cell = (
                        (y.atan2(x) / az).floor() as i64,
                        (z.atan2((x * x + y * y).sqrt()) / el).floor() as i64,
                    );
                    (cell, range)
                })
                .collect();
            let mut min_range: BTreeMap<(i64, i64), f64> = BTreeMap::new();
            for (cell, range) in &keyed {
                let e = min_range.entry(*cell).or_insert(f64::INFINITY);
                *e = e.min(*range);
            }
            let expect: Vec<bool> = keyed
                .iter()
                .map(|(cell, range)| min_range[cell] < *range)
                .collect();
            assert_eq!(g.occluded, expect);
        }
    }

    #[test]
    fn geometry_shadows_non_car_points() {
        let cfg = SceneConfig {
            frames: 3,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let g = &frames[0];
        let shadowed_static = g
            .occluded
            .iter()
            .zip(&g.labels.labels)
            .filter(|&(&o, &l)| o && l == cfg.classes.ground)
            .count();
        assert!(
            shadowed_static > 0,
            "expected some ground points behind geometry to be flagged"
        );
    }

    #[test]
    fn world_consistency_against_generating_surfaces() {
        let cfg = SceneConfig {
            frames: 5,
            points_per_frame: 2000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let surfaces = build_scene(&cfg);
        let mut by_object: HashMap<u32, Vec<&Surface>> = HashMap::new();
        for s in &surfaces {
            by_object.entry(s.object_id).or_default().push(s);
        }
        for (t, g) in frames.iter().enumerate() {
            let world = apply_pose(&g.frame, &g.pose).unwrap();
            for (i, p) in world.points.iter().enumerate() {
                let candidates = &by_object[&g.object_ids[i]];
                let dist = candidates
                    .iter()
                    .map(|s| s.distance([p.x as f64, p.y as f64, p.z as f64], t))
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    dist < 1e-4,
                    "frame {t} point {i}: {dist:.2e} m off its surface"
                );
            }
        }
    }

    #[test]
    fn oracle_scores_clean_and_corrupted() {
        let cfg = SceneConfig {
            frames: 3,
            points_per_frame: 1000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let g = &frames[0];
        // epsilon 0, p_occ 0: exact one-hot on the truth
        let clean = NoiseConfig {
            epsilon: 0.0,
            p_occ: 0.0,
            ..NoiseConfig::default()
        };
        let scores = oracle_scores(&g.frame, &g.labels, &g.occluded, &clean, 20).unwrap();
        for i in 0..g.frame.len() {
            let row = scores.row(i);
            assert_eq!(row[g.labels.labels[i] as usize], 1.0);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
        }
        // epsilon 0, p_occ 1: occluded mapped points land one-hot on the
        // confusable class
        let hard = NoiseConfig {
            epsilon: 0.0,
            p_occ: 1.0,
            ..NoiseConfig::default()
        };
        let scores = oracle_scores(&g.frame, &g.labels, &g.occluded, &hard, 20).unwrap();
        let labels = scores.argmax_labels();
        for i in 0..g.frame.len() {
            let truth = g.labels.labels[i];
            let expect = if g.occluded[i] {
                *hard.confusable.get(&truth).unwrap_or(&truth)
            } else {
                truth
            };
            assert_eq!(labels[i], expect);
        }
    }

    #[test]
    fn oracle_rows_are_valid_distributions() {
        let cfg = SceneConfig {
            frames: 3,
            points_per_frame: 500,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let g = &frames[1];
        let noise = NoiseConfig::default();
        let scores = oracle_scores(&g.frame, &g.labels, &g.occluded, &noise, 20).unwrap();
        for i in 0..g.frame.len() {
            let sum: f64 = scores.row(i).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(scores.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn oracle_accuracy_tracks_occlusion_rate() {
        let cfg = SceneConfig {
            frames: 3,
            points_per_frame: 8000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let g = &frames[0];
        let occ_frac = g.occluded.iter().filter(|&&o| o).count() as f64 / g.frame.len() as f64;
        let p_occ = 0.6;
        let mut accs = Vec::new();
        for seed in 0..10u64 {
            let noise = NoiseConfig {
                epsilon: 0.05,
                p_occ,
                seed,
                ..NoiseConfig::default()
            };
            let scores = oracle_scores(&g.frame, &g.labels, &g.occluded, &noise, 20).unwrap();
            let pred = scores.argmax_labels();
            let correct = pred
                .iter()
                .zip(&g.labels.labels)
                .filter(|(p, g)| p == g)
                .count();
            accs.push(correct as f64 / g.frame.len() as f64);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let expect = 1.0 - p_occ * occ_frac;
        assert!(
            (mean - expect).abs() < 0.02,
            "mean accuracy {mean:.4} vs expected {expect:.4}"
        );
    }

    #[test]
    fn default_scene_is_refinable() {
        let cfg = SceneConfig {
            frames: 8,
            points_per_frame: 8000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let stats = refinability(&frames).unwrap();
        assert!(
            stats.occluded_fraction > 0.03,
            "occlusion too rare: {stats:?}"
        );
        assert!(
            stats.refinable_fraction > 0.8,
            "refinability too low: {stats:?}"
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            frames: 3,
            points_per_frame: 500,
            ..SceneConfig::default()
        };
        let a = gen_sequence(&cfg).unwrap();
        let b = gen_sequence(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.occluded, y.occluded);
            assert_eq!(x.object_ids, y.object_ids);
        }
    }

    #[test]
    fn manifest_serializes() {
        let cfg = SceneConfig {
            frames: 4,
            points_per_frame: 1000,
            ..SceneConfig::default()
        };
        let frames = gen_sequence(&cfg).unwrap();
        let manifest = Manifest {
            scene: cfg,
            noise: NoiseConfig::default(),
            stats: refinability(&frames).unwrap(),
        };
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        let back: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest, back);
    }
}
