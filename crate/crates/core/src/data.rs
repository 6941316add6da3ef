//! Point-cloud containers, synthetic scene generation, dataset splitting, and
//! the `PCLS` binary file format.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SealedLabels;
use crate::rng::StreamRng;

pub type Label = u8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn planar_range(&self) -> f64 {
        (self.x as f64).hypot(self.y as f64)
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    /// Azimuth in [-pi, pi].
    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }

    /// Elevation angle in radians; zero for a point at the origin.
    pub fn elevation(&self) -> f64 {
        let r = self.range();
        if r == 0.0 {
            0.0
        } else {
            (self.z as f64 / r).clamp(-1.0, 1.0).asin()
        }
    }

    fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && (0.0..=1.0).contains(&self.intensity)
    }
}

/// Which pre-mix cloud a point came from. `A` is the first (labeled) input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    A = 0,
    B = 1,
}

impl Origin {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Origin::A),
            1 => Some(Origin::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<Label>>,
    origin: Option<Vec<Origin>>,
    num_classes: u16,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, num_classes: u16) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_valid()) {
            return Err(Error::InvalidArgument(format!(
                "point {i} has non-finite coordinates or intensity outside [0, 1]"
            )));
        }
        Ok(Self {
            points,
            labels: None,
            origin: None,
            num_classes,
        })
    }

    pub fn empty(num_classes: u16) -> Self {
        Self {
            points: Vec::new(),
            labels: None,
            origin: None,
            num_classes,
        }
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self> {
        Error::check_len("labels", self.points.len(), labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| u16::from(l) >= self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_origin(mut self, origin: Vec<Origin>) -> Result<Self> {
        Error::check_len("origin", self.points.len(), origin.len())?;
        self.origin = Some(origin);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn origin(&self) -> Option<&[Origin]> {
        self.origin.as_deref()
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    /// Removes and returns the labels.
    pub fn take_labels(&mut self) -> Option<Vec<Label>> {
        self.labels.take()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            points: self.points.clone(),
            labels: None,
            origin: self.origin.clone(),
            num_classes: self.num_classes,
        }
    }

    /// New cloud containing the points at `indices`, carrying labels and origin.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            origin: self
                .origin
                .as_ref()
                .map(|o| indices.iter().map(|&i| o[i]).collect()),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub names: Vec<String>,
    /// Nominal per-class fraction of generated points.
    pub weights: Vec<f64>,
}

pub const GROUND: Label = 0;
pub const VEHICLE: Label = 1;
pub const POLE: Label = 2;
pub const VEGETATION: Label = 3;

impl Default for ClassMap {
    fn default() -> Self {
        Self {
            names: ["ground", "vehicle", "pole", "vegetation"]
                .map(String::from)
                .to_vec(),
            weights: vec![0.6, 0.2, 0.05, 0.15],
        }
    }
}

impl ClassMap {
    /// The default taxonomy with the pole class made rare.
    pub fn long_tail() -> Self {
        Self {
            weights: vec![0.64, 0.2, 0.01, 0.15],
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() < 2 || self.names.len() > usize::from(u8::MAX) {
            return Err(Error::Config(format!(
                "class count must be in [2, 255], got {}",
                self.names.len()
            )));
        }
        Error::check_len("class weights", self.names.len(), self.weights.len())?;
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!(
                "class weights must be non-negative and sum to 1, got sum {sum}"
            )));
        }
        Ok(())
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Elevation rows of the simulated beam pattern.
    pub rows: u32,
    /// Azimuth columns of the simulated beam pattern.
    pub cols: u32,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub ground_radius: f64,
    pub sensor_height: (f64, f64),
    pub vehicles: u32,
    pub poles: u32,
    pub vegetation: u32,
    pub classes: ClassMap,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 64,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            ground_radius: 40.0,
            sensor_height: (1.6, 2.0),
            vehicles: 4,
            poles: 4,
            vegetation: 3,
            classes: ClassMap::default(),
        }
    }
}

impl SceneConfig {
    pub fn long_tail() -> Self {
        Self {
            poles: 1,
            classes: ClassMap::long_tail(),
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("beam pattern must have at least one ray".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("class map is empty".into()));
        }
        self.classes.validate()?;
        if !(self.fov_up_deg > self.fov_down_deg) {
            return Err(Error::Config("fov_up_deg must exceed fov_down_deg".into()));
        }
        if !(self.ground_radius > 0.0) {
            return Err(Error::Config("ground_radius must be positive".into()));
        }
        let (lo, hi) = self.sensor_height;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("sensor_height must be a positive interval".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Surface {
    Ground { height: f64, slope: (f64, f64) },
    Box { center: (f64, f64), half: (f64, f64), yaw: f64, z: (f64, f64) },
    Cylinder { center: (f64, f64), radius: f64, z: (f64, f64) },
    Ellipsoid { center: (f64, f64, f64), axes: (f64, f64, f64) },
}

struct Object {
    surface: Surface,
    class: Label,
    intensity: f64,
}

impl Surface {
    /// Nearest positive ray parameter for a ray from the origin along `d`.
    fn hit(&self, d: (f64, f64, f64), max_planar: f64) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match *self {
            Surface::Ground { height, slope } => {
                // z = -height + sx*x + sy*y
                let denom = d.2 - slope.0 * d.0 - slope.1 * d.1;
                if denom >= -EPS {
                    return None;
                }
                let t = -height / denom;
                let planar = t * d.0.hypot(d.1);
                (t > EPS && planar <= max_planar).then_some(t)
            }
            Surface::Box { center, half, yaw, z } => {
                let (c, s) = (yaw.cos(), yaw.sin());
                // rotate ray into the box frame; origin becomes -center rotated
                let ox = -center.0 * c - center.1 * s;
                let oy = center.0 * s - center.1 * c;
                let dx = d.0 * c + d.1 * s;
                let dy = -d.0 * s + d.1 * c;
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for (o, dd, lo, hi) in [
                    (ox, dx, -half.0, half.0),
                    (oy, dy, -half.1, half.1),
                    (0.0, d.2, z.0, z.1),
                ] {
                    if dd.abs() < EPS {
                        if o < lo || o > hi {
                            return None;
                        }
                    } else {
                        let (a, b) = ((lo - o) / dd, (hi - o) / dd);
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t0 <= t1 && t0 > EPS).then_some(t0)
            }
            Surface::Cylinder { center, radius, z } => {
                let a = d.0 * d.0 + d.1 * d.1;
                if a < EPS {
                    return None;
                }
                let b = -2.0 * (d.0 * center.0 + d.1 * center.1);
                let c = center.0 * center.0 + center.1 * center.1 - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let hz = t * d.2;
                (t > EPS && hz >= z.0 && hz <= z.1).then_some(t)
            }
            Surface::Ellipsoid { center, axes } => {
                let (ox, oy, oz) = (-center.0 / axes.0, -center.1 / axes.1, -center.2 / axes.2);
                let (dx, dy, dz) = (d.0 / axes.0, d.1 / axes.1, d.2 / axes.2);
                let a = dx * dx + dy * dy + dz * dz;
                let b = 2.0 * (ox * dx + oy * dy + oz * dz);
                let c = ox * ox + oy * oy + oz * oz - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                (t > EPS).then_some(t)
            }
        }
    }
}

fn count_around(rng: &mut StreamRng, nominal: u32) -> u32 {
    if nominal == 0 {
        0
    } else {
        rng.gen_range(nominal - nominal / 2..=nominal + nominal / 2)
    }
}

fn polar_position(rng: &mut StreamRng, cfg: &SceneConfig) -> (f64, f64) {
    let r = rng.gen_range(4.0..(cfg.ground_radius * 0.6).max(4.5));
    let phi = rng.gen_range(-PI..PI);
    (r * phi.cos(), r * phi.sin())
}

/// Generates one labeled scene by casting the configured beam pattern from the
/// sensor at the origin against a ground disc and randomly placed objects.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<PointCloud> {
    use rand::SeedableRng;

    cfg.validate()?;
    let k = cfg.num_classes();
    let mut rng = StreamRng::seed_from_u64(seed);

    let height = rng.gen_range(cfg.sensor_height.0..=cfg.sensor_height.1);
    let gain = rng.gen_range(0.85..1.15);
    let slope = (rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
    let ground_z = |x: f64, y: f64| -height + slope.0 * x + slope.1 * y;

    let mut objects = vec![Object {
        surface: Surface::Ground { height, slope },
        class: GROUND,
        intensity: 0.25,
    }];
    let kinds = [
        (VEHICLE, cfg.vehicles, 0.6),
        (POLE, cfg.poles, 0.45),
        (VEGETATION, cfg.vegetation, 0.35),
    ];
    for (class, nominal, intensity) in kinds {
        let n = count_around(&mut rng, nominal);
        if usize::from(class) >= k {
            continue;
        }
        for _ in 0..n {
            let (cx, cy) = polar_position(&mut rng, cfg);
            let base = ground_z(cx, cy);
            let surface = match class {
                VEHICLE => Surface::Box {
                    center: (cx, cy),
                    half: (rng.gen_range(1.7..2.5), rng.gen_range(0.8..1.0)),
                    yaw: rng.gen_range(-PI..PI),
                    z: (base, base + rng.gen_range(1.4..1.9)),
                },
                POLE => Surface::Cylinder {
                    center: (cx, cy),
                    radius: rng.gen_range(0.25..0.5),
                    z: (base, base + rng.gen_range(3.0..7.0)),
                },
                _ => {
                    let axes = (
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(0.8..2.0),
                    );
                    Surface::Ellipsoid {
                        center: (cx, cy, base + axes.2 * rng.gen_range(0.5..0.9)),
                        axes,
                    }
                }
            };
            objects.push(Object {
                surface,
                class,
                intensity,
            });
        }
    }

    let (up, down) = (cfg.fov_up_deg.to_radians(), cfg.fov_down_deg.to_radians());
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for row in 0..cfg.rows {
        let theta = up - (f64::from(row) + 0.5) / f64::from(cfg.rows) * (up - down);
        for col in 0..cfg.cols {
            let phi = -PI + (f64::from(col) + 0.5) / f64::from(cfg.cols) * 2.0 * PI;
            let d = (theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin());
            let nearest = objects
                .iter()
                .filter_map(|o| o.surface.hit(d, cfg.ground_radius).map(|t| (t, o)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            // the noise draw happens for every ray so hits do not shift the stream
            let noise: f64 = rng.gen_range(-0.15..0.15);
            if let Some((t, obj)) = nearest {
                let intensity = (obj.intensity * gain + noise).clamp(0.0, 1.0);
                points.push(Point::new(
                    (t * d.0) as f32,
                    (t * d.1) as f32,
                    (t * d.2) as f32,
                    intensity as f32,
                ));
                labels.push(obj.class);
            }
        }
    }
    PointCloud::new(points, k as u16)?.with_labels(labels)
}

/// Labeled / unlabeled / validation partition of a scene collection.
///
/// Unlabeled scenes carry no labels; their ground truth lives in `sealed`,
/// which only the metrics module can read.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<PointCloud>,
    pub unlabeled: Vec<PointCloud>,
    pub validation: Vec<PointCloud>,
    pub sealed: SealedLabels,
}

impl DatasetSplit {
    pub fn with_validation(mut self, validation: Vec<PointCloud>) -> Result<Self> {
        if validation.iter().any(|s| s.labels().is_none()) {
            return Err(Error::InvalidArgument("validation scenes must be labeled".into()));
        }
        self.validation = validation;
        Ok(self)
    }
}

pub fn split_dataset(scenes: Vec<PointCloud>, fraction: f64, rng: &mut StreamRng) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    if scenes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two scenes to split".into()));
    }
    if scenes.iter().any(|s| s.labels().is_none()) {
        return Err(Error::InvalidArgument("all scenes must be labeled before splitting".into()));
    }
    let n = scenes.len();
    let n_labeled = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut is_labeled = vec![false; n];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(n - n_labeled);
    let mut truths = Vec::with_capacity(n - n_labeled);
    for (mut scene, keep) in scenes.into_iter().zip(is_labeled) {
        if keep {
            labeled.push(scene);
        } else {
            truths.push(scene.take_labels().unwrap_or_default());
            unlabeled.push(scene);
        }
    }
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        validation: Vec::new(),
        sealed: SealedLabels::seal(truths),
    })
}

const MAGIC: &[u8; 4] = b"PCLS";
const VERSION: u16 = 1;
const FLAG_LABELS: u8 = 0b01;
const FLAG_ORIGIN: u8 = 0b10;

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut buf = Vec::with_capacity(13 + n * 18);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&cloud.num_classes.to_le_bytes());
    let mut flags = 0;
    if cloud.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if cloud.origin.is_some() {
        flags |= FLAG_ORIGIN;
    }
    buf.push(flags);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &cloud.labels {
        buf.extend_from_slice(labels);
    }
    if let Some(origin) = &cloud.origin {
        buf.extend(origin.iter().map(|&o| o as u8));
    }
    buf
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = bytes;
    let mut take = |len: usize, what: &str| -> Result<&[u8]> {
        if r.len() < len {
            return Err(Error::Format(format!("truncated {what}")));
        }
        let (head, tail) = r.split_at(len);
        r = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(take(4, "header")?.try_into().unwrap()) as usize;
    let k = u16::from_le_bytes(take(2, "header")?.try_into().unwrap());
    let flags = take(1, "header")?[0];
    if flags & !(FLAG_LABELS | FLAG_ORIGIN) != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#04x}")));
    }
    let records = take(n.checked_mul(16).ok_or_else(|| Error::Format("point count overflow".into()))?, "point records")?;
    let points = records
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap());
            Point::new(f(0), f(1), f(2), f(3))
        })
        .collect();
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = take(n, "labels")?;
        if let Some(&bad) = raw.iter().find(|&&l| u16::from(l) >= k) {
            return Err(Error::Format(format!("label {bad} out of range for {k} classes")));
        }
        Some(raw.to_vec())
    } else {
        None
    };
    let origin = if flags & FLAG_ORIGIN != 0 {
        let raw = take(n, "origin")?;
        Some(
            raw.iter()
                .map(|&b| Origin::from_byte(b).ok_or_else(|| Error::Format(format!("bad origin byte {b}"))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.len())));
    }
    let mut cloud = PointCloud::new(points, k).map_err(|e| Error::Format(e.to_string()))?;
    cloud.labels = labels;
    cloud.origin = origin;
    Ok(cloud)
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_cloud(cloud))?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_cloud(&bytes)
}
