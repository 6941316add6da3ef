//! LaserMix, PolarMix and sub-cloud shuffling, plus the probabilistic
//! selector that decides per step whether (and how) to mix.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{Origin, PointCloud};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixStrategy {
    LaserMix,
    PolarMix,
    SubCloudShuffle,
}

impl MixStrategy {
    pub const ALL: [MixStrategy; 3] = [
        MixStrategy::LaserMix,
        MixStrategy::PolarMix,
        MixStrategy::SubCloudShuffle,
    ];
}

/// A mixed cloud. Every point is tagged with its source cloud and its index
/// within that source.
#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub cloud: PointCloud,
    pub source_index: Vec<u32>,
    pub strategy: MixStrategy,
}

impl MixOutcome {
    pub fn origin(&self) -> &[Origin] {
        self.cloud.origin().expect("mixed clouds always carry origin tags")
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.origin().iter().filter(|&&o| o == origin).count()
    }
}

/// Elevation span used to cut LaserMix bands, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElevationSpan {
    pub up_deg: f64,
    pub down_deg: f64,
}

fn combine(a: &PointCloud, keep_a: &[usize], b: &PointCloud, keep_b: &[usize], strategy: MixStrategy) -> MixOutcome {
    let mut points = Vec::with_capacity(keep_a.len() + keep_b.len());
    points.extend(keep_a.iter().map(|&i| a.points()[i]));
    points.extend(keep_b.iter().map(|&i| b.points()[i]));
    let origin: Vec<Origin> = std::iter::repeat(Origin::A)
        .take(keep_a.len())
        .chain(std::iter::repeat(Origin::B).take(keep_b.len()))
        .collect();
    let source_index = keep_a.iter().chain(keep_b).map(|&i| i as u32).collect();
    let labels = match (a.labels(), b.labels()) {
        (Some(la), Some(lb)) => Some(
            keep_a
                .iter()
                .map(|&i| la[i])
                .chain(keep_b.iter().map(|&i| lb[i]))
                .collect(),
        ),
        _ => None,
    };
    let num_classes = a.num_classes().max(b.num_classes());
    // points were already validated in their source clouds
    let mut cloud = PointCloud::new(points, num_classes)
        .expect("source points are valid")
        .with_origin(origin)
        .expect("origin length matches");
    if let Some(labels) = labels {
        cloud = cloud.with_labels(labels).expect("labels valid in source");
    }
    MixOutcome {
        cloud,
        source_index,
        strategy,
    }
}

fn require_non_empty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::InvalidArgument("mixing requires two non-empty clouds".into()))
    } else {
        Ok(())
    }
}

/// Band of a point when `span` is cut into `partitions` equal elevation bands.
/// Points outside the span fall into the nearest edge band.
pub fn elevation_band(elevation: f64, span: ElevationSpan, partitions: usize) -> usize {
    let (up, down) = (span.up_deg.to_radians(), span.down_deg.to_radians());
    let t = (elevation - down) / (up - down) * partitions as f64;
    (t.floor().max(0.0) as usize).min(partitions - 1)
}

/// Even bands (counted from the bottom of the span) come from `a`, odd bands from `b`;
/// `swap` exchanges the roles.
pub fn laser_mix(a: &PointCloud, b: &PointCloud, partitions: usize, span: ElevationSpan, swap: bool) -> Result<MixOutcome> {
    if partitions < 2 {
        return Err(Error::InvalidArgument(format!("LaserMix needs at least 2 partitions, got {partitions}")));
    }
    require_non_empty(a, b)?;
    let a_parity = usize::from(swap);
    let keep = |c: &PointCloud, parity: usize| -> Vec<usize> {
        c.points()
            .iter()
            .enumerate()
            .filter(|(_, p)| elevation_band(p.elevation(), span, partitions) % 2 == parity)
            .map(|(i, _)| i)
            .collect()
    };
    Ok(combine(a, &keep(a, a_parity), b, &keep(b, 1 - a_parity), MixStrategy::LaserMix))
}

/// Whether azimuth `phi` lies in the half-open sector [start, start + width) modulo 2π.
pub fn in_sector(phi: f64, start: f64, width: f64) -> bool {
    (phi - start).rem_euclid(TAU) < width
}

/// Replaces `a`'s points inside the azimuth sector with `b`'s points inside it.
pub fn polar_mix(a: &PointCloud, b: &PointCloud, start: f64, width: f64) -> Result<MixOutcome> {
    if !(width > 0.0 && width < TAU) {
        return Err(Error::InvalidArgument(format!("sector width must be in (0, 2π), got {width}")));
    }
    require_non_empty(a, b)?;
    let pick = |c: &PointCloud, inside: bool| -> Vec<usize> {
        c.points()
            .iter()
            .enumerate()
            .filter(|(_, p)| in_sector(p.azimuth(), start, width) == inside)
            .map(|(i, _)| i)
            .collect()
    };
    Ok(combine(a, &pick(a, false), b, &pick(b, true), MixStrategy::PolarMix))
}

/// Keeps a random ⌈N/2⌉ subset of each cloud.
pub fn sub_cloud_shuffle(a: &PointCloud, b: &PointCloud, seed: u64) -> Result<MixOutcome> {
    require_non_empty(a, b)?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut half = |c: &PointCloud| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(c.len().div_ceil(2));
        idx
    };
    let (ka, kb) = (half(a), half(b));
    Ok(combine(a, &ka, b, &kb, MixStrategy::SubCloudShuffle))
}

/// With probability `q_m`, mixes `(labeled, unlabeled)` with a uniformly chosen
/// strategy; otherwise returns `None` and the pair stays separate.
pub fn maybe_mix(
    labeled: &PointCloud,
    unlabeled: &PointCloud,
    q_m: f64,
    span: ElevationSpan,
    rng: &mut StreamRng,
) -> Result<Option<MixOutcome>> {
    if !(0.0..=1.0).contains(&q_m) {
        return Err(Error::InvalidArgument(format!("mixing probability {q_m} outside [0, 1]")));
    }
    // draw order is fixed so every step consumes the same amount of randomness
    let u: f64 = rng.gen();
    let strategy = MixStrategy::ALL[rng.gen_range(0..3)];
    let partitions = rng.gen_range(2..=4);
    let swap: bool = rng.gen();
    let start = rng.gen_range(0.0..TAU);
    let width = rng.gen_range(PI / 4.0..=PI);
    let seed: u64 = rng.gen();
    if u >= q_m || labeled.is_empty() || unlabeled.is_empty() {
        return Ok(None);
    }
    let outcome = match strategy {
        MixStrategy::LaserMix => laser_mix(labeled, unlabeled, partitions, span, swap)?,
        MixStrategy::PolarMix => polar_mix(labeled, unlabeled, start, width)?,
        MixStrategy::SubCloudShuffle => sub_cloud_shuffle(labeled, unlabeled, seed)?,
    };
    Ok(Some(outcome))
}
