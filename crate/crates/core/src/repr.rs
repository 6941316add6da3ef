//! Range-image, polar bird's-eye-view and cylindrical-voxel gridding of a
//! point cloud.
//!
//! Every representation is reached through the raw points: a [`ReprMapping`]
//! records the cell of each point and one representative ("winner") point per
//! occupied cell, so cell values can be routed between representations by
//! going cell → winner point → other cell.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeGrid {
    pub rows: u32,
    pub cols: u32,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarGrid {
    pub radial_bins: u32,
    pub azimuth_bins: u32,
    pub max_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelGrid {
    pub radial_bins: u32,
    pub azimuth_bins: u32,
    pub height_bins: u32,
    pub max_radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReprConfig {
    Range(RangeGrid),
    Polar(PolarGrid),
    Voxel(VoxelGrid),
}

impl ReprConfig {
    pub fn default_range() -> Self {
        ReprConfig::Range(RangeGrid {
            rows: 16,
            cols: 64,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
        })
    }

    pub fn default_polar() -> Self {
        ReprConfig::Polar(PolarGrid {
            radial_bins: 32,
            azimuth_bins: 64,
            max_radius: 40.0,
        })
    }

    pub fn default_voxel() -> Self {
        ReprConfig::Voxel(VoxelGrid {
            radial_bins: 24,
            azimuth_bins: 48,
            height_bins: 8,
            max_radius: 40.0,
            z_min: -3.0,
            z_max: 6.0,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReprConfig::Range(_) => "range",
            ReprConfig::Polar(_) => "polar",
            ReprConfig::Voxel(_) => "voxel",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ReprConfig::Range(g) => g.rows >= 1 && g.cols >= 1 && g.fov_up_deg > g.fov_down_deg,
            ReprConfig::Polar(g) => g.radial_bins >= 1 && g.azimuth_bins >= 1 && g.max_radius > 0.0,
            ReprConfig::Voxel(g) => {
                g.radial_bins >= 1
                    && g.azimuth_bins >= 1
                    && g.height_bins >= 1
                    && g.max_radius > 0.0
                    && g.z_max > g.z_min
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} grid: {self:?}", self.name())))
        }
    }

    pub fn num_cells(&self) -> usize {
        match *self {
            ReprConfig::Range(g) => g.rows as usize * g.cols as usize,
            ReprConfig::Polar(g) => g.radial_bins as usize * g.azimuth_bins as usize,
            ReprConfig::Voxel(g) => {
                g.radial_bins as usize * g.azimuth_bins as usize * g.height_bins as usize
            }
        }
    }

    /// Flat cell index of a point, or `None` when it falls outside the grid.
    pub fn cell_of(&self, p: &Point) -> Option<u32> {
        match *self {
            ReprConfig::Range(g) => {
                let (up, down) = (g.fov_up_deg.to_radians(), g.fov_down_deg.to_radians());
                let theta = p.elevation();
                if !(down..=up).contains(&theta) {
                    return None;
                }
                let row = bin((1.0 - (theta - down) / (up - down)) * f64::from(g.rows), g.rows);
                let col = azimuth_bin(p.azimuth(), g.cols);
                Some(row * g.cols + col)
            }
            ReprConfig::Polar(g) => {
                let r = radial_bin(p.planar_range(), g.max_radius, g.radial_bins)?;
                Some(r * g.azimuth_bins + azimuth_bin(p.azimuth(), g.azimuth_bins))
            }
            ReprConfig::Voxel(g) => {
                let r = radial_bin(p.planar_range(), g.max_radius, g.radial_bins)?;
                let a = azimuth_bin(p.azimuth(), g.azimuth_bins);
                let z = f64::from(p.z);
                if !(z >= g.z_min && z < g.z_max) {
                    return None;
                }
                let h = bin((z - g.z_min) / (g.z_max - g.z_min) * f64::from(g.height_bins), g.height_bins);
                Some((r * g.azimuth_bins + a) * g.height_bins + h)
            }
        }
    }

    /// Winner ordering key; smaller wins.
    fn winner_key(&self, p: &Point, cell: u32) -> f64 {
        match *self {
            ReprConfig::Range(_) => p.range(),
            ReprConfig::Polar(g) => {
                let (r, a) = (cell / g.azimuth_bins, cell % g.azimuth_bins);
                let (cx, cy) = polar_center(r, a, g.radial_bins, g.azimuth_bins, g.max_radius);
                (f64::from(p.x) - cx).hypot(f64::from(p.y) - cy)
            }
            ReprConfig::Voxel(g) => {
                let h = cell % g.height_bins;
                let ra = cell / g.height_bins;
                let (r, a) = (ra / g.azimuth_bins, ra % g.azimuth_bins);
                let (cx, cy) = polar_center(r, a, g.radial_bins, g.azimuth_bins, g.max_radius);
                let cz = g.z_min + (f64::from(h) + 0.5) / f64::from(g.height_bins) * (g.z_max - g.z_min);
                let (dx, dy, dz) = (f64::from(p.x) - cx, f64::from(p.y) - cy, f64::from(p.z) - cz);
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
        }
    }
}

fn bin(scaled: f64, bins: u32) -> u32 {
    (scaled.floor().max(0.0) as u32).min(bins - 1)
}

fn azimuth_bin(phi: f64, bins: u32) -> u32 {
    bin((phi + PI) / (2.0 * PI) * f64::from(bins), bins)
}

fn radial_bin(rho: f64, max_radius: f64, bins: u32) -> Option<u32> {
    (rho < max_radius).then(|| bin(rho / max_radius * f64::from(bins), bins))
}

fn polar_center(r: u32, a: u32, radial: u32, azimuth: u32, max_radius: f64) -> (f64, f64) {
    let rho = (f64::from(r) + 0.5) / f64::from(radial) * max_radius;
    let phi = -PI + (f64::from(a) + 0.5) / f64::from(azimuth) * 2.0 * PI;
    (rho * phi.cos(), rho * phi.sin())
}

/// Point ↔ cell tables for one representation of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprMapping {
    num_cells: usize,
    point_to_cell: Vec<Option<u32>>,
    point_slot: Vec<Option<u32>>,
    cells: Vec<u32>,
    winners: Vec<u32>,
    occupancy: Vec<u32>,
}

impl ReprMapping {
    pub fn len(&self) -> usize {
        self.point_to_cell.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_to_cell.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn point_to_cell(&self) -> &[Option<u32>] {
        &self.point_to_cell
    }

    /// Dense index of the point's cell in [`Self::occupied_cells`].
    pub fn point_slot(&self, point: usize) -> Option<usize> {
        self.point_slot[point].map(|s| s as usize)
    }

    pub fn in_bounds(&self, point: usize) -> bool {
        self.point_to_cell[point].is_some()
    }

    /// Occupied cells in ascending order.
    pub fn occupied_cells(&self) -> &[u32] {
        &self.cells
    }

    /// Winner point of each occupied cell, aligned with [`Self::occupied_cells`].
    pub fn winners(&self) -> &[u32] {
        &self.winners
    }

    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    fn slot_of_cell(&self, cell: u32) -> Option<usize> {
        self.cells.binary_search(&cell).ok()
    }

    pub fn winner(&self, cell: u32) -> Option<usize> {
        self.slot_of_cell(cell).map(|s| self.winners[s] as usize)
    }

    pub fn in_bounds_count(&self) -> usize {
        self.point_to_cell.iter().filter(|c| c.is_some()).count()
    }
}

pub fn project(cloud: &PointCloud, config: &ReprConfig) -> Result<ReprMapping> {
    config.validate()?;
    let num_cells = config.num_cells();
    let point_to_cell: Vec<Option<u32>> = cloud.points().iter().map(|p| config.cell_of(p)).collect();

    let mut best = vec![(f64::INFINITY, u32::MAX); num_cells];
    let mut count = vec![0u32; num_cells];
    for (i, (p, cell)) in cloud.points().iter().zip(&point_to_cell).enumerate() {
        let Some(cell) = *cell else { continue };
        let c = cell as usize;
        count[c] += 1;
        let key = config.winner_key(p, cell);
        // strict comparison keeps the lowest index on ties
        if best[c].1 == u32::MAX || key < best[c].0 {
            best[c] = (key, i as u32);
        }
    }

    let mut cells = Vec::new();
    let mut winners = Vec::new();
    let mut occupancy = Vec::new();
    let mut slot_of = vec![u32::MAX; num_cells];
    for (c, &n) in count.iter().enumerate() {
        if n > 0 {
            slot_of[c] = cells.len() as u32;
            cells.push(c as u32);
            winners.push(best[c].1);
            occupancy.push(n);
        }
    }
    let point_slot = point_to_cell
        .iter()
        .map(|c| c.map(|c| slot_of[c as usize]))
        .collect();
    Ok(ReprMapping {
        num_cells,
        point_to_cell,
        point_slot,
        cells,
        winners,
        occupancy,
    })
}

/// Values keyed by occupied cell, in ascending cell order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellTable<T> {
    entries: Vec<(u32, T)>,
}

impl<T: Copy> CellTable<T> {
    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, cell: u32) -> Option<T> {
        self.entries
            .binary_search_by_key(&cell, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }
}

/// Each occupied cell takes the value of its winner point.
pub fn scatter_labels<T: Copy>(mapping: &ReprMapping, per_point: &[T]) -> Result<CellTable<T>> {
    Error::check_len("per-point values", mapping.len(), per_point.len())?;
    Ok(CellTable {
        entries: mapping
            .cells
            .iter()
            .zip(&mapping.winners)
            .map(|(&c, &w)| (c, per_point[w as usize]))
            .collect(),
    })
}

/// Reads each point's value back from its cell.
pub fn gather<T: Copy>(mapping: &ReprMapping, table: &CellTable<T>) -> Vec<Option<T>> {
    mapping
        .point_to_cell
        .iter()
        .map(|c| c.and_then(|c| table.get(c)))
        .collect()
}

/// Routes each occupied `src` cell to the `dst` cell of its winner point.
pub fn compose_mapping(src: &ReprMapping, dst: &ReprMapping) -> Result<CellTable<Option<u32>>> {
    Error::check_len("mapping point count", src.len(), dst.len())?;
    Ok(CellTable {
        entries: src
            .cells
            .iter()
            .zip(&src.winners)
            .map(|(&c, &w)| (c, dst.point_to_cell[w as usize]))
            .collect(),
    })
}

pub const CELL_CHANNELS: usize = 6;

/// Per occupied cell: mean (x, y, z, intensity), ln(1 + count), winner depth.
pub fn cell_features(cloud: &PointCloud, mapping: &ReprMapping) -> Vec<[f64; CELL_CHANNELS]> {
    let mut sums = vec![[0.0f64; 4]; mapping.cells.len()];
    for (i, p) in cloud.points().iter().enumerate() {
        if let Some(s) = mapping.point_slot(i) {
            let acc = &mut sums[s];
            acc[0] += f64::from(p.x);
            acc[1] += f64::from(p.y);
            acc[2] += f64::from(p.z);
            acc[3] += f64::from(p.intensity);
        }
    }
    sums.iter()
        .zip(&mapping.occupancy)
        .zip(&mapping.winners)
        .map(|((s, &n), &w)| {
            let n = f64::from(n);
            [
                s[0] / n,
                s[1] / n,
                s[2] / n,
                s[3] / n,
                n.ln_1p(),
                cloud.points()[w as usize].range(),
            ]
        })
        .collect()
}
