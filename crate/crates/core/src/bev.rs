//! Six-channel bird's-eye-view rasterization of a LiDAR point cloud.
//!
//! Channels 0..4 hold the maximum normalized height inside four equal vertical
//! slices of the slab, channel 4 the point density `min(1, ln(N+1)/ln 16)` and
//! channel 5 the maximum intensity. Rows follow z (depth), columns follow x.

use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D, PointCloud};

pub const BEV_CHANNELS: usize = 6;
pub const HEIGHT_SLICES: usize = 4;
pub const DENSITY_CHANNEL: usize = 4;
pub const INTENSITY_CHANNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaExtents {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl AreaExtents {
    pub fn validate(&self) -> Result<()> {
        if self.x_min < self.x_max && self.y_min < self.y_max && self.z_min < self.z_max {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid area extents {self:?}")))
        }
    }

    fn cells(lo: f64, hi: f64, resolution: f64) -> usize {
        (((hi - lo) / resolution) - 1e-9).ceil().max(1.0) as usize
    }

    /// Raster size as (rows along z, columns along x).
    pub fn raster_shape(&self, resolution: f64) -> (usize, usize) {
        (
            Self::cells(self.z_min, self.z_max, resolution),
            Self::cells(self.x_min, self.x_max, resolution),
        )
    }

    pub fn with_slab(&self, y_min: f64, y_max: f64) -> Self {
        Self { y_min, y_max, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    pub extents: AreaExtents,
    /// Channel-major `[BEV_CHANNELS][rows][cols]`.
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[(channel * self.rows + row) * self.cols + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// The same grid mirrored left/right (columns reversed).
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for c in 0..BEV_CHANNELS {
            for r in 0..self.rows {
                for col in 0..self.cols {
                    out.data[(c * self.rows + r) * self.cols + col] = self.get(c, r, self.cols - 1 - col);
                }
            }
        }
        out
    }
}

fn cell_index(v: f64, lo: f64, hi: f64, resolution: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    // half-open cells, the last one closed
    Some((((v - lo) / resolution).floor() as usize).min(n - 1))
}

pub fn encode_bev(cloud: &PointCloud, extents: &AreaExtents, resolution: f64) -> Result<BevGrid> {
    extents.validate()?;
    if !(resolution > 0.0) {
        return Err(Error::InvalidArgument("BEV resolution must be positive".into()));
    }
    let (rows, cols) = extents.raster_shape(resolution);
    let plane = rows * cols;
    let mut data = vec![0.0; BEV_CHANNELS * plane];
    let mut counts = vec![0u32; plane];
    let slab = extents.y_max - extents.y_min;

    for p in &cloud.points {
        let [x, y, z] = p.position;
        let (Some(col), Some(row)) = (
            cell_index(x, extents.x_min, extents.x_max, resolution, cols),
            cell_index(z, extents.z_min, extents.z_max, resolution, rows),
        ) else {
            continue;
        };
        if !(y >= extents.y_min && y <= extents.y_max) {
            continue;
        }
        let cell = row * cols + col;
        let h = (extents.y_max - y) / slab;
        let slice = ((h * HEIGHT_SLICES as f64).floor() as usize).min(HEIGHT_SLICES - 1);
        let slot = &mut data[slice * plane + cell];
        *slot = f64::max(*slot, h);
        counts[cell] += 1;
        let slot = &mut data[INTENSITY_CHANNEL * plane + cell];
        *slot = f64::max(*slot, p.intensity.clamp(0.0, 1.0));
    }
    let norm = 16f64.ln();
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            data[DENSITY_CHANNEL * plane + cell] = (f64::from(n + 1).ln() / norm).min(1.0);
        }
    }
    Ok(BevGrid {
        rows,
        cols,
        resolution,
        extents: *extents,
        data,
    })
}

/// Footprint of a 3D box in continuous BEV raster coordinates
/// (x → column, z → row). The vertical axis is dropped.
pub fn project_box_to_bev(b: &Box3D, extents: &AreaExtents, resolution: f64) -> Result<Box2D> {
    let (lo, hi) = (b.min(), b.max());
    if hi[0] < extents.x_min || lo[0] > extents.x_max || hi[2] < extents.z_min || lo[2] > extents.z_max {
        return Err(Error::BoxOutsideExtents);
    }
    Ok(Box2D::new(
        (lo[0] - extents.x_min) / resolution,
        (lo[2] - extents.z_min) / resolution,
        (hi[0] - extents.x_min) / resolution,
        (hi[2] - extents.z_min) / resolution,
    ))
}

/// Summed-area table over occupied BEV cells, for fast empty-anchor tests.
#[derive(Debug, Clone)]
pub struct OccupancyIntegral {
    rows: usize,
    cols: usize,
    sums: Vec<u32>,
}

impl OccupancyIntegral {
    pub fn new(grid: &BevGrid) -> Self {
        let (rows, cols) = (grid.rows, grid.cols);
        let density = grid.channel(DENSITY_CHANNEL);
        let mut sums = vec![0u32; (rows + 1) * (cols + 1)];
        for r in 0..rows {
            let mut acc = 0;
            for c in 0..cols {
                acc += u32::from(density[r * cols + c] > 0.0);
                sums[(r + 1) * (cols + 1) + c + 1] = sums[r * (cols + 1) + c + 1] + acc;
            }
        }
        Self { rows, cols, sums }
    }

    /// Number of occupied cells touched by a continuous raster box.
    pub fn count(&self, b: &Box2D) -> u32 {
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n);
        let (c0, c1) = (clamp(b.x1.floor(), self.cols), clamp(b.x2.ceil(), self.cols));
        let (r0, r1) = (clamp(b.y1.floor(), self.rows), clamp(b.y2.ceil(), self.rows));
        if c0 >= c1 || r0 >= r1 {
            return 0;
        }
        let w = self.cols + 1;
        self.sums[r1 * w + c1] + self.sums[r0 * w + c0] - self.sums[r0 * w + c1] - self.sums[r1 * w + c0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LidarPoint;

    fn extents() -> AreaExtents {
        AreaExtents {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -1.0,
            y_max: 1.0,
            z_min: 0.0,
            z_max: 4.0,
        }
    }

    fn pt(x: f64, y: f64, z: f64, i: f64) -> LidarPoint {
        LidarPoint {
            position: [x, y, z],
            intensity: i,
        }
    }

    #[test]
    fn empty_cloud_is_all_zero() {
        let g = encode_bev(&PointCloud::default(), &extents(), 0.5).unwrap();
        assert_eq!((g.rows, g.cols), (8, 8));
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_mid_slab_point() {
        let g = encode_bev(&PointCloud::new(vec![pt(0.1, 0.0, 1.1, 1.0)]), &extents(), 0.5).unwrap();
        let nonzero_cells: std::collections::BTreeSet<usize> = (0..BEV_CHANNELS)
            .flat_map(|c| {
                g.channel(c)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(nonzero_cells.len(), 1);
        let (row, col) = (2, 4);
        assert_eq!(g.get(DENSITY_CHANNEL, row, col), 2f64.ln() / 16f64.ln());
        assert_eq!(g.get(INTENSITY_CHANNEL, row, col), 1.0);
        assert_eq!(g.get(2, row, col), 0.5);
    }

    #[test]
    fn density_saturates() {
        let pts = (0..20).map(|i| pt(0.1, -0.5 + 0.01 * i as f64, 1.1, 0.2)).collect();
        let g = encode_bev(&PointCloud::new(pts), &extents(), 0.5).unwrap();
        assert_eq!(g.get(DENSITY_CHANNEL, 2, 4), 1.0);
        let pts = (0..15).map(|_| pt(0.1, 0.0, 1.1, 0.2)).collect();
        let g = encode_bev(&PointCloud::new(pts), &extents(), 0.5).unwrap();
        assert_eq!(g.get(DENSITY_CHANNEL, 2, 4), 1.0);
    }

    #[test]
    fn out_of_extent_points_dropped() {
        let pts = vec![pt(5.0, 0.0, 1.0, 1.0), pt(0.0, 3.0, 1.0, 1.0), pt(0.0, 0.0, -0.1, 1.0)];
        let g = encode_bev(&PointCloud::new(pts), &extents(), 0.5).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upper_boundary_lands_in_last_cell() {
        let g = encode_bev(&PointCloud::new(vec![pt(2.0, 0.0, 4.0, 0.5)]), &extents(), 0.5).unwrap();
        assert!(g.get(DENSITY_CHANNEL, 7, 7) > 0.0);
    }

    #[test]
    fn full_extent_box_is_full_raster() {
        let b = Box3D::new([0.0, 0.0, 2.0], [4.0, 2.0, 4.0]);
        let r = project_box_to_bev(&b, &extents(), 0.5).unwrap();
        assert_eq!(r, Box2D::new(0.0, 0.0, 8.0, 8.0));
    }

    #[test]
    fn unit_box_at_origin() {
        let b = Box3D::new([-1.5, 0.0, 0.5], [1.0, 1.0, 1.0]);
        let r = project_box_to_bev(&b, &extents(), 0.1).unwrap();
        assert!((r.x1).abs() < 1e-12 && (r.y1).abs() < 1e-12);
        assert!((r.x2 - 10.0).abs() < 1e-9 && (r.y2 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn box_outside_is_error() {
        let b = Box3D::new([10.0, 0.0, 2.0], [1.0, 1.0, 1.0]);
        assert!(matches!(project_box_to_bev(&b, &extents(), 0.5), Err(Error::BoxOutsideExtents)));
    }

    #[test]
    fn occupancy_counts() {
        let pts = vec![pt(0.1, 0.0, 1.1, 1.0), pt(-1.9, 0.0, 0.1, 1.0)];
        let g = encode_bev(&PointCloud::new(pts), &extents(), 0.5).unwrap();
        let occ = OccupancyIntegral::new(&g);
        assert_eq!(occ.count(&Box2D::new(0.0, 0.0, 8.0, 8.0)), 2);
        assert_eq!(occ.count(&Box2D::new(3.5, 1.5, 4.5, 2.5)), 1);
        assert_eq!(occ.count(&Box2D::new(5.0, 5.0, 8.0, 8.0)), 0);
    }
}
