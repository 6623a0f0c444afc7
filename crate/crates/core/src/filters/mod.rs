//! Per-frame reduction chain: crop, voxel downsampling, statistical outlier
//! removal, point budget.

pub mod knn;

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::geometry::PointCloud;

pub use knn::{KdTree, Neighbor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("bounding box min {min:?} exceeds max {max:?}")]
    InvalidBox { min: [f32; 3], max: [f32; 3] },
    #[error("voxel leaf must be positive and finite, got {0}")]
    InvalidLeaf(f64),
    #[error("outlier filter needs k >= 1")]
    InvalidNeighborCount,
    #[error("outlier std ratio must be positive and finite, got {0}")]
    InvalidStdRatio(f64),
    #[error("point budget must be at least 1")]
    InvalidBudget,
    #[error("nearest-neighbor query on an empty index")]
    EmptyIndex,
}

/// Closed axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AabbRepr")]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AabbRepr {
    min: [f32; 3],
    max: [f32; 3],
}

impl TryFrom<AabbRepr> for Aabb {
    type Error = FilterError;
    fn try_from(r: AabbRepr) -> Result<Self, Self::Error> {
        Aabb::new(r.min, r.max)
    }
}

impl Aabb {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self, FilterError> {
        // NaN bounds are rejected too
        if (0..3).any(|a| min[a].partial_cmp(&max[a]).is_none_or(|o| o.is_gt())) {
            return Err(FilterError::InvalidBox { min, max });
        }
        Ok(Aabb { min, max })
    }

    #[inline]
    pub fn contains(&self, p: &[f32; 3]) -> bool {
        self.min[0] <= p[0]
            && p[0] <= self.max[0]
            && self.min[1] <= p[1]
            && p[1] <= self.max[1]
            && self.min[2] <= p[2]
            && p[2] <= self.max[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Voxel edge length in meters.
    pub voxel_leaf: f64,
    pub sor_k: usize,
    pub sor_std_ratio: f64,
    pub point_budget: usize,
}

pub const DEFAULT_POINT_BUDGET: usize = 75_000;

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            voxel_leaf: 0.004,
            sor_k: 20,
            sor_std_ratio: 2.0,
            point_budget: DEFAULT_POINT_BUDGET,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        check_leaf(self.voxel_leaf)?;
        check_sor(self.sor_k, self.sor_std_ratio)?;
        if self.point_budget == 0 {
            return Err(FilterError::InvalidBudget);
        }
        Ok(())
    }
}

fn check_leaf(leaf: f64) -> Result<(), FilterError> {
    if leaf > 0.0 && leaf.is_finite() {
        Ok(())
    } else {
        Err(FilterError::InvalidLeaf(leaf))
    }
}

fn check_sor(k: usize, ratio: f64) -> Result<(), FilterError> {
    if k == 0 {
        return Err(FilterError::InvalidNeighborCount);
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(FilterError::InvalidStdRatio(ratio));
    }
    Ok(())
}

/// Keeps the points inside `bbox`, in input order.
pub fn crop_aabb(cloud: &PointCloud, bbox: &Aabb) -> PointCloud {
    let mut out = PointCloud::with_capacity(cloud.frame_id, cloud.timestamp_us, cloud.len());
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        if bbox.contains(p) {
            out.push(*p, *c);
        }
    }
    out
}

/// FxHash-style hasher for integer voxel keys.
#[derive(Default)]
struct VoxelHasher(u64);

impl Hasher for VoxelHasher {
    fn finish(&self) -> u64 {
        // fold the high bits down; the table indexes with the low ones
        self.0 ^ (self.0 >> 29)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    #[inline]
    fn write_i64(&mut self, v: i64) {
        self.write_u64(v as u64);
    }

    #[inline]
    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
}

/// Integer voxel coordinates of `p`, using mathematical floor.
#[inline]
pub fn voxel_key(p: &[f32; 3], leaf: f64) -> [i64; 3] {
    [floor_i64(p[0] as f64 / leaf), floor_i64(p[1] as f64 / leaf), floor_i64(p[2] as f64 / leaf)]
}

/// `x.floor() as i64` without the libm call.
#[inline]
fn floor_i64(x: f64) -> i64 {
    let t = x as i64;
    if (t as f64) > x {
        t.saturating_sub(1)
    } else {
        t
    }
}

/// Hashes the three coordinates as three words; `[i64; 3]` would go
/// through the byte-slice path.
#[derive(PartialEq, Eq)]
struct VoxelKey([i64; 3]);

impl std::hash::Hash for VoxelKey {
    #[inline]
    fn hash<H: Hasher>(&self, state: &mut H) {
        for v in self.0 {
            state.write_i64(v);
        }
    }
}

struct VoxelAccum {
    sum: [f64; 3],
    color: [u64; 3],
    count: u64,
}

/// Replaces the points of each occupied voxel by their centroid and rounded
/// mean color. Voxels are emitted in order of first occurrence.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud, FilterError> {
    check_leaf(leaf)?;
    let mut slots: HashMap<VoxelKey, usize, BuildHasherDefault<VoxelHasher>> =
        HashMap::with_capacity_and_hasher(cloud.len() / 2, Default::default());
    let mut acc: Vec<VoxelAccum> = Vec::new();
    // neighbouring pixels tend to share a voxel
    let mut last: Option<([i64; 3], usize)> = None;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let key = voxel_key(p, leaf);
        let slot = match last {
            Some((k, s)) if k == key => s,
            _ => {
                let s = *slots.entry(VoxelKey(key)).or_insert_with(|| {
                    acc.push(VoxelAccum {
                        sum: [0.0; 3],
                        color: [0; 3],
                        count: 0,
                    });
                    acc.len() - 1
                });
                last = Some((key, s));
                s
            }
        };
        let a = &mut acc[slot];
        for k in 0..3 {
            a.sum[k] += p[k] as f64;
            a.color[k] += c[k] as u64;
        }
        a.count += 1;
    }

    let mut out = PointCloud::with_capacity(cloud.frame_id, cloud.timestamp_us, acc.len());
    for a in &acc {
        let n = a.count as f64;
        let half = a.count / 2;
        out.push(
            [
                (a.sum[0] / n) as f32,
                (a.sum[1] / n) as f32,
                (a.sum[2] / n) as f32,
            ],
            [
                ((a.color[0] + half) / a.count) as u8,
                ((a.color[1] + half) / a.count) as u8,
                ((a.color[2] + half) / a.count) as u8,
            ],
        );
    }
    Ok(out)
}

/// Mean distance from each point to its `k` nearest other points.
///
/// Distances are summed nearest-first.
pub fn mean_neighbor_distances(cloud: &PointCloud, k: usize, exec: Exec) -> Vec<f64> {
    let tree = KdTree::build(&cloud.positions);
    // nearest first, so the sum matches a plain sorted evaluation bit for bit
    tree.map_all_knn_distances(k, exec, |_, nn| nn.iter().map(|n| n.dist_sq.sqrt()).sum::<f64>() / k as f64)
}

/// Indices of the points a statistical outlier filter keeps.
pub fn sor_inliers(cloud: &PointCloud, k: usize, std_ratio: f64, exec: Exec) -> Result<Vec<usize>, FilterError> {
    check_sor(k, std_ratio)?;
    if cloud.len() <= k {
        return Ok((0..cloud.len()).collect());
    }
    let means = mean_neighbor_distances(cloud, k, exec);
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    // population standard deviation
    let sigma = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n).sqrt();
    let threshold = mu + std_ratio * sigma;
    Ok(means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m <= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Statistical outlier removal.
///
/// A point survives when the mean distance to its `k` nearest neighbors is
/// at most `μ + std_ratio·σ` over all points. Clouds of `k` or fewer points
/// are returned unchanged.
pub fn sor_filter(cloud: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud, FilterError> {
    sor_filter_with(cloud, k, std_ratio, Exec::default())
}

pub fn sor_filter_with(cloud: &PointCloud, k: usize, std_ratio: f64, exec: Exec) -> Result<PointCloud, FilterError> {
    let keep = sor_inliers(cloud, k, std_ratio, exec)?;
    if keep.len() == cloud.len() {
        return Ok(cloud.clone());
    }
    Ok(cloud.select(&keep))
}

/// Indices kept by stride subsampling `n` points down to `budget`.
pub fn budget_indices(n: usize, budget: usize) -> Vec<usize> {
    if n <= budget {
        return (0..n).collect();
    }
    (0..budget)
        .map(|i| ((i as u128 * n as u128) / budget as u128) as usize)
        .collect()
}

/// Caps the cloud at `budget` points by deterministic stride subsampling.
pub fn enforce_budget(cloud: &PointCloud, budget: usize) -> Result<PointCloud, FilterError> {
    if budget == 0 {
        return Err(FilterError::InvalidBudget);
    }
    if cloud.len() <= budget {
        return Ok(cloud.clone());
    }
    Ok(cloud.select(&budget_indices(cloud.len(), budget)))
}
