//! Deliberately naive reference implementations of the filters.
//!
//! These share no code with `crate::filters`; they exist so the optimized
//! paths can be checked against something obviously correct. Quadratic
//! cost: keep inputs to a few thousand points.

use std::collections::HashMap;

use crate::geometry::PointCloud;

fn d2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Centroid and rounded mean color per occupied voxel, in no particular
/// order.
pub fn oracle_voxel(cloud: &PointCloud, leaf: f64) -> Vec<([f32; 3], [u8; 3])> {
    let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let cell = |c: f32| ((c as f64) / leaf).floor() as i64;
        cells.entry((cell(p[0]), cell(p[1]), cell(p[2]))).or_default().push(i);
    }
    cells
        .values()
        .map(|members| {
            let n = members.len() as f64;
            let mut pos = [0.0f64; 3];
            let mut col = [0.0f64; 3];
            for &i in members {
                for k in 0..3 {
                    pos[k] += cloud.positions[i][k] as f64;
                    col[k] += cloud.colors[i][k] as f64;
                }
            }
            (
                [(pos[0] / n) as f32, (pos[1] / n) as f32, (pos[2] / n) as f32],
                [(col[0] / n).round() as u8, (col[1] / n).round() as u8, (col[2] / n).round() as u8],
            )
        })
        .collect()
}

/// Ids of the `k` nearest points by linear scan, ties to the lower id.
pub fn oracle_knn(cloud: &PointCloud, query: [f32; 3], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, &p)| (d2(query, p), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Retained indices of statistical outlier removal, from all-pairs
/// distances.
pub fn oracle_sor(cloud: &PointCloud, k: usize, std_ratio: f64) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let n = cloud.len();
    if n <= k {
        return (0..n).collect();
    }
    let mut means = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (d2(cloud.positions[i], cloud.positions[j]), j))
            .collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dists.select_nth_unstable_by(k - 1, by_dist);
        dists.truncate(k);
        dists.sort_by(by_dist);
        let mut sum = 0.0;
        for (d, _) in dists.iter().take(k) {
            sum += d.sqrt();
        }
        means.push(sum / k as f64);
    }
    let mut total = 0.0;
    for m in &means {
        total += m;
    }
    let mu = total / n as f64;
    let mut var = 0.0;
    for m in &means {
        var += (m - mu) * (m - mu);
    }
    let sigma = (var / n as f64).sqrt();
    (0..n).filter(|&i| means[i] <= mu + std_ratio * sigma).collect()
}
