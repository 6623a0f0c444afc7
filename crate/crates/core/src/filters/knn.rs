//! Exact k-nearest-neighbor search over a static kd-tree.
//!
//! Distances are squared Euclidean distances evaluated in f64 from the f32
//! coordinates, `dx*dx + dy*dy + dz*dz` in that order. Results are sorted by
//! `(distance, point id)`, so equal distances resolve to the lower id and the
//! answer does not depend on tree layout.

use super::FilterError;
use crate::exec::Exec;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

#[derive(Debug)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Children, or `None` for a leaf owning `start..end`.
    children: Option<(usize, usize)>,
    start: usize,
    end: usize,
}

/// Read-only spatial index over a cloud's positions.
#[derive(Debug)]
pub struct KdTree {
    /// Positions in tree order; each leaf owns a contiguous range.
    points: Vec<[f64; 3]>,
    /// Point id at each tree position.
    order: Vec<usize>,
    /// Tree position of each point id.
    slot: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn widen(p: [f32; 3]) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Squared distance from `q` to the box; a lower bound for every point in it.
#[inline]
fn box_dist_sq(q: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> f64 {
    let mut d = 0.0;
    for a in 0..3 {
        let e = if q[a] < lo[a] {
            lo[a] - q[a]
        } else if q[a] > hi[a] {
            q[a] - hi[a]
        } else {
            0.0
        };
        d += e * e;
    }
    d
}

impl KdTree {
    pub fn build(positions: &[[f32; 3]]) -> KdTree {
        let mut items: Vec<([f64; 3], usize)> = positions.iter().enumerate().map(|(i, &p)| (widen(p), i)).collect();
        let mut nodes = Vec::with_capacity(2 * items.len() / LEAF_SIZE + 1);
        if !items.is_empty() {
            build_rec(&mut items, 0, &mut nodes);
        }
        let points = items.iter().map(|it| it.0).collect();
        let order: Vec<usize> = items.iter().map(|it| it.1).collect();
        let mut slot = vec![0; order.len()];
        for (pos, &id) in order.iter().enumerate() {
            slot[id] = pos;
        }
        KdTree {
            points,
            order,
            slot,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point ids in tree order. Queries issued in this order touch memory
    /// far more locally than in id order.
    pub fn ids_in_tree_order(&self) -> &[usize] {
        &self.order
    }

    /// The `k` points nearest to `query`, skipping `exclude` when given.
    ///
    /// Returns fewer than `k` neighbors only when the index holds fewer
    /// candidates.
    pub fn knn(
        &self,
        query: [f32; 3],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<Vec<Neighbor>, FilterError> {
        if self.is_empty() {
            return Err(FilterError::EmptyIndex);
        }
        let skip = exclude.filter(|&i| i < self.len()).map_or(usize::MAX, |i| self.slot[i]);
        Ok(self.search_from(&widen(query), k, skip))
    }

    /// Neighbors of indexed point `i`, excluding itself.
    pub fn knn_of_point(&self, i: usize, k: usize) -> Result<Vec<Neighbor>, FilterError> {
        if self.is_empty() {
            return Err(FilterError::EmptyIndex);
        }
        let pos = self.slot[i];
        Ok(self.search_from(&self.points[pos], k, pos))
    }

    fn search_from(&self, q: &[f64; 3], k: usize, skip: usize) -> Vec<Neighbor> {
        self.search_bounded(q, k, skip, f64::INFINITY)
    }

    /// Exact search assuming the k-th neighbor lies within squared distance
    /// `bound`; falls back to an unbounded search when it does not.
    fn search_bounded(&self, q: &[f64; 3], k: usize, skip: usize, bound: f64) -> Vec<Neighbor> {
        let mut best = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        self.search(0, 0.0, q, k, skip, bound, &mut best);
        if best.len() < k && bound.is_finite() && best.len() < self.len() - usize::from(skip < self.len()) {
            best.clear();
            self.search(0, 0.0, q, k, skip, f64::INFINITY, &mut best);
        }
        best
    }

    /// `lower` bounds the squared distance from `q` to anything under `node`.
    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        node: usize,
        lower: f64,
        q: &[f64; 3],
        k: usize,
        skip: usize,
        bound: f64,
        best: &mut Vec<Neighbor>,
    ) {
        let limit = |best: &Vec<Neighbor>| if best.len() == k { best[k - 1].dist_sq } else { bound };
        // `<=` keeps equal-distance candidates with lower ids reachable
        if lower > limit(best) {
            return;
        }
        let n = &self.nodes[node];
        match n.children {
            None => {
                for pos in n.start..n.end {
                    let d = dist_sq(q, &self.points[pos]);
                    if d <= limit(best) && pos != skip {
                        offer(best, k, Neighbor {
                            index: self.order[pos],
                            dist_sq: d,
                        });
                    }
                }
            }
            Some((l, r)) => {
                let (ln, rn) = (&self.nodes[l], &self.nodes[r]);
                let dl = box_dist_sq(q, &ln.lo, &ln.hi);
                let dr = box_dist_sq(q, &rn.lo, &rn.hi);
                if dl <= dr {
                    self.search(l, dl, q, k, skip, bound, best);
                    self.search(r, dr, q, k, skip, bound, best);
                } else {
                    self.search(r, dr, q, k, skip, bound, best);
                    self.search(l, dl, q, k, skip, bound, best);
                }
            }
        }
    }

    /// Runs `f(id, neighbors)` for every indexed point's `k` nearest
    /// neighbors (itself excluded) and returns the results indexed by id.
    ///
    /// Dense clouds go through a uniform grid: every point of a cell is
    /// answered from the 3×3×3 block of cells around it, and the answer is
    /// kept only when the k-th distance lies strictly inside the block.
    /// Everything else is a tree query. Results are identical either way.
    pub fn map_all_knn<R, F>(&self, k: usize, exec: Exec, f: F) -> Vec<R>
    where
        R: Send + Clone + Default,
        F: Fn(usize, &[Neighbor]) -> R + Sync,
    {
        self.map_all::<true, R, F>(k, exec, f)
    }

    /// Like [`KdTree::map_all_knn`] for callers that only need the sorted
    /// distances: `index` of the neighbors passed to `f` is unspecified.
    pub fn map_all_knn_distances<R, F>(&self, k: usize, exec: Exec, f: F) -> Vec<R>
    where
        R: Send + Clone + Default,
        F: Fn(usize, &[Neighbor]) -> R + Sync,
    {
        self.map_all::<false, R, F>(k, exec, f)
    }

    fn map_all<const IDS: bool, R, F>(&self, k: usize, exec: Exec, f: F) -> Vec<R>
    where
        R: Send + Clone + Default,
        F: Fn(usize, &[Neighbor]) -> R + Sync,
    {
        let mut result = vec![R::default(); self.len()];
        let pairs: Vec<(usize, R)> = match Grid::build(self, k) {
            Some(grid) => exec
                .map(&grid.chunks(), |&(c0, c1)| grid.answer_cells::<IDS, R, F>(self, k, c0, c1, &f))
                .into_iter()
                .flatten()
                .collect(),
            None => {
                let positions: Vec<usize> = (0..self.len()).collect();
                exec.map(&positions, |&pos| {
                    let nn = self.search_from(&self.points[pos], k, pos);
                    (self.order[pos], f(self.order[pos], &nn))
                })
            }
        };
        for (id, r) in pairs {
            result[id] = r;
        }
        result
    }
}

/// Points bucketed into cubic cells, sorted by packed cell key.
struct Grid {
    origin: [f64; 3],
    cell: f64,
    /// `(key, tree position)` sorted by key, then position.
    entries: Vec<(u64, usize)>,
    /// Start of each occupied cell in `entries`, plus a final end marker.
    cell_starts: Vec<usize>,
    /// Key of each occupied cell.
    cell_keys: Vec<u64>,
    /// Coordinates in `entries` order.
    pts: Vec<[f64; 3]>,
}

const KEY_BITS: u32 = 21;
const GRID_MIN_POINTS: usize = 512;
const GRID_SAMPLES: usize = 64;

impl Grid {
    fn pack(c: [u64; 3]) -> u64 {
        (c[0] << (2 * KEY_BITS)) | (c[1] << KEY_BITS) | c[2]
    }

    fn unpack(key: u64) -> [u64; 3] {
        let m = (1u64 << KEY_BITS) - 1;
        [key >> (2 * KEY_BITS), (key >> KEY_BITS) & m, key & m]
    }

    /// `None` when the cloud is too small, too sparse or too spread out for
    /// a grid to pay off.
    fn build(tree: &KdTree, k: usize) -> Option<Grid> {
        let n = tree.len();
        if k == 0 || n < GRID_MIN_POINTS.max(4 * k) {
            return None;
        }
        // cell edge from the median k-th neighbor distance of a sample
        let mut kth: Vec<f64> = (0..GRID_SAMPLES)
            .map(|i| {
                let pos = i * n / GRID_SAMPLES;
                tree.search_from(&tree.points[pos], k, pos)[k - 1].dist_sq
            })
            .collect();
        kth.sort_by(f64::total_cmp);
        let cell = kth[GRID_SAMPLES / 2].sqrt();
        if !(cell.is_finite() && cell > 0.0) {
            return None;
        }
        let root = &tree.nodes[0];
        let origin = root.lo;
        let limit = (1u64 << KEY_BITS) as f64 - 2.0;
        if (0..3).any(|a| (root.hi[a] - root.lo[a]) / cell >= limit) {
            return None;
        }
        let coord = |p: &[f64; 3]| -> [u64; 3] {
            // +1 keeps every neighbor index non-negative
            std::array::from_fn(|a| ((p[a] - origin[a]) / cell) as u64 + 1)
        };
        let mut entries: Vec<(u64, usize)> = tree
            .points
            .iter()
            .enumerate()
            .map(|(pos, p)| (Self::pack(coord(p)), pos))
            .collect();
        entries.sort_unstable();
        let mut cell_starts: Vec<usize> = (0..entries.len())
            .filter(|&i| i == 0 || entries[i].0 != entries[i - 1].0)
            .collect();
        // a grid that barely groups points is slower than the tree
        if cell_starts.len() * 2 > n {
            return None;
        }
        let cell_keys = cell_starts.iter().map(|&i| entries[i].0).collect();
        cell_starts.push(entries.len());
        let pts = entries.iter().map(|e| tree.points[e.1]).collect();
        Some(Grid {
            origin,
            cell,
            entries,
            cell_starts,
            cell_keys,
            pts,
        })
    }

    /// Cell index ranges of roughly equal work for parallel execution.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let cells = self.cell_starts.len() - 1;
        let step = 256;
        (0..cells).step_by(step).map(|c| (c, (c + step).min(cells))).collect()
    }

    fn answer_cells<const IDS: bool, R, F>(&self, tree: &KdTree, k: usize, c0: usize, c1: usize, f: &F) -> Vec<(usize, R)>
    where
        F: Fn(usize, &[Neighbor]) -> R,
    {
        let mut out = Vec::new();
        // candidates of the current block, one array per coordinate
        let (mut xs, mut ys, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        let mut cpos: Vec<usize> = Vec::new();
        let mut d2: Vec<f64> = Vec::new();
        let mut keyed: Vec<u128> = Vec::new();
        let mut dists: Vec<u64> = Vec::new();
        let mut bound_buf: Vec<f64> = Vec::new();
        let mut scratch: Vec<Neighbor> = Vec::new();
        // Cell keys are linear in the coordinates, so the start of each of
        // the nine rows around cell c only moves forward as c grows.
        let offsets: Vec<u64> = (0..9u64).map(|r| ((r / 3) << (2 * KEY_BITS)) + ((r % 3) << KEY_BITS)).collect();
        let shift = Self::pack([1, 1, 1]);
        let row_lo = |key: u64, r: usize| key + offsets[r] - shift;
        let first = self.cell_keys[c0];
        let mut cursor: Vec<usize> = (0..9)
            .map(|r| self.cell_keys.partition_point(|&k| k < row_lo(first, r)))
            .collect();
        for c in c0..c1 {
            let (s, e) = (self.cell_starts[c], self.cell_starts[c + 1]);
            let key = self.cell_keys[c];
            let [cx, cy, cz] = Self::unpack(key);
            xs.clear();
            ys.clear();
            zs.clear();
            cpos.clear();
            for (r, cur) in cursor.iter_mut().enumerate() {
                let lo = row_lo(key, r);
                while self.cell_keys.get(*cur).is_some_and(|&k| k < lo) {
                    *cur += 1;
                }
                let mut end = *cur;
                while self.cell_keys.get(end).is_some_and(|&k| k <= lo + 2) {
                    end += 1;
                }
                let range = self.cell_starts[*cur]..self.cell_starts[end];
                for (v, &(_, p)) in self.pts[range.clone()].iter().zip(&self.entries[range]) {
                    xs.push(v[0]);
                    ys.push(v[1]);
                    zs.push(v[2]);
                    cpos.push(p);
                }
            }
            d2.resize(xs.len(), 0.0);
            // distance from a point in this cell to anything outside the block
            let lo: [f64; 3] = std::array::from_fn(|a| self.origin[a] + ([cx, cy, cz][a] as f64 - 2.0) * self.cell);
            let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + 3.0 * self.cell);
            for &(_, pos) in &self.entries[s..e] {
                let q = &tree.points[pos];
                let id = tree.order[pos];
                let margin = (0..3)
                    .map(|a| (q[a] - lo[a]).min(hi[a] - q[a]))
                    .fold(f64::INFINITY, f64::min)
                    - 1e-6 * self.cell;
                // only points closer than the margin can belong to an answer
                // that is provably complete
                let reach = if margin > 0.0 { margin * margin } else { 0.0 };
                for (((d, x), y), z) in d2.iter_mut().zip(&xs).zip(&ys).zip(&zs) {
                    let (dx, dy, dz) = (q[0] - x, q[1] - y, q[2] - z);
                    *d = dx * dx + dy * dy + dz * dz;
                }
                // non-negative doubles order like their bit patterns, so
                // (bits, id) keys sort by distance then id
                let found = if IDS {
                    keyed.clear();
                    for (j, &d) in d2.iter().enumerate() {
                        if d < reach && cpos[j] != pos {
                            keyed.push(((d.to_bits() as u128) << 64) | tree.order[cpos[j]] as u128);
                        }
                    }
                    keyed.len() >= k && {
                        if keyed.len() > 2 * k {
                            keyed.select_nth_unstable(k - 1);
                            keyed.truncate(k);
                        }
                        keyed.sort_unstable();
                        scratch.clear();
                        scratch.extend(keyed[..k].iter().map(|&key| Neighbor {
                            index: key as u64 as usize,
                            dist_sq: f64::from_bits((key >> 64) as u64),
                        }));
                        true
                    }
                } else {
                    dists.clear();
                    for (j, &d) in d2.iter().enumerate() {
                        if d < reach && cpos[j] != pos {
                            dists.push(d.to_bits());
                        }
                    }
                    dists.len() >= k && {
                        if dists.len() > 2 * k {
                            dists.select_nth_unstable(k - 1);
                            dists.truncate(k);
                        }
                        dists.sort_unstable();
                        scratch.clear();
                        scratch.extend(dists[..k].iter().map(|&bits| Neighbor {
                            index: usize::MAX,
                            dist_sq: f64::from_bits(bits),
                        }));
                        true
                    }
                };
                if found {
                    out.push((id, f(id, &scratch)));
                } else {
                    // the k-th closest block candidate bounds the answer
                    let mut bound = f64::INFINITY;
                    if d2.len() > k {
                        bound_buf.clear();
                        bound_buf.extend_from_slice(&d2);
                        let (_, b, _) = bound_buf.select_nth_unstable_by(k, f64::total_cmp);
                        bound = *b;
                    }
                    let nn = tree.search_bounded(q, k, pos, bound);
                    out.push((id, f(id, &nn)));
                }
            }
        }
        out
    }
}

#[inline]
fn before(a: &Neighbor, b: &Neighbor) -> bool {
    a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.index < b.index)
}

/// Inserts `n` into the candidate list sorted by `(distance, id)`, keeping
/// at most `k`.
#[inline]
fn offer(best: &mut Vec<Neighbor>, k: usize, n: Neighbor) {
    if best.len() == k {
        if !before(&n, &best[k - 1]) {
            return;
        }
        best.pop();
    }
    // new candidates usually land near the back
    let mut i = best.len();
    best.push(n);
    while i > 0 && before(&n, &best[i - 1]) {
        best[i] = best[i - 1];
        i -= 1;
    }
    best[i] = n;
}

fn build_rec(items: &mut [([f64; 3], usize)], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let id = nodes.len();
    nodes.push(Node {
        lo,
        hi,
        children: None,
        start: offset,
        end: offset + items.len(),
    });
    if items.len() <= LEAF_SIZE {
        return id;
    }
    // split on the axis of widest spread
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));

    let (l, r) = items.split_at_mut(mid);
    let left = build_rec(l, offset, nodes);
    let right = build_rec(r, offset + mid, nodes);
    nodes[id].children = Some((left, right));
    id
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_index_errors() {
        let t = KdTree::build(&[]);
        assert_eq!(t.knn([0.0; 3], 1, None), Err(FilterError::EmptyIndex));
    }

    #[test]
    fn collinear_query() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let t = KdTree::build(&pts);
        let ids: Vec<usize> = t.knn_of_point(2, 2).unwrap().iter().map(|n| n.index).collect();
        // x=1 at distance 1, then a tie at distance 2 between x=0 and x=4:
        // ties go to the lower id.
        assert_eq!(ids, vec![1, 0]);
    }

    #[test]
    fn self_exclusion_returns_other_point() {
        let pts = [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let t = KdTree::build(&pts);
        let n = t.knn(pts[0], 1, Some(0)).unwrap();
        assert_eq!(n[0].index, 1);
        let n = t.knn(pts[0], 1, None).unwrap();
        assert_eq!((n[0].index, n[0].dist_sq), (0, 0.0));
    }

    #[test]
    fn duplicates_break_ties_by_id() {
        let pts = vec![[1.0f32, 1.0, 1.0]; 40];
        let t = KdTree::build(&pts);
        let ids: Vec<usize> = t.knn_of_point(17, 5).unwrap().iter().map(|n| n.index).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn short_index_returns_what_exists() {
        let t = KdTree::build(&[[0.0; 3], [1.0; 3]]);
        assert_eq!(t.knn_of_point(0, 5).unwrap().len(), 1);
    }

    fn all_by_tree(t: &KdTree, k: usize) -> Vec<Vec<(usize, u64)>> {
        (0..t.len())
            .map(|i| t.knn_of_point(i, k).unwrap().iter().map(|n| (n.index, n.dist_sq.to_bits())).collect())
            .collect()
    }

    fn check_all(pts: &[[f32; 3]], k: usize) {
        let t = KdTree::build(pts);
        if k >= 6 {
            assert!(Grid::build(&t, k).is_some(), "grid path not taken");
        }
        let want = all_by_tree(&t, k);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = t.map_all_knn(k, exec, |_, nn| nn.iter().map(|n| (n.index, n.dist_sq.to_bits())).collect::<Vec<_>>());
            assert_eq!(got, want);
            let dists = t.map_all_knn_distances(k, exec, |_, nn| nn.iter().map(|n| n.dist_sq.to_bits()).collect::<Vec<_>>());
            let want_dists: Vec<Vec<u64>> = want.iter().map(|v| v.iter().map(|p| p.1).collect()).collect();
            assert_eq!(dists, want_dists);
        }
    }

    #[test]
    fn grid_matches_tree_on_a_noisy_surface() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<[f32; 3]> = (0..6000)
            .map(|_| {
                let x: f32 = rng.random_range(-0.5..0.5);
                let y: f32 = rng.random_range(-0.5..0.5);
                [x, y, 0.1 * (4.0 * x).sin() + rng.random_range(-0.002..0.002)]
            })
            .collect();
        // duplicates, a dense clump and far outliers
        for i in 0..200 {
            pts.push(pts[i * 7]);
        }
        for _ in 0..300 {
            pts.push([0.2 + rng.random_range(-1e-4..1e-4), 0.1, 0.0]);
        }
        for _ in 0..40 {
            pts.push([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
        }
        check_all(&pts, 20);
        check_all(&pts, 1);
    }

    #[test]
    fn grid_matches_tree_on_a_lattice() {
        // Exact ties everywhere.
        let pts: Vec<[f32; 3]> = (0..20 * 20 * 4)
            .map(|i| [(i % 20) as f32 * 0.01, (i / 20 % 20) as f32 * 0.01, (i / 400) as f32 * 0.01])
            .collect();
        check_all(&pts, 20);
        check_all(&pts, 6);
    }

    #[test]
    fn grid_matches_tree_on_uniform_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f32; 3]> = (0..4000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        check_all(&pts, 20);
    }
}
