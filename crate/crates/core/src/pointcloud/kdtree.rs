//! Exact k-nearest-neighbour search over 3D positions.
//!
//! Results are ordered by `(squared distance, original index)`, so ties are
//! always broken towards the lower index and queries agree bit-for-bit with
//! an exhaustive scan.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Euclidean distance.
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Static k-d tree. Points are copied into tree order for locality.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Squared distance with the same operation order the index uses; exposed so
/// exhaustive oracles compare identical floating-point values.
pub fn squared_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    dist2(&[a.x, a.y, a.z], &[b.x, b.y, b.z])
}

impl SpatialIndex {
    /// Builds an index over `positions`. Returns `None` when empty.
    pub fn new(positions: &[Vector3<f64>]) -> Option<Self> {
        if positions.is_empty() {
            return None;
        }
        assert!(positions.len() < u32::MAX as usize, "too many points");
        let mut items: Vec<([f64; 3], u32)> = positions
            .iter()
            .enumerate()
            .map(|(i, p)| ([p.x, p.y, p.z], i as u32))
            .collect();
        let mut nodes = Vec::with_capacity(2 * positions.len() / LEAF_SIZE + 1);
        build(&mut items, 0, &mut nodes);
        let (points, ids) = items.into_iter().unzip();
        Some(Self { points, ids, nodes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Original indices in tree order: neighbours in this sequence are close
    /// in space, so it is a cache-friendly order to issue queries in.
    pub fn tree_order(&self) -> &[u32] {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query` (fewer if the index is smaller).
    pub fn nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        let mut heap = KnnSet::new(k.min(self.len()), f64::INFINITY);
        if k > 0 {
            self.search(0, &[query.x, query.y, query.z], [0.0; 3], &mut heap);
        }
        heap.items
            .into_iter()
            .map(|(d2, index)| Neighbor {
                index: index as usize,
                distance: d2.sqrt(),
            })
            .collect()
    }

    /// Indices of the `k` nearest points, written into `out` (cleared first).
    /// Allocation-free variant of [`nearest`](Self::nearest) for hot loops.
    pub fn nearest_indices_into(&self, query: &Vector3<f64>, k: usize, out: &mut Vec<usize>) {
        let mut heap = KnnSet::new(k.min(self.len()), f64::INFINITY);
        if k > 0 {
            self.search(0, &[query.x, query.y, query.z], [0.0; 3], &mut heap);
        }
        out.clear();
        out.extend(heap.items.iter().map(|&(_, i)| i as usize));
    }

    /// The closest point within `max_distance`, if any. Returns index and
    /// squared distance.
    pub fn nearest_within(&self, query: &Vector3<f64>, max_distance: f64) -> Option<(usize, f64)> {
        let q = [query.x, query.y, query.z];
        let bound = max_distance * max_distance;
        let mut best: Option<(f64, u32)> = None;
        self.search_one(0, &q, [0.0; 3], bound, &mut best);
        best.map(|(d2, i)| (i as usize, d2))
    }

    // `off` holds the per-axis distance from the query to the current cell;
    // `dist2(off, 0)` uses the same operation order as point distances, so it
    // never exceeds the computed distance of any point inside the cell.
    fn search(&self, node: usize, q: &[f64; 3], off: [f64; 3], heap: &mut KnnSet) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let range = start as usize..end as usize;
                for (p, &id) in self.points[range.clone()].iter().zip(&self.ids[range]) {
                    heap.offer(dist2(p, q), id);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near as usize, q, off, heap);
                let mut far_off = off;
                far_off[dim as usize] = diff;
                // Equal distance must still be visited so index tie-breaks hold.
                if dist2(&far_off, &[0.0; 3]) <= heap.worst() {
                    self.search(far as usize, q, far_off, heap);
                }
            }
        }
    }

    fn search_one(&self, node: usize, q: &[f64; 3], off: [f64; 3], bound: f64, best: &mut Option<(f64, u32)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let range = start as usize..end as usize;
                for (p, &id) in self.points[range.clone()].iter().zip(&self.ids[range]) {
                    let d2 = dist2(p, q);
                    if d2 > bound {
                        continue;
                    }
                    let better = match *best {
                        None => true,
                        Some((bd, bi)) => d2 < bd || (d2 == bd && id < bi),
                    };
                    if better {
                        *best = Some((d2, id));
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search_one(near as usize, q, off, bound, best);
                let worst = best.map_or(bound, |(d, _)| d);
                let mut far_off = off;
                far_off[dim as usize] = diff;
                if dist2(&far_off, &[0.0; 3]) <= worst {
                    self.search_one(far as usize, q, far_off, bound, best);
                }
            }
        }
    }
}

fn build(items: &mut [([f64; 3], u32)], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    let leaf = Node::Leaf {
        start: offset as u32,
        end: (offset + items.len()) as u32,
    };
    if items.len() <= LEAF_SIZE {
        nodes.push(leaf);
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[dim] - lo[dim] <= 0.0 {
        // All points coincide.
        nodes.push(leaf);
        return id;
    }
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[dim].total_cmp(&b.0[dim]).then(a.1.cmp(&b.1)));
    let value = items[mid].0[dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lower, upper) = items.split_at_mut(mid);
    let left = build(lower, offset, nodes);
    let right = build(upper, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    id
}

/// Bounded sorted candidate list ordered by `(d2, index)`.
struct KnnSet {
    k: usize,
    bound: f64,
    items: Vec<(f64, u32)>,
}

impl KnnSet {
    fn new(k: usize, bound: f64) -> Self {
        Self {
            k,
            bound,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            self.bound
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, id: u32) {
        let before = |a: (f64, u32), b: (f64, u32)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        let item = (d2, id);
        if self.items.len() == self.k {
            if self.k == 0 || !before(item, self.items[self.k - 1]) {
                return;
            }
            self.items.pop();
        }
        // Insertion from the back keeps the list sorted.
        let mut pos = self.items.len();
        self.items.push(item);
        while pos > 0 && before(item, self.items[pos - 1]) {
            self.items[pos] = self.items[pos - 1];
            pos -= 1;
        }
        self.items[pos] = item;
    }
}
