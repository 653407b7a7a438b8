//! Exact k-nearest-neighbour search over row-major point sets.

/// Points per leaf.
const LEAF_SIZE: usize = 16;

/// Squared Euclidean distance. Both the tree and the brute-force search use
/// this exact function, so their results agree bit for bit.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree borrowing its points.
#[derive(Debug)]
pub struct KdTree<'a> {
    data: &'a [f64],
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Sorted list of the `k` best squared distances seen so far.
struct Best {
    k: usize,
    dists: Vec<f64>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            dists: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> f64 {
        if self.dists.len() < self.k {
            f64::INFINITY
        } else {
            self.dists[self.k - 1]
        }
    }

    fn offer(&mut self, d2: f64) {
        if d2 >= self.worst() {
            return;
        }
        let pos = self.dists.partition_point(|v| *v <= d2);
        self.dists.insert(pos, d2);
        self.dists.truncate(self.k);
    }
}

impl<'a> KdTree<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        let n = data.len() / dim;
        let mut tree = Self {
            data,
            dim,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = (0..self.dim)
            .map(|a| {
                let (lo, hi) = self.order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &i| {
                    let v = self.data[i * self.dim + a];
                    (acc.0.min(v), acc.1.max(v))
                });
                (a, hi - lo)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(a, _)| a)
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let (data, dim) = (self.data, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            data[i * dim + axis].total_cmp(&data[j * dim + axis])
        });
        let value = data[self.order[mid] * dim + axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Squared distance from `query` to its `k`-th nearest point, skipping the
    /// point with index `exclude`. `None` if fewer than `k` candidates exist.
    pub fn kth_sq_dist(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Option<f64> {
        if self.nodes.is_empty() || k == 0 {
            return None;
        }
        let mut best = Best::new(k);
        self.search(0, query, exclude, &mut best);
        (best.dists.len() == k).then(|| best.dists[k - 1])
    }

    fn search(&self, node: usize, q: &[f64], exclude: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) != exclude {
                        best.offer(sq_dist(q, self.point(i)));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, best);
                if diff * diff <= best.worst() {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }
}

/// `O(n)` reference for [`KdTree::kth_sq_dist`].
pub fn brute_force_kth_sq_dist(data: &[f64], dim: usize, query: &[f64], k: usize, exclude: Option<usize>) -> Option<f64> {
    let mut best = Best::new(k);
    for (i, p) in data.chunks_exact(dim).enumerate() {
        if Some(i) != exclude {
            best.offer(sq_dist(query, p));
        }
    }
    (k > 0 && best.dists.len() == k).then(|| best.dists[k - 1])
}
