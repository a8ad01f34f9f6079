//! Static 3-d tree for fixed-radius neighbor queries.

#[derive(Debug, Clone)]
struct Node {
    /// Index into `points`.
    point: u32,
    axis: u8,
    left: u32,
    right: u32,
}

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: u32,
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(&points, &mut order[..], &mut nodes);
        Self { points, nodes, root }
    }

    fn build_rec(points: &[[f64; 3]], idx: &mut [u32], nodes: &mut Vec<Node>) -> u32 {
        if idx.is_empty() {
            return NIL;
        }
        // split on the axis of largest spread
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in idx.iter() {
            let p = points[i as usize];
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let me = nodes.len() as u32;
        nodes.push(Node {
            point: idx[mid],
            axis: axis as u8,
            left: NIL,
            right: NIL,
        });
        let (left, rest) = idx.split_at_mut(mid);
        let left = Self::build_rec(points, left, nodes);
        let right = Self::build_rec(points, &mut rest[1..], nodes);
        nodes[me as usize].left = left;
        nodes[me as usize].right = right;
        me
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Appends to `out` the indices of all points within `radius` of `q`
    /// (inclusive).
    pub fn within_radius(&self, q: [f64; 3], radius: f64, out: &mut Vec<usize>) {
        let r2 = radius * radius;
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if n == NIL {
                continue;
            }
            let node = &self.nodes[n as usize];
            let p = self.points[node.point as usize];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d2 <= r2 {
                out.push(node.point as usize);
            }
            let diff = q[node.axis as usize] - p[node.axis as usize];
            let (near, far) = if diff < 0.0 {
                (node.left, node.right)
            } else {
                (node.right, node.left)
            };
            stack.push(near);
            if diff * diff <= r2 {
                stack.push(far);
            }
        }
    }
}
