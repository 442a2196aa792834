//! Supernode-to-supernode geodesic distances (graph shortest paths over
//! mesh edges) and the thresholded additive attention mask built from them.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::mesh::EdgeGraph;
use crate::tokenize::Partitioning;

/// Large negative sentinel standing in for -inf ahead of a softmax; rows
/// always keep their diagonal at the allowed value, so no row can be fully
/// masked.
pub const MASK_DISALLOWED: f64 = -1e9;

/// Additive value for allowed entries. Any constant works (softmax is
/// shift-invariant per row); zero is the default, one reproduces the
/// formula as published.
pub const MASK_ALLOWED_DEFAULT: f64 = 0.0;

/// Symmetric P x P matrix of root-to-root shortest-path distances.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicMatrix {
    dist: Mat,
}

impl GeodesicMatrix {
    pub fn p(&self) -> usize {
        self.dist.rows()
    }

    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.dist.at(p, q)
    }

    pub fn as_mat(&self) -> &Mat {
        &self.dist
    }

    pub fn from_mat(dist: Mat) -> Result<Self> {
        if dist.rows() != dist.cols() {
            return Err(Error::validation("geodesic matrix must be square"));
        }
        Ok(GeodesicMatrix { dist })
    }

    /// Median of the off-diagonal entries (finite ones only).
    pub fn median_off_diagonal(&self) -> f64 {
        let p = self.p();
        let mut vals: Vec<f64> = Vec::with_capacity(p * p - p);
        for i in 0..p {
            for j in 0..p {
                if i != j && self.dist.at(i, j).is_finite() {
                    vals.push(self.dist.at(i, j));
                }
            }
        }
        if vals.is_empty() {
            return 0.0;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[vals.len() / 2]
    }
}

/// Shortest-path distances between all pairs of patch roots, one Dijkstra
/// per root; infinity across mesh components.
pub fn supernode_geodesics(eg: &EdgeGraph, part: &Partitioning) -> Result<GeodesicMatrix> {
    let n = eg.n();
    let roots = part.roots();
    for &r in roots {
        if r >= n {
            return Err(Error::validation(format!("root {r} out of range")));
        }
    }
    let p = roots.len();
    let mut dist = Mat::zeros(p, p);
    for (i, &r) in roots.iter().enumerate() {
        let d = dijkstra_from(eg, r);
        for (j, &q) in roots.iter().enumerate() {
            dist.set(i, j, d[q]);
        }
    }
    // enforce exact symmetry (floating sums along reversed paths agree, but
    // be safe) and a zero diagonal
    for i in 0..p {
        dist.set(i, i, 0.0);
        for j in 0..i {
            let v = dist.at(i, j).min(dist.at(j, i));
            dist.set(i, j, v);
            dist.set(j, i, v);
        }
    }
    Ok(GeodesicMatrix { dist })
}

fn dijkstra_from(eg: &EdgeGraph, source: usize) -> Vec<f64> {
    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other
                .0
                .partial_cmp(&self.0)
                .unwrap()
                .then(other.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    let mut dist = vec![f64::INFINITY; eg.n()];
    dist[source] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in eg.neighbors(u) {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

/// P x P additive attention mask: entries at geodesic distance within
/// `radius` carry `allowed_value`, everything else the -inf sentinel. The
/// diagonal is always allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    mask: Mat,
}

impl AttentionMask {
    pub fn p(&self) -> usize {
        self.mask.rows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.mask
    }

    pub fn is_allowed(&self, p: usize, q: usize) -> bool {
        self.mask.at(p, q) != MASK_DISALLOWED
    }

    pub fn n_allowed(&self) -> usize {
        let p = self.p();
        (0..p)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_allowed(i, j))
            .count()
    }

    /// A mask that allows everything (radius = infinity).
    pub fn unmasked(p: usize) -> AttentionMask {
        AttentionMask {
            mask: Mat::from_fn(p, p, |_, _| MASK_ALLOWED_DEFAULT),
        }
    }
}

/// Threshold the geodesic matrix into an additive mask.
pub fn build_mask(g: &GeodesicMatrix, radius: f64) -> Result<AttentionMask> {
    build_mask_with(g, radius, MASK_ALLOWED_DEFAULT)
}

/// As [`build_mask`] with an explicit allowed-entry constant (use 1.0 to
/// reproduce the published form; the post-softmax result is identical).
pub fn build_mask_with(g: &GeodesicMatrix, radius: f64, allowed_value: f64) -> Result<AttentionMask> {
    if radius < 0.0 || radius.is_nan() {
        return Err(Error::domain(format!(
            "mask radius must be >= 0 (or infinite to disable), got {radius}"
        )));
    }
    let p = g.p();
    let mask = Mat::from_fn(p, p, |i, j| {
        if i == j || g.at(i, j) <= radius {
            allowed_value
        } else {
            MASK_DISALLOWED
        }
    });
    Ok(AttentionMask { mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{edge_graph, shapes, Mesh};
    use crate::tokenize::Partitioning;

    fn path_mesh(k: usize) -> Mesh {
        // strip of triangles along the x axis; vertices 2i on y=0, 2i+1 on y=1
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        for i in 0..=k {
            verts.push([i as f64, 0.0, 0.0]);
            verts.push([i as f64, 1.0, 0.0]);
        }
        for i in 0..k {
            let a = 2 * i;
            faces.push([a, a + 2, a + 1]);
            faces.push([a + 1, a + 2, a + 3]);
        }
        Mesh::new(verts, faces).unwrap()
    }

    #[test]
    fn geodesic_diagonal_zero_and_symmetric() {
        let m = shapes::icosphere(2, 1.0);
        let eg = edge_graph(&m);
        let n = m.n_vertices();
        let part = Partitioning::new(vec![0, 50, 100], {
            // nearest-of-three split just to get a valid structure
            let mut a = vec![0; n];
            for (i, item) in a.iter_mut().enumerate() {
                *item = [0usize, 50, 100]
                    .iter()
                    .enumerate()
                    .min_by(|(_, &x), (_, &y)| {
                        let dx = crate::mesh::sub(m.vertex(i), m.vertex(x));
                        let dy = crate::mesh::sub(m.vertex(i), m.vertex(y));
                        crate::mesh::dot(dx, dx).partial_cmp(&crate::mesh::dot(dy, dy)).unwrap()
                    })
                    .map(|(idx, _)| idx)
                    .unwrap();
            }
            a
        })
        .unwrap();
        let g = supernode_geodesics(&eg, &part).unwrap();
        for i in 0..3 {
            assert_eq!(g.at(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(g.at(i, j), g.at(j, i));
                if i != j {
                    assert!(g.at(i, j) > 0.0 && g.at(i, j).is_finite());
                }
            }
        }
        // triangle inequality
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    assert!(g.at(a, b) <= g.at(a, c) + g.at(c, b) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn path_of_unit_edges_has_hand_counted_distance() {
        let m = path_mesh(5);
        let eg = edge_graph(&m);
        let n = m.n_vertices();
        // roots at the two ends of the bottom row: vertices 0 and 10
        let assignment: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        let part = Partitioning::new(vec![0, 10], assignment).unwrap();
        let g = supernode_geodesics(&eg, &part).unwrap();
        assert!((g.at(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matches_floyd_warshall_on_small_meshes() {
        for mesh in [shapes::icosphere(1, 1.0), shapes::uv_sphere(4, 7, 1.0)] {
            let eg = edge_graph(&mesh);
            let n = mesh.n_vertices();
            // dense oracle
            let mut d = vec![vec![f64::INFINITY; n]; n];
            for (i, row) in d.iter_mut().enumerate() {
                row[i] = 0.0;
            }
            for i in 0..n {
                for &(j, w) in eg.neighbors(i) {
                    d[i][j] = w;
                }
            }
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let via = d[i][k] + d[k][j];
                        if via < d[i][j] {
                            d[i][j] = via;
                        }
                    }
                }
            }
            let roots: Vec<usize> = (0..n.min(8)).collect();
            let assignment: Vec<usize> = (0..n).map(|i| i.min(roots.len() - 1)).collect();
            let part = Partitioning::new(roots.clone(), assignment).unwrap();
            let g = supernode_geodesics(&eg, &part).unwrap();
            for (i, &ri) in roots.iter().enumerate() {
                for (j, &rj) in roots.iter().enumerate() {
                    assert!(
                        (g.at(i, j) - d[ri][rj]).abs() <= 1e-9 * d[ri][rj].max(1.0),
                        "({i},{j}): {} vs {}",
                        g.at(i, j),
                        d[ri][rj]
                    );
                }
            }
        }
    }

    #[test]
    fn mask_radius_extremes() {
        let dist = Mat::from_vec(3, 3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.5, 2.0, 1.5, 0.0]);
        let g = GeodesicMatrix::from_mat(dist).unwrap();
        let all = build_mask(&g, f64::INFINITY).unwrap();
        assert_eq!(all.n_allowed(), 9);
        let none = build_mask(&g, 0.0).unwrap();
        assert_eq!(none.n_allowed(), 3); // diagonal only
        for i in 0..3 {
            assert!(none.is_allowed(i, i));
        }
        let mid = build_mask(&g, 1.0).unwrap();
        assert!(mid.is_allowed(0, 1) && !mid.is_allowed(0, 2));
        assert!(build_mask(&g, -1.0).is_err());
    }

    #[test]
    fn mask_monotone_in_radius() {
        let m = shapes::icosphere(2, 1.0);
        let eg = edge_graph(&m);
        let ops = crate::mesh::cotan_laplacian(&crate::mesh::normalize_mesh(&m).unwrap()).unwrap();
        let dg = crate::tokenize::edge_distances(&ops, crate::tokenize::ClampMode::Exclude);
        let part = crate::tokenize::root_node_partition(&dg, 10, 0, 10).unwrap();
        let g = supernode_geodesics(&eg, &part).unwrap();
        let radii = [0.0, 0.3, 0.8, 1.5, f64::INFINITY];
        let masks: Vec<_> = radii.iter().map(|&r| build_mask(&g, r).unwrap()).collect();
        for w in masks.windows(2) {
            for i in 0..10 {
                for j in 0..10 {
                    if w[0].is_allowed(i, j) {
                        assert!(w[1].is_allowed(i, j), "allowed set must grow with radius");
                    }
                }
            }
        }
        // median radius keeps roughly half the off-diagonals
        let med = build_mask(&g, g.median_off_diagonal()).unwrap();
        let off_allowed = med.n_allowed() - 10;
        let frac = off_allowed as f64 / 90.0;
        assert!(frac > 0.3 && frac < 0.7, "median mask keeps {frac}");
    }
}
