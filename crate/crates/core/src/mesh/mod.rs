//! Triangle meshes, their validation, and the discrete operators built on
//! them: cotangent Laplacian, lumped mass matrix, and the edge-length graph.

mod parse;
mod ply_write;
pub mod shapes;

pub use parse::load_mesh;
pub use ply_write::{categorical_color, diverging_color, write_off, write_ply_colored};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// A validated triangle mesh.
///
/// Invariants: at least one face, all face indices in range, faces have
/// three distinct corners, and every vertex is referenced by some face.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if faces.is_empty() {
            return Err(Error::validation("mesh has no faces"));
        }
        let mut referenced = vec![false; n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(Error::validation(format!(
                        "face {fi} references vertex {v}, but the mesh has {n} vertices"
                    )));
                }
                referenced[v] = true;
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::validation(format!(
                    "face {fi} is degenerate (repeated vertex index): {f:?}"
                )));
            }
        }
        if let Some(v) = referenced.iter().position(|&r| !r) {
            return Err(Error::validation(format!(
                "vertex {v} is not referenced by any face"
            )));
        }
        Ok(Mesh { vertices, faces })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        self.vertices[i]
    }

    /// FNV-1a hash of the exact vertex/face payload; used as the cache key.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&(self.vertices.len() as u64).to_le_bytes());
        eat(&(self.faces.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v {
                eat(&c.to_le_bytes());
            }
        }
        for f in &self.faces {
            for &i in f {
                eat(&(i as u64).to_le_bytes());
            }
        }
        h
    }

    /// Apply a rigid motion (rotation matrix rows + translation).
    pub fn transformed(&self, rot: &[[f64; 3]; 3], trans: [f64; 3]) -> Mesh {
        let vertices = self
            .vertices
            .iter()
            .map(|v| {
                let mut out = [0.0; 3];
                for (r, row) in rot.iter().enumerate() {
                    out[r] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + trans[r];
                }
                out
            })
            .collect();
        Mesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    /// Relabel vertices by `perm`, where `perm[old] = new`. Face corner
    /// order is preserved.
    pub fn permuted(&self, perm: &[usize]) -> Result<Mesh> {
        let n = self.n_vertices();
        if perm.len() != n {
            return Err(Error::validation("permutation length mismatch"));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::validation("not a permutation"));
            }
            seen[p] = true;
        }
        let mut vertices = vec![[0.0; 3]; n];
        for (old, &new) in perm.iter().enumerate() {
            vertices[new] = self.vertices[old];
        }
        let faces = self
            .faces
            .iter()
            .map(|f| [perm[f[0]], perm[f[1]], perm[f[2]]])
            .collect();
        Mesh::new(vertices, faces)
    }
}

/// Weak-form Laplacian plus lumped mass diagonal for one mesh.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    /// Sparse symmetric positive-semidefinite Laplacian.
    pub l: CsrMatrix,
    /// Diagonal of the lumped mass matrix (per-vertex area), all > 0.
    pub w: Vec<f64>,
}

impl OperatorSet {
    pub fn n(&self) -> usize {
        self.l.n()
    }

    pub fn total_mass(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Undirected mesh edge graph with Euclidean edge lengths.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    adj: Vec<Vec<(usize, f64)>>,
    n_edges: usize,
}

impl EdgeGraph {
    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    /// Connected components, each a sorted vertex list; components ordered
    /// by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        components_of(self.adj.len(), |i| self.adj[i].iter().map(|&(j, _)| j))
    }
}

pub(crate) fn components_of<I>(n: usize, neighbors: impl Fn(usize) -> I) -> Vec<Vec<usize>>
where
    I: Iterator<Item = usize>,
{
    let mut comp = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for v in neighbors(u) {
                if comp[v] == usize::MAX {
                    comp[v] = id;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Center the vertex centroid at the origin and scale the farthest vertex
/// to unit norm.
pub fn normalize_mesh(m: &Mesh) -> Result<Mesh> {
    let n = m.n_vertices() as f64;
    let mut c = [0.0; 3];
    for v in m.vertices() {
        for k in 0..3 {
            c[k] += v[k];
        }
    }
    for ck in &mut c {
        *ck /= n;
    }
    let mut max_r = 0.0f64;
    for v in m.vertices() {
        let d = [(v[0] - c[0]), (v[1] - c[1]), (v[2] - c[2])];
        max_r = max_r.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
    }
    if max_r < 1e-15 {
        return Err(Error::Degenerate(
            "all vertices coincide; cannot scale to unit sphere".into(),
        ));
    }
    let vertices = m
        .vertices()
        .iter()
        .map(|v| {
            [
                (v[0] - c[0]) / max_r,
                (v[1] - c[1]) / max_r,
                (v[2] - c[2]) / max_r,
            ]
        })
        .collect();
    Ok(Mesh {
        vertices,
        faces: m.faces().to_vec(),
    })
}

const COT_CLAMP: f64 = 1e4;
const DEGENERATE_AREA: f64 = 1e-12;

/// Assemble the cotangent Laplacian and barycentric lumped mass matrix.
///
/// Off-diagonal L_ij = -(cot a + cot b)/2 over the faces sharing edge (i,j);
/// diagonals make row sums zero. W_ii is one third of the incident triangle
/// area. Cotangents are clamped to +-1e4 and near-zero-area triangles are
/// counted and reported through a warning.
pub fn cotan_laplacian(m: &Mesh) -> Result<OperatorSet> {
    let n = m.n_vertices();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(m.n_faces() * 12);
    let mut w = vec![0.0f64; n];
    let mut degenerate = 0usize;
    let mut total_area = 0.0;

    for f in m.faces() {
        let p = [m.vertex(f[0]), m.vertex(f[1]), m.vertex(f[2])];
        let area = triangle_area(&p);
        total_area += area;
        if area < DEGENERATE_AREA {
            degenerate += 1;
        }
        for corner in 0..3 {
            let i = f[corner];
            let j = f[(corner + 1) % 3];
            let k = f[(corner + 2) % 3];
            // cotangent at `i`, opposite edge (j, k)
            let u = sub(p[(corner + 1) % 3], p[corner]);
            let v = sub(p[(corner + 2) % 3], p[corner]);
            let cross = norm(cross3(u, v));
            let cot = if cross > 0.0 {
                (dot(u, v) / cross).clamp(-COT_CLAMP, COT_CLAMP)
            } else {
                COT_CLAMP
            };
            let half = 0.5 * cot;
            triplets.push((j, k, -half));
            triplets.push((k, j, -half));
            triplets.push((j, j, half));
            triplets.push((k, k, half));
            w[i] += area / 3.0;
        }
    }

    if degenerate > 0 {
        log::warn!(
            "{degenerate} of {} triangles have area < {DEGENERATE_AREA}; cotangents clamped",
            m.n_faces()
        );
    }
    if total_area <= 0.0 {
        return Err(Error::Degenerate("mesh has zero total area".into()));
    }
    let floor = DEGENERATE_AREA * total_area / n as f64;
    for wi in &mut w {
        if *wi < floor {
            log::warn!("vertex mass below floor; clamping to {floor:.3e}");
            *wi = floor;
        }
    }

    Ok(OperatorSet {
        l: CsrMatrix::from_triplets(n, &triplets),
        w,
    })
}

/// One undirected entry per unique mesh edge, weighted by Euclidean length.
pub fn edge_graph(m: &Mesh) -> EdgeGraph {
    let n = m.n_vertices();
    let mut seen = std::collections::BTreeSet::new();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut n_edges = 0;
    for f in m.faces() {
        for corner in 0..3 {
            let a = f[corner];
            let b = f[(corner + 1) % 3];
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                let d = norm(sub(m.vertex(a), m.vertex(b))).max(1e-12);
                adj[a].push((b, d));
                adj[b].push((a, d));
                n_edges += 1;
            }
        }
    }
    for nb in &mut adj {
        nb.sort_by_key(|&(j, _)| j);
    }
    EdgeGraph { adj, n_edges }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn triangle_area(p: &[[f64; 3]; 3]) -> f64 {
    0.5 * norm(cross3(sub(p[1], p[0]), sub(p[2], p[0])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> Mesh {
        Mesh::new(
            vec![
                [1.0, 1.0, 1.0],
                [1.0, -1.0, -1.0],
                [-1.0, 1.0, -1.0],
                [-1.0, -1.0, 1.0],
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = Mesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 3]]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_degenerate_face() {
        let err = Mesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 1]]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn normalize_centers_and_scales() {
        let m = Mesh::new(
            vec![
                [5.0, 5.0, 5.0],
                [6.0, 5.0, 5.0],
                [5.0, 6.0, 5.0],
                [5.0, 5.0, 6.0],
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap();
        let nm = normalize_mesh(&m).unwrap();
        let mut c = [0.0; 3];
        for v in nm.vertices() {
            for k in 0..3 {
                c[k] += v[k];
            }
        }
        for ck in &c {
            assert!(ck.abs() / 4.0 < 1e-9);
        }
        let max_r = nm
            .vertices()
            .iter()
            .map(|v| norm(*v))
            .fold(0.0f64, f64::max);
        assert!((max_r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant() {
        let m = tetrahedron();
        let n1 = normalize_mesh(&m).unwrap();
        let n2 = normalize_mesh(&n1).unwrap();
        for (a, b) in n1.vertices().iter().zip(n2.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
        let scaled = Mesh::new(
            m.vertices().iter().map(|v| [v[0] * 10.0, v[1] * 10.0, v[2] * 10.0]).collect(),
            m.faces().to_vec(),
        )
        .unwrap();
        let n3 = normalize_mesh(&scaled).unwrap();
        for (a, b) in n1.vertices().iter().zip(n3.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_rejects_coincident_vertices() {
        let m = Mesh::new(vec![[1.0; 3]; 3], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(
            normalize_mesh(&m),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_symmetric() {
        let m = normalize_mesh(&tetrahedron()).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let linf = ops.l.inf_norm();
        for r in 0..ops.n() {
            let sum: f64 = ops.l.row(r).map(|(_, v)| v).sum();
            assert!(sum.abs() <= 1e-9 * linf, "row {r} sums to {sum}");
        }
        assert_eq!(ops.l.asymmetry(), 0.0);
        assert!(ops.w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn laplacian_positive_semidefinite_on_nonconstant() {
        use rand::{Rng, SeedableRng};
        let m = normalize_mesh(&shapes::icosphere(1, 1.0)).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x: Vec<f64> = (0..ops.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            let x: Vec<f64> = x.iter().map(|v| v - mean).collect();
            let mut y = vec![0.0; ops.n()];
            ops.l.spmv(&x, &mut y);
            let quad: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!(quad > 0.0, "x^T L x = {quad} should be positive");
        }
    }

    #[test]
    fn laplacian_commutes_with_permutation() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = normalize_mesh(&shapes::icosphere(1, 1.0)).unwrap();
        let n = m.n_vertices();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pm = m.permuted(&perm).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let ops_p = cotan_laplacian(&pm).unwrap();
        let dense = ops.l.to_dense();
        let dense_p = ops_p.l.to_dense();
        for i in 0..n {
            assert!((ops.w[i] - ops_p.w[perm[i]]).abs() < 1e-12);
            for j in 0..n {
                assert!((dense.at(i, j) - dense_p.at(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn icosahedron_mass_matches_analytic_area() {
        // analytic oracle: icosahedron with unit circumradius has edge
        // a = 4 / sqrt(10 + 2 sqrt 5) and area 20 * (sqrt(3)/4) a^2
        let m = shapes::icosphere(0, 1.0);
        let ops = cotan_laplacian(&m).unwrap();
        let a = 4.0 / (10.0 + 2.0 * 5.0f64.sqrt()).sqrt();
        let analytic = 20.0 * (3.0f64.sqrt() / 4.0) * a * a;
        let total: f64 = ops.w.iter().sum();
        assert!(
            (total - analytic).abs() < 1e-9 * analytic,
            "total mass {total} vs analytic {analytic}"
        );
        // all vertices equivalent by symmetry
        for wi in &ops.w {
            assert!((wi - total / 12.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_graph_tetrahedron_counts() {
        let g = edge_graph(&tetrahedron());
        assert_eq!(g.n_edges(), 6);
        for i in 0..4 {
            assert_eq!(g.neighbors(i).len(), 3);
        }
        // undirected with equal weights both ways
        for i in 0..g.n() {
            for &(j, wij) in g.neighbors(i) {
                let back = g.neighbors(j).iter().find(|&&(k, _)| k == i).unwrap();
                assert_eq!(back.1, wij);
            }
        }
    }

    #[test]
    fn edge_count_formula_on_sphere() {
        // brute-force dedup oracle against the closed-mesh edge formula
        let m = shapes::icosphere(2, 1.0);
        let g = edge_graph(&m);
        let mut set = std::collections::HashSet::new();
        for f in m.faces() {
            for c in 0..3 {
                let a = f[c];
                let b = f[(c + 1) % 3];
                set.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(g.n_edges(), set.len());
        // closed mesh: E = 3F/2
        assert_eq!(g.n_edges(), 3 * m.n_faces() / 2);
    }
}
