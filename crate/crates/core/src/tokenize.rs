//! Mesh tokenization: the anisotropy-aware edge distance, k-medoid
//! root-node partitioning, a balanced-BFS baseline partitioner, Galerkin
//! operator coarsening, prolongation, patch averaging, and the
//! spectral-preservation audit that compares partitioners.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Mat};
use crate::mesh::{components_of, cotan_laplacian, edge_graph, normalize_mesh, Mesh, OperatorSet};
use crate::spectral::{compute_hks, eigendecompose, TimeSamples};
use crate::sparse::CsrMatrix;

/// How to treat edges whose Laplacian weight is non-negative (obtuse
/// pairs), for which the edge distance formula degenerates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Literal formula: distance clamps to zero.
    Paper,
    /// Drop the edge from the distance graph.
    #[default]
    Exclude,
}

/// Sparse symmetric matrix of per-edge distances over the mesh edge set.
#[derive(Debug, Clone)]
pub struct DistanceGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl DistanceGraph {
    /// Build from an explicit adjacency list; entries must be symmetric
    /// with non-negative finite distances.
    pub fn from_adjacency(adj: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = adj.len();
        for (i, nbrs) in adj.iter().enumerate() {
            for &(j, d) in nbrs {
                if j >= n {
                    return Err(Error::validation(format!("edge ({i},{j}) out of range")));
                }
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(Error::validation(format!("distance ({i},{j}) = {d}")));
                }
                let back = adj[j].iter().find(|&&(k, _)| k == i);
                match back {
                    Some(&(_, d2)) if d2 == d => {}
                    _ => {
                        return Err(Error::validation(format!(
                            "edge ({i},{j}) is not mirrored with equal weight"
                        )))
                    }
                }
            }
        }
        Ok(DistanceGraph { adj })
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn components(&self) -> Vec<Vec<usize>> {
        components_of(self.adj.len(), |i| self.adj[i].iter().map(|&(j, _)| j))
    }
}

/// D_ij = sqrt(W_ii + W_jj) / (-L_ij) where -L_ij > 0; non-positive
/// couplings follow `clamp_mode`.
pub fn edge_distances(ops: &OperatorSet, clamp_mode: ClampMode) -> DistanceGraph {
    let n = ops.n();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for (j, lij) in ops.l.row(i) {
            if j <= i {
                continue;
            }
            let coupling = -lij;
            let d = if coupling > 0.0 {
                (ops.w[i] + ops.w[j]).sqrt() / coupling
            } else {
                match clamp_mode {
                    ClampMode::Paper => 0.0,
                    ClampMode::Exclude => continue,
                }
            };
            adj[i].push((j, d));
            adj[j].push((i, d));
        }
    }
    for nb in &mut adj {
        nb.sort_by_key(|&(j, _)| j);
    }
    DistanceGraph { adj }
}

/// A partition of the vertex set into patches anchored at root vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitioning {
    roots: Vec<usize>,
    assignment: Vec<usize>,
}

impl Partitioning {
    pub fn new(roots: Vec<usize>, assignment: Vec<usize>) -> Result<Self> {
        let p = roots.len();
        let n = assignment.len();
        if p == 0 || n == 0 {
            return Err(Error::validation("empty partitioning"));
        }
        let mut seen = vec![false; p];
        for (i, &a) in assignment.iter().enumerate() {
            if a >= p {
                return Err(Error::validation(format!(
                    "vertex {i} assigned to patch {a}, but P = {p}"
                )));
            }
            seen[a] = true;
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return Err(Error::validation(format!("patch {empty} is empty")));
        }
        for (pid, &r) in roots.iter().enumerate() {
            if r >= n {
                return Err(Error::validation(format!(
                    "root {r} of patch {pid} out of range"
                )));
            }
            if assignment[r] != pid {
                return Err(Error::validation(format!(
                    "root {r} of patch {pid} is assigned to patch {}",
                    assignment[r]
                )));
            }
        }
        Ok(Partitioning { roots, assignment })
    }

    pub fn p(&self) -> usize {
        self.roots.len()
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.p()];
        for (i, &a) in self.assignment.iter().enumerate() {
            out[a].push(i);
        }
        out
    }

    /// Check that every patch induces a connected subgraph.
    pub fn check_connected(&self, neighbors: impl Fn(usize) -> Vec<usize>) -> Result<()> {
        for (pid, members) in self.members().iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut visited = std::collections::HashSet::new();
            let mut stack = vec![members[0]];
            visited.insert(members[0]);
            while let Some(u) = stack.pop() {
                for v in neighbors(u) {
                    if self.assignment[v] == pid && visited.insert(v) {
                        stack.push(v);
                    }
                }
            }
            if visited.len() != members.len() {
                return Err(Error::validation(format!(
                    "patch {pid} is disconnected ({} of {} vertices reachable)",
                    visited.len(),
                    members.len()
                )));
            }
        }
        Ok(())
    }

    /// Relabel the vertex axis by `perm` (perm[old] = new).
    pub fn permuted(&self, perm: &[usize]) -> Result<Partitioning> {
        if perm.len() != self.n() {
            return Err(Error::validation("permutation length mismatch"));
        }
        let mut assignment = vec![0; self.n()];
        for (old, &new) in perm.iter().enumerate() {
            assignment[new] = self.assignment[old];
        }
        let roots = self.roots.iter().map(|&r| perm[r]).collect();
        Partitioning::new(roots, assignment)
    }
}

/// On-disk assignment format (JSON).
#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    p: usize,
    roots: Vec<usize>,
    assignment: Vec<usize>,
}

pub fn save_assignment(path: impl AsRef<std::path::Path>, part: &Partitioning) -> Result<()> {
    let file = AssignmentFile {
        p: part.p(),
        roots: part.roots().to_vec(),
        assignment: part.assignment().to_vec(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load an externally computed partition. Structural invariants are
/// enforced; patch connectivity is only warned about, since third-party
/// partitioners may emit disconnected parts.
pub fn load_assignment(path: impl AsRef<std::path::Path>, mesh: &Mesh) -> Result<Partitioning> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: AssignmentFile = serde_json::from_str(&text)?;
    if file.roots.len() != file.p {
        return Err(Error::validation(format!(
            "assignment file declares p = {} but has {} roots",
            file.p,
            file.roots.len()
        )));
    }
    if file.assignment.len() != mesh.n_vertices() {
        return Err(Error::validation(format!(
            "assignment covers {} vertices, mesh has {}",
            file.assignment.len(),
            mesh.n_vertices()
        )));
    }
    let part = Partitioning::new(file.roots, file.assignment)?;
    let g = edge_graph(mesh);
    if let Err(e) = part.check_connected(|u| g.neighbors(u).iter().map(|&(v, _)| v).collect()) {
        log::warn!("imported partition: {e}");
    }
    Ok(part)
}

// ---------------------------------------------------------------------------
// shortest paths
// ---------------------------------------------------------------------------

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    owner: usize,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // reversed for a min-heap; ties break toward the lower owner index
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then(other.owner.cmp(&self.owner))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra. Returns (distance, owner) per node, where owner
/// is the index into `sources` of the nearest source; exact distance ties
/// resolve to the lower owner index. `mask` restricts the traversal.
fn multi_source_dijkstra(
    adj: &dyn Fn(usize) -> Vec<(usize, f64)>,
    n: usize,
    sources: &[usize],
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<usize>) {
    let mut dist = vec![f64::INFINITY; n];
    let mut owner = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    for (idx, &s) in sources.iter().enumerate() {
        if dist[s] > 0.0 || (dist[s] == 0.0 && idx < owner[s]) {
            dist[s] = 0.0;
            owner[s] = idx;
            heap.push(HeapEntry {
                dist: 0.0,
                owner: idx,
                node: s,
            });
        }
    }
    while let Some(HeapEntry {
        dist: d,
        owner: o,
        node: u,
    }) = heap.pop()
    {
        if d > dist[u] || (d == dist[u] && o > owner[u]) {
            continue;
        }
        for (v, w) in adj(u) {
            if let Some(m) = mask {
                if !m[v] {
                    continue;
                }
            }
            let nd = d + w;
            if nd < dist[v] || (nd == dist[v] && o < owner[v]) {
                dist[v] = nd;
                owner[v] = o;
                heap.push(HeapEntry {
                    dist: nd,
                    owner: o,
                    node: v,
                });
            }
        }
    }
    (dist, owner)
}

fn dg_adj(dg: &DistanceGraph) -> impl Fn(usize) -> Vec<(usize, f64)> + '_ {
    |u| dg.adj[u].clone()
}

// ---------------------------------------------------------------------------
// root-node partitioning
// ---------------------------------------------------------------------------

/// Total shortest-path cost of assigning every node to its nearest root.
pub fn assignment_cost(dg: &DistanceGraph, roots: &[usize]) -> f64 {
    let (dist, _) = multi_source_dijkstra(&dg_adj(dg), dg.n(), roots, None);
    dist.iter().filter(|d| d.is_finite()).sum()
}

/// Split `p` across components proportionally to size, at least one each.
fn apportion(p: usize, components: &[Vec<usize>], n: usize) -> Result<Vec<usize>> {
    let c = components.len();
    if p < c {
        return Err(Error::Apportionment(format!(
            "cannot spread {p} patches across {c} components"
        )));
    }
    let mut alloc: Vec<usize> = vec![1; c];
    let mut remaining = p - c;
    // largest remainder on the residual quota
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(c);
    for (i, comp) in components.iter().enumerate() {
        let quota = remaining as f64 * comp.len() as f64 / n as f64;
        let take = (quota.floor() as usize).min(remaining).min(comp.len() - 1);
        alloc[i] += take;
        fracs.push((quota - take as f64, i));
    }
    let allotted: usize = alloc.iter().sum();
    remaining = p - allotted;
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut fi = 0;
    while remaining > 0 {
        let (_, i) = fracs[fi % fracs.len()];
        if alloc[i] < components[i].len() {
            alloc[i] += 1;
            remaining -= 1;
        }
        fi += 1;
        if fi > 4 * fracs.len() && remaining > 0 {
            return Err(Error::Apportionment(
                "patch count exceeds total vertex count across components".into(),
            ));
        }
    }
    Ok(alloc)
}

/// Deterministic farthest-point seeds within one component, starting from
/// its lowest-index vertex.
fn farthest_point_seeds(
    adj: &dyn Fn(usize) -> Vec<(usize, f64)>,
    n: usize,
    component: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &v in component {
        mask[v] = true;
    }
    let mut seeds = vec![component[0]];
    while seeds.len() < count {
        let (dist, _) = multi_source_dijkstra(adj, n, &seeds, Some(&mask));
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for &v in component {
            if dist[v].is_finite() && dist[v] > best_d && !seeds.contains(&v) {
                best_d = dist[v];
                best = v;
            }
        }
        if best == usize::MAX {
            // fewer distinct positions than seeds requested; reuse lowest
            // unused vertex
            let unused = component.iter().find(|v| !seeds.contains(v));
            match unused {
                Some(&v) => seeds.push(v),
                None => break,
            }
        } else {
            seeds.push(best);
        }
    }
    seeds
}

/// k-medoid partitioning under the edge-distance metric.
///
/// Seeds come from farthest-point sampling; Lloyd-style iterations then
/// alternate nearest-root assignment with recentering each patch on the
/// member minimizing the maximum patch-restricted distance. An iteration
/// that would raise the total assignment cost is rolled back, so the cost
/// is non-increasing. On graphs small enough to enumerate, all root sets
/// are tried first, which makes the result exactly optimal.
pub fn root_node_partition(
    dg: &DistanceGraph,
    p_count: usize,
    _seed: u64,
    max_iters: usize,
) -> Result<Partitioning> {
    let n = dg.n();
    if p_count == 0 || p_count > n {
        return Err(Error::domain(format!(
            "patch count {p_count} out of range for {n} vertices"
        )));
    }
    let components = dg.components();
    let alloc = apportion(p_count, &components, n)?;
    let adj = dg_adj(dg);

    let mut roots: Vec<usize> = Vec::with_capacity(p_count);
    for (comp, &count) in components.iter().zip(&alloc) {
        let seeds = if let Some(sets) = enumerable_root_sets(comp.len(), count) {
            best_enumerated_roots(&adj, n, comp, count, sets)
        } else {
            farthest_point_seeds(&adj, n, comp, count)
        };
        roots.extend(seeds);
    }

    // Lloyd refinement over the full graph (components never interact:
    // infinite distance keeps assignments within components)
    let (mut dist, mut owner) = multi_source_dijkstra(&adj, n, &roots, None);
    let mut cost: f64 = dist.iter().sum();
    for _ in 0..max_iters {
        let next_roots = recenter(&adj, n, &roots, &owner);
        if next_roots == roots {
            break;
        }
        let (nd, no) = multi_source_dijkstra(&adj, n, &next_roots, None);
        let ncost: f64 = nd.iter().sum();
        if ncost > cost {
            break; // revert: keep previous roots/assignment
        }
        roots = next_roots;
        dist = nd;
        owner = no;
        cost = ncost;
    }
    let _ = dist;
    Partitioning::new(roots, owner)
}

/// All root sets, if there are at most 256 of them.
fn enumerable_root_sets(n: usize, p: usize) -> Option<usize> {
    let mut combos: usize = 1;
    for i in 0..p {
        combos = combos.checked_mul(n - i)? / (i + 1);
        if combos > 256 {
            return None;
        }
    }
    Some(combos)
}

fn best_enumerated_roots(
    adj: &dyn Fn(usize) -> Vec<(usize, f64)>,
    n: usize,
    comp: &[usize],
    count: usize,
    _sets: usize,
) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &v in comp {
        mask[v] = true;
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..count).collect();
    loop {
        let roots: Vec<usize> = combo.iter().map(|&i| comp[i]).collect();
        let (dist, _) = multi_source_dijkstra(adj, n, &roots, Some(&mask));
        let cost: f64 = comp.iter().map(|&v| dist[v]).sum();
        if best.as_ref().map_or(true, |(c, _)| cost < *c) {
            best = Some((cost, roots));
        }
        // next lexicographic combination
        let mut i = count;
        loop {
            if i == 0 {
                return best.unwrap().1;
            }
            i -= 1;
            if combo[i] + (count - i) < comp.len() {
                combo[i] += 1;
                for j in i + 1..count {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// New root per patch: the member minimizing the maximum patch-restricted
/// shortest-path distance to the other members (ties to the lower index).
fn recenter(
    adj: &dyn Fn(usize) -> Vec<(usize, f64)>,
    n: usize,
    roots: &[usize],
    owner: &[usize],
) -> Vec<usize> {
    let p = roots.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); p];
    for (v, &o) in owner.iter().enumerate() {
        if o != usize::MAX {
            members[o].push(v);
        }
    }
    let mut out = roots.to_vec();
    let mut mask = vec![false; n];
    for (pid, mem) in members.iter().enumerate() {
        if mem.len() <= 1 {
            continue;
        }
        for &v in mem {
            mask[v] = true;
        }
        let mut best = out[pid];
        let mut best_ecc = f64::INFINITY;
        for &candidate in mem {
            let (dist, _) = multi_source_dijkstra(adj, n, &[candidate], Some(&mask));
            let ecc = mem.iter().map(|&v| dist[v]).fold(0.0f64, f64::max);
            if ecc < best_ecc || (ecc == best_ecc && candidate < best) {
                best_ecc = ecc;
                best = candidate;
            }
        }
        out[pid] = best;
        for &v in mem {
            mask[v] = false;
        }
    }
    out
}

/// Balanced greedy BFS growth from farthest-point seeds on the Euclidean
/// edge graph; geometry-blind by construction, the bundled stand-in for a
/// multilevel graph partitioner.
pub fn baseline_partition(m: &Mesh, p_count: usize, _seed: u64) -> Result<Partitioning> {
    let n = m.n_vertices();
    if p_count == 0 || p_count > n {
        return Err(Error::domain(format!(
            "patch count {p_count} out of range for {n} vertices"
        )));
    }
    let g = edge_graph(m);
    let components = g.components();
    let alloc = apportion(p_count, &components, n)?;
    let adj = |u: usize| g.neighbors(u).to_vec();

    let mut roots: Vec<usize> = Vec::with_capacity(p_count);
    for (comp, &count) in components.iter().zip(&alloc) {
        roots.extend(farthest_point_seeds(&adj, n, comp, count));
    }

    let mut assignment = vec![usize::MAX; n];
    let mut queues: Vec<std::collections::VecDeque<usize>> = roots
        .iter()
        .map(|&r| std::collections::VecDeque::from([r]))
        .collect();
    let mut sizes = vec![0usize; roots.len()];
    for (pid, &r) in roots.iter().enumerate() {
        assignment[r] = pid;
        sizes[pid] = 1;
        for &(v, _) in g.neighbors(r) {
            queues[pid].push_back(v);
        }
    }
    // smallest patch claims next, one vertex at a time
    let mut active: std::collections::BTreeSet<(usize, usize)> = (0..roots.len())
        .map(|pid| (sizes[pid], pid))
        .collect();
    while let Some(&(size, pid)) = active.iter().next() {
        active.remove(&(size, pid));
        let mut claimed = None;
        while let Some(v) = queues[pid].pop_front() {
            if assignment[v] == usize::MAX {
                claimed = Some(v);
                break;
            }
        }
        if let Some(v) = claimed {
            assignment[v] = pid;
            sizes[pid] += 1;
            for &(u, _) in g.neighbors(v) {
                if assignment[u] == usize::MAX {
                    queues[pid].push_back(u);
                }
            }
            if !queues[pid].is_empty() {
                active.insert((sizes[pid], pid));
            }
        }
    }
    Partitioning::new(roots, assignment)
}

// ---------------------------------------------------------------------------
// coarsening, prolongation, patch averaging
// ---------------------------------------------------------------------------

/// Galerkin triple products L_c = A^T L A and W_c = A^T W A with the 0/1
/// assignment matrix A.
pub fn coarsen_operators(part: &Partitioning, ops: &OperatorSet) -> OperatorSet {
    assert_eq!(part.n(), ops.n(), "partitioning and operators disagree on N");
    let p = part.p();
    let a = part.assignment();
    let mut dense = Mat::zeros(p, p);
    for i in 0..ops.n() {
        for (j, v) in ops.l.row(i) {
            let e = dense.at(a[i], a[j]) + v;
            dense.set(a[i], a[j], e);
        }
    }
    // exact symmetry: mirror the upper triangle
    let mut triplets = Vec::new();
    for q in 0..p {
        for r in q..p {
            let v = dense.at(q, r);
            if v != 0.0 {
                triplets.push((q, r, v));
                if r != q {
                    triplets.push((r, q, v));
                }
            }
        }
    }
    let mut w = vec![0.0; p];
    for (i, &pid) in a.iter().enumerate() {
        w[pid] += ops.w[i];
    }
    OperatorSet {
        l: CsrMatrix::from_triplets(p, &triplets),
        w,
    }
}

/// Piecewise-constant lift: fine[i] = coarse[assignment[i]].
pub fn prolongate(part: &Partitioning, coarse: &Mat) -> Mat {
    assert_eq!(coarse.rows(), part.p(), "coarse field has wrong row count");
    Mat::from_fn(part.n(), coarse.cols(), |i, j| {
        coarse.at(part.assignment()[i], j)
    })
}

/// Unweighted per-patch mean of node features.
pub fn patch_average(part: &Partitioning, node_feats: &Mat) -> Mat {
    assert_eq!(node_feats.rows(), part.n(), "features have wrong row count");
    let p = part.p();
    let d = node_feats.cols();
    let mut sums = Mat::zeros(p, d);
    let mut counts = vec![0usize; p];
    for (i, &pid) in part.assignment().iter().enumerate() {
        counts[pid] += 1;
        for j in 0..d {
            sums.set(pid, j, sums.at(pid, j) + node_feats.at(i, j));
        }
    }
    for pid in 0..p {
        let inv = 1.0 / counts[pid] as f64;
        for j in 0..d {
            sums.set(pid, j, sums.at(pid, j) * inv);
        }
    }
    sums
}

// ---------------------------------------------------------------------------
// spectral preservation audit
// ---------------------------------------------------------------------------

/// How well a partitioning's coarse operators reproduce the fine spectrum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreservationReport {
    pub p: usize,
    pub k: usize,
    /// Sign-aligned relative W-norm error per nonzero eigenfunction.
    pub aligned_errors: Vec<f64>,
    /// Principal angles (radians) between the fine and prolonged-coarse
    /// K-dimensional eigenspaces, ascending.
    pub principal_angles: Vec<f64>,
    pub mean_principal_angle: f64,
    /// Relative Frobenius error of the prolonged coarse HKS.
    pub hks_rel_err: f64,
}

/// Compare the first `k` nonzero fine eigenfunctions (and HKS) against
/// their coarse counterparts prolonged back to the mesh.
pub fn spectral_preservation_report(
    mesh: &Mesh,
    part: &Partitioning,
    k: usize,
    ts: &TimeSamples,
) -> Result<PreservationReport> {
    if k > part.p() {
        return Err(Error::domain(format!(
            "need k <= P, got k = {k}, P = {}",
            part.p()
        )));
    }
    let mesh = normalize_mesh(mesh)?;
    let ops = cotan_laplacian(&mesh)?;
    let n_components = edge_graph(&mesh).components().len();
    let want = k + n_components;

    let fine = eigendecompose(&ops, want.min(ops.n()))?;
    let coarse_ops = coarsen_operators(part, &ops);
    let coarse = eigendecompose(&coarse_ops, want.min(part.p()))?;

    let zero_tol = 1e-8;
    let fine_nonzero: Vec<usize> = (0..fine.k_eig())
        .filter(|&i| fine.eigenvalues()[i] > zero_tol)
        .take(k)
        .collect();
    let coarse_nonzero: Vec<usize> = (0..coarse.k_eig())
        .filter(|&i| coarse.eigenvalues()[i] > zero_tol)
        .take(k)
        .collect();
    if fine_nonzero.len() < k || coarse_nonzero.len() < k {
        return Err(Error::numeric(format!(
            "wanted {k} nonzero eigenfunctions, found {} fine / {} coarse",
            fine_nonzero.len(),
            coarse_nonzero.len()
        )));
    }

    let w = &ops.w;
    let wnorm = |x: &[f64]| -> f64 {
        x.iter()
            .zip(w)
            .map(|(v, wi)| wi * v * v)
            .sum::<f64>()
            .sqrt()
    };

    // per-eigenfunction aligned error
    let mut aligned_errors = Vec::with_capacity(k);
    for (&fi, &ci) in fine_nonzero.iter().zip(&coarse_nonzero) {
        let phi = fine.eigenvectors().column(fi);
        let coarse_col = Mat::col_vec(&coarse.eigenvectors().column(ci));
        let lifted = prolongate(part, &coarse_col);
        let denom = wnorm(&phi);
        let mut best = f64::INFINITY;
        for sign in [1.0, -1.0] {
            let diff: Vec<f64> = (0..part.n())
                .map(|i| sign * lifted.at(i, 0) - phi[i])
                .collect();
            best = best.min(wnorm(&diff) / denom);
        }
        aligned_errors.push(best);
    }

    // principal angles between the K-dimensional spans
    let fine_span = Mat::from_fn(part.n(), k, |i, j| fine.eigenvectors().at(i, fine_nonzero[j]));
    let coarse_span = Mat::from_fn(part.p(), k, |i, j| {
        coarse.eigenvectors().at(i, coarse_nonzero[j])
    });
    let lifted_span = w_orthonormalize(&prolongate(part, &coarse_span), w)?;
    let wq = Mat::from_fn(part.n(), k, |i, j| w[i] * lifted_span.at(i, j));
    let overlap = fine_span.matmul_tn(&wq);
    let gram = overlap.matmul_tn(&overlap);
    let (mut sigma2, _) = symmetric_eigen(&gram)?;
    sigma2.reverse();
    let principal_angles: Vec<f64> = sigma2
        .iter()
        .map(|&s| s.max(0.0).sqrt().clamp(0.0, 1.0).acos())
        .collect();
    let mean_principal_angle =
        principal_angles.iter().sum::<f64>() / principal_angles.len() as f64;

    // HKS reconstruction error over the same mode count
    let hks_fine = compute_hks(&fine.truncated(want.min(fine.k_eig())), ts);
    let hks_coarse = compute_hks(&coarse.truncated(want.min(coarse.k_eig())), ts);
    let lifted_hks = prolongate(part, hks_coarse.values());
    let hks_rel_err = crate::linalg::rel_frob_diff(&lifted_hks, hks_fine.values());

    Ok(PreservationReport {
        p: part.p(),
        k,
        aligned_errors,
        principal_angles,
        mean_principal_angle,
        hks_rel_err,
    })
}

/// Gram-Schmidt in the W inner product.
fn w_orthonormalize(m: &Mat, w: &[f64]) -> Result<Mat> {
    let (n, k) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| m.column(j)).collect();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|r| w[r] * cols[i][r] * cols[j][r]).sum();
                for r in 0..n {
                    cols[j][r] -= dot * cols[i][r];
                }
            }
        }
        let norm: f64 = (0..n)
            .map(|r| w[r] * cols[j][r] * cols[j][r])
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(Error::numeric(
                "prolonged coarse eigenspace is rank-deficient",
            ));
        }
        for r in 0..n {
            cols[j][r] /= norm;
        }
    }
    Ok(Mat::from_fn(n, k, |i, j| cols[j][i]))
}



#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;
    use crate::spectral::log_time_samples;

    fn line_graph(weights: &[f64]) -> DistanceGraph {
        let n = weights.len() + 1;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, &w) in weights.iter().enumerate() {
            adj[i].push((i + 1, w));
            adj[i + 1].push((i, w));
        }
        DistanceGraph { adj }
    }

    fn sphere_part(subdiv: u32, p: usize) -> (Mesh, Partitioning) {
        let m = normalize_mesh(&shapes::icosphere(subdiv, 1.0)).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let dg = edge_distances(&ops, ClampMode::Exclude);
        let part = root_node_partition(&dg, p, 0, 10).unwrap();
        (m, part)
    }

    #[test]
    fn edge_distance_hand_value() {
        // W_ii = W_jj = 2, L_ij = -2 -> D = sqrt(4)/2 = 1
        let ops = OperatorSet {
            l: CsrMatrix::from_triplets(
                2,
                &[(0, 0, 2.0), (0, 1, -2.0), (1, 0, -2.0), (1, 1, 2.0)],
            ),
            w: vec![2.0, 2.0],
        };
        let dg = edge_distances(&ops, ClampMode::Exclude);
        assert_eq!(dg.neighbors(0), &[(1, 1.0)]);
    }

    #[test]
    fn edge_distance_clamp_modes() {
        // positive L_ij (obtuse pair)
        let ops = OperatorSet {
            l: CsrMatrix::from_triplets(
                2,
                &[(0, 0, -0.3), (0, 1, 0.3), (1, 0, 0.3), (1, 1, -0.3)],
            ),
            w: vec![1.0, 1.0],
        };
        let paper = edge_distances(&ops, ClampMode::Paper);
        assert_eq!(paper.neighbors(0), &[(1, 0.0)]);
        let excl = edge_distances(&ops, ClampMode::Exclude);
        assert!(excl.neighbors(0).is_empty());
    }

    #[test]
    fn degenerate_p_equals_n() {
        let (_, part) = sphere_part(1, 42);
        assert_eq!(part.p(), 42);
        // every node its own root
        let mut roots = part.roots().to_vec();
        roots.sort_unstable();
        assert_eq!(roots, (0..42).collect::<Vec<_>>());
        for (v, &a) in part.assignment().iter().enumerate() {
            assert_eq!(part.roots()[a], v);
        }
    }

    #[test]
    fn path_graph_single_medoid_is_center() {
        // a - b - c unit path, P = 1: b is the optimal medoid
        let dg = line_graph(&[1.0, 1.0]);
        let part = root_node_partition(&dg, 1, 0, 10).unwrap();
        assert_eq!(part.roots(), &[1]);
    }

    #[test]
    fn small_graph_cost_matches_bruteforce() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(42);
        for case in 0..60 {
            let n = rng.gen_range(3..=8);
            // random connected graph: a random spanning path plus extra edges
            let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
            let add = |adj: &mut Vec<Vec<(usize, f64)>>, a: usize, b: usize, w: f64| {
                if a != b && !adj[a].iter().any(|&(x, _)| x == b) {
                    adj[a].push((b, w));
                    adj[b].push((a, w));
                }
            };
            for i in 1..n {
                add(&mut adj, i - 1, i, rng.gen_range(0.1..2.0));
            }
            for _ in 0..n {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                add(&mut adj, a, b, rng.gen_range(0.1..2.0));
            }
            let dg = DistanceGraph { adj };
            let p = rng.gen_range(1..=2usize.min(n));
            let part = root_node_partition(&dg, p, case, 10).unwrap();

            let cost_of = |roots: &[usize]| -> f64 {
                let (dist, _) = multi_source_dijkstra(&dg_adj(&dg), n, roots, None);
                dist.iter().sum()
            };
            let got = cost_of(part.roots());

            // brute force over all root sets
            let mut best = f64::INFINITY;
            if p == 1 {
                for r in 0..n {
                    best = best.min(cost_of(&[r]));
                }
            } else {
                for a in 0..n {
                    for b in a + 1..n {
                        best = best.min(cost_of(&[a, b]));
                    }
                }
            }
            assert!(
                (got - best).abs() <= 1e-12 * best.max(1.0),
                "case {case}: got {got}, brute force {best}"
            );
        }
    }

    #[test]
    fn partition_invariants_on_sphere() {
        let (m, part) = sphere_part(2, 12);
        let g = edge_graph(&m);
        part.check_connected(|u| g.neighbors(u).iter().map(|&(v, _)| v).collect())
            .unwrap();
        let members = part.members();
        assert_eq!(members.iter().map(|v| v.len()).sum::<usize>(), 162);
        assert!(members.iter().all(|v| !v.is_empty()));
    }

    #[test]
    fn partition_deterministic() {
        let (_, a) = sphere_part(2, 12);
        let (_, b) = sphere_part(2, 12);
        assert_eq!(a, b);
    }

    #[test]
    fn lloyd_cost_never_increases() {
        // run the iteration manually and track costs
        let m = normalize_mesh(&shapes::blob(2, 9)).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let dg = edge_distances(&ops, ClampMode::Exclude);
        let adj = dg_adj(&dg);
        let n = dg.n();
        let comp = dg.components();
        assert_eq!(comp.len(), 1);
        let mut roots = farthest_point_seeds(&adj, n, &comp[0], 10);
        let (dist, mut owner) = multi_source_dijkstra(&adj, n, &roots, None);
        let mut cost: f64 = dist.iter().sum();
        for _ in 0..10 {
            let next = recenter(&adj, n, &roots, &owner);
            if next == roots {
                break;
            }
            let (nd, no) = multi_source_dijkstra(&adj, n, &next, None);
            let ncost: f64 = nd.iter().sum();
            if ncost > cost {
                break;
            }
            assert!(ncost <= cost + 1e-12);
            roots = next;
            owner = no;
            cost = ncost;
        }
    }

    #[test]
    fn baseline_balanced_and_connected() {
        let m = normalize_mesh(&shapes::icosphere(3, 1.0)).unwrap();
        let part = baseline_partition(&m, 16, 0).unwrap();
        let g = edge_graph(&m);
        part.check_connected(|u| g.neighbors(u).iter().map(|&(v, _)| v).collect())
            .unwrap();
        let target = 642.0 / 16.0;
        for members in part.members() {
            let s = members.len() as f64;
            assert!(
                s >= 0.8 * target && s <= 1.2 * target,
                "patch size {s} vs target {target}"
            );
        }
        // determinism
        let again = baseline_partition(&m, 16, 0).unwrap();
        assert_eq!(part, again);
    }

    #[test]
    fn baseline_single_patch() {
        let m = shapes::icosphere(1, 1.0);
        let part = baseline_partition(&m, 1, 0).unwrap();
        assert!(part.assignment().iter().all(|&a| a == 0));
    }

    #[test]
    fn coarsen_identity_when_p_equals_n() {
        let m = normalize_mesh(&shapes::icosphere(1, 1.0)).unwrap();
        let ops = cotan_laplacian(&m).unwrap();
        let n = ops.n();
        let part = Partitioning::new((0..n).collect(), (0..n).collect()).unwrap();
        let coarse = coarsen_operators(&part, &ops);
        let a = ops.l.to_dense();
        let b = coarse.l.to_dense();
        assert!(crate::linalg::rel_frob_diff(&b, &a) < 1e-15);
        for i in 0..n {
            assert!((coarse.w[i] - ops.w[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn coarsen_kernel_and_symmetry() {
        let (m, part) = sphere_part(2, 9);
        let ops = cotan_laplacian(&m).unwrap();
        let coarse = coarsen_operators(&part, &ops);
        assert_eq!(coarse.l.asymmetry(), 0.0);
        let linf = coarse.l.inf_norm();
        for r in 0..coarse.n() {
            let sum: f64 = coarse.l.row(r).map(|(_, v)| v).sum();
            assert!(sum.abs() <= 1e-9 * linf);
        }
        assert!(coarse.w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn coarsen_hand_computed_two_patch_chain() {
        // path graph a-b-c with unit weights, patches {a,b} and {c}:
        // A^T L A = [[L_aa+L_ab+L_ba+L_bb, L_ac+L_bc], [L_ca+L_cb, L_cc]]
        //         = [[1, -1], [-1, 1]]
        let l = CsrMatrix::from_triplets(
            3,
            &[
                (0, 0, 1.0),
                (0, 1, -1.0),
                (1, 0, -1.0),
                (1, 1, 2.0),
                (1, 2, -1.0),
                (2, 1, -1.0),
                (2, 2, 1.0),
            ],
        );
        let ops = OperatorSet {
            l,
            w: vec![1.0, 1.0, 1.0],
        };
        let part = Partitioning::new(vec![0, 2], vec![0, 0, 1]).unwrap();
        let coarse = coarsen_operators(&part, &ops);
        let d = coarse.l.to_dense();
        assert_eq!(
            (d.at(0, 0), d.at(0, 1), d.at(1, 0), d.at(1, 1)),
            (1.0, -1.0, -1.0, 1.0)
        );
        assert_eq!(coarse.w, vec![2.0, 1.0]);
    }

    #[test]
    fn prolongate_and_average_are_inverse_on_patch_fields() {
        let (_, part) = sphere_part(2, 7);
        let mut rng = crate::rng::seeded(3);
        let coarse = Mat::from_fn(7, 4, |_, _| crate::rng::normal(&mut rng));
        let lifted = prolongate(&part, &coarse);
        let back = patch_average(&part, &lifted);
        assert!(crate::linalg::rel_frob_diff(&back, &coarse) < 1e-14);
        // constant field lifts to constant field
        let c = Mat::from_fn(7, 1, |_, _| 2.5);
        let lc = prolongate(&part, &c);
        assert!(lc.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn patch_average_hand_case() {
        let part = Partitioning::new(vec![0, 3], vec![0, 0, 0, 1, 1, 1]).unwrap();
        let feats = Mat::from_vec(6, 1, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        let avg = patch_average(&part, &feats);
        assert!((avg.at(0, 0) - 2.0).abs() < 1e-15);
        assert!((avg.at(1, 0) - 20.0).abs() < 1e-15);
    }

    #[test]
    fn preservation_report_zero_for_identity_partition() {
        let m = normalize_mesh(&shapes::icosphere(1, 1.0)).unwrap();
        let n = m.n_vertices();
        let part = Partitioning::new((0..n).collect(), (0..n).collect()).unwrap();
        let ts = log_time_samples(0.01, 1.0, 4).unwrap();
        let report = spectral_preservation_report(&m, &part, 6, &ts).unwrap();
        for e in &report.aligned_errors {
            assert!(*e < 1e-6, "aligned error {e}");
        }
        for a in &report.principal_angles {
            assert!(*a < 1e-6, "principal angle {a}");
        }
        assert!(report.hks_rel_err < 1e-6);
    }

    #[test]
    fn preservation_report_scale_invariant() {
        let base = shapes::blob(2, 4);
        let scaled = Mesh::new(
            base.vertices()
                .iter()
                .map(|v| [v[0] * 7.0, v[1] * 7.0, v[2] * 7.0])
                .collect(),
            base.faces().to_vec(),
        )
        .unwrap();
        let ops = cotan_laplacian(&normalize_mesh(&base).unwrap()).unwrap();
        let dg = edge_distances(&ops, ClampMode::Exclude);
        let part = root_node_partition(&dg, 12, 0, 10).unwrap();
        let ts = log_time_samples(0.01, 1.0, 4).unwrap();
        let r1 = spectral_preservation_report(&base, &part, 4, &ts).unwrap();
        let r2 = spectral_preservation_report(&scaled, &part, 4, &ts).unwrap();
        for (a, b) in r1.aligned_errors.iter().zip(&r2.aligned_errors) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((r1.hks_rel_err - r2.hks_rel_err).abs() < 1e-6);
        assert!(r1.aligned_errors.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn assignment_file_roundtrip() {
        let (m, part) = sphere_part(1, 5);
        let dir = std::env::temp_dir().join("geotok-assign");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.json");
        save_assignment(&path, &part).unwrap();
        let loaded = load_assignment(&path, &m).unwrap();
        assert_eq!(loaded, part);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"p\""));
        assert!(text.contains("\"roots\""));
        assert!(text.contains("\"assignment\""));
    }

    #[test]
    fn apportionment_across_components() {
        // two tetrahedra, disjoint
        let mut verts = Vec::new();
        let mut faces = Vec::new();
        for off in [0.0, 10.0] {
            let base = verts.len();
            verts.extend([
                [off + 1.0, 1.0, 1.0],
                [off + 1.0, -1.0, -1.0],
                [off - 1.0, 1.0, -1.0],
                [off - 1.0, -1.0, 1.0],
            ]);
            faces.extend([
                [base, base + 1, base + 2],
                [base, base + 3, base + 1],
                [base, base + 2, base + 3],
                [base + 1, base + 3, base + 2],
            ]);
        }
        let m = Mesh::new(verts, faces).unwrap();
        let ops = cotan_laplacian(&normalize_mesh(&m).unwrap()).unwrap();
        let dg = edge_distances(&ops, ClampMode::Exclude);
        let part = root_node_partition(&dg, 4, 0, 10).unwrap();
        assert_eq!(part.p(), 4);
        // each component must hold at least one patch
        let comps = dg.components();
        for comp in comps {
            let pids: std::collections::HashSet<usize> =
                comp.iter().map(|&v| part.assignment()[v]).collect();
            assert!(!pids.is_empty());
        }
        // P = 1 across two components is impossible
        assert!(matches!(
            root_node_partition(&dg, 1, 0, 10),
            Err(Error::Apportionment(_))
        ));
        // P > N
        assert!(matches!(
            root_node_partition(&dg, 9, 0, 10),
            Err(Error::Domain(_))
        ));
    }
}
