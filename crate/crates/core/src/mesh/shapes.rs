//! Procedural test geometry: icospheres, uv-spheres, tori, boxes, and
//! smooth organic blobs. All generators are deterministic; randomized
//! variants take an explicit RNG.

use std::collections::HashMap;

use rand::Rng;

use crate::mesh::{norm, Mesh};
use crate::rng;

/// Icosphere of the given subdivision level and radius. Level 0 is the
/// icosahedron (12 vertices); each level quadruples the face count.
pub fn icosphere(subdiv: u32, radius: f64) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        let n = norm(*v);
        for c in v.iter_mut() {
            *c /= n;
        }
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdiv {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for c in 0..3 {
                let a = f[c];
                let b = f[(c + 1) % 3];
                let key = (a.min(b), a.max(b));
                mid[c] = *midpoint.entry(key).or_insert_with(|| {
                    let pa = vertices[a];
                    let pb = vertices[b];
                    let mut m = [
                        (pa[0] + pb[0]) / 2.0,
                        (pa[1] + pb[1]) / 2.0,
                        (pa[2] + pb[2]) / 2.0,
                    ];
                    let n = norm(m);
                    for c in m.iter_mut() {
                        *c /= n;
                    }
                    vertices.push(m);
                    vertices.len() - 1
                });
            }
            next_faces.push([f[0], mid[0], mid[2]]);
            next_faces.push([f[1], mid[1], mid[0]]);
            next_faces.push([f[2], mid[2], mid[1]]);
            next_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = next_faces;
    }

    for v in &mut vertices {
        for c in v.iter_mut() {
            *c *= radius;
        }
    }
    Mesh::new(vertices, faces).expect("icosphere construction is valid")
}

/// Latitude/longitude sphere with `rings` interior rings of `segments`
/// vertices plus two poles; total vertex count rings*segments + 2.
pub fn uv_sphere(rings: usize, segments: usize, radius: f64) -> Mesh {
    assert!(rings >= 1 && segments >= 3);
    let mut vertices = vec![[0.0, 0.0, radius]];
    for r in 1..=rings {
        let theta = std::f64::consts::PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            vertices.push([
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, -radius]);
    let south = vertices.len() - 1;
    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);

    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, idx(1, s), idx(1, s + 1)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            let a = idx(r, s);
            let b = idx(r, s + 1);
            let c = idx(r + 1, s);
            let d = idx(r + 1, s + 1);
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for s in 0..segments {
        faces.push([south, idx(rings, s + 1), idx(rings, s)]);
    }
    Mesh::new(vertices, faces).expect("uv sphere construction is valid")
}

/// Torus with `n_major` x `n_minor` grid resolution.
pub fn torus(n_major: usize, n_minor: usize, major_r: f64, minor_r: f64) -> Mesh {
    assert!(n_major >= 3 && n_minor >= 3);
    let mut vertices = Vec::with_capacity(n_major * n_minor);
    for i in 0..n_major {
        let u = 2.0 * std::f64::consts::PI * i as f64 / n_major as f64;
        for j in 0..n_minor {
            let v = 2.0 * std::f64::consts::PI * j as f64 / n_minor as f64;
            let ring = major_r + minor_r * v.cos();
            vertices.push([ring * u.cos(), ring * u.sin(), minor_r * v.sin()]);
        }
    }
    let idx = |i: usize, j: usize| (i % n_major) * n_minor + (j % n_minor);
    let mut faces = Vec::with_capacity(2 * n_major * n_minor);
    for i in 0..n_major {
        for j in 0..n_minor {
            let a = idx(i, j);
            let b = idx(i + 1, j);
            let c = idx(i + 1, j + 1);
            let d = idx(i, j + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    Mesh::new(vertices, faces).expect("torus construction is valid")
}

/// Axis-aligned cube surface spanning [-1,1]^3, each face an n x n quad
/// grid, shared edge vertices welded.
pub fn box_mesh(n: usize) -> Mesh {
    assert!(n >= 1);
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut lookup: HashMap<[u64; 3], usize> = HashMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let coord = |k: usize| -1.0 + 2.0 * k as f64 / n as f64;

    let mut intern = |p: [f64; 3]| -> usize {
        let key = [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
        *lookup.entry(key).or_insert_with(|| {
            vertices.push(p);
            vertices.len() - 1
        })
    };

    // each entry: (fixed axis, fixed value, axis u, axis v, flip winding)
    let sides = [
        (0usize, 1.0f64, 1usize, 2usize, false),
        (0, -1.0, 1, 2, true),
        (1, 1.0, 0, 2, true),
        (1, -1.0, 0, 2, false),
        (2, 1.0, 0, 1, false),
        (2, -1.0, 0, 1, true),
    ];
    for (axis, value, ua, va, flip) in sides {
        for i in 0..n {
            for j in 0..n {
                let mut corner = |di: usize, dj: usize| {
                    let mut p = [0.0; 3];
                    p[axis] = value;
                    p[ua] = coord(i + di);
                    p[va] = coord(j + dj);
                    intern(p)
                };
                let a = corner(0, 0);
                let b = corner(1, 0);
                let c = corner(1, 1);
                let d = corner(0, 1);
                if flip {
                    faces.push([a, c, b]);
                    faces.push([a, d, c]);
                } else {
                    faces.push([a, b, c]);
                    faces.push([a, c, d]);
                }
            }
        }
    }
    Mesh::new(vertices, faces).expect("box construction is valid")
}

/// Smooth asymmetric blob: an icosphere radially displaced by a seeded sum
/// of sinusoidal fields.
pub fn blob(subdiv: u32, seed: u64) -> Mesh {
    let base = icosphere(subdiv, 1.0);
    let mut rng = rng::seeded(seed);
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..5)
        .map(|_| {
            (
                rng::random_unit(&mut rng),
                rng.gen_range(1.5..4.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.04..0.12),
            )
        })
        .collect();
    let vertices = base
        .vertices()
        .iter()
        .map(|v| {
            let mut r = 1.0;
            for (dir, freq, phase, amp) in &waves {
                let t = v[0] * dir[0] + v[1] * dir[1] + v[2] * dir[2];
                r += amp * (freq * t * std::f64::consts::PI + phase).sin();
            }
            [v[0] * r, v[1] * r, v[2] * r]
        })
        .collect();
    Mesh::new(vertices, base.faces().to_vec()).expect("blob construction is valid")
}

/// Displace every vertex by a uniform random offset of magnitude at most
/// `magnitude` (absolute units).
pub fn jittered(mesh: &Mesh, magnitude: f64, rng: &mut impl Rng) -> Mesh {
    let vertices = mesh
        .vertices()
        .iter()
        .map(|v| {
            let dir = rng::random_unit(rng);
            let r = magnitude * rng.gen_range(0.0f64..1.0).cbrt();
            [v[0] + r * dir[0], v[1] + r * dir[1], v[2] + r * dir[2]]
        })
        .collect();
    Mesh::new(vertices, mesh.faces().to_vec()).expect("jitter preserves validity")
}
