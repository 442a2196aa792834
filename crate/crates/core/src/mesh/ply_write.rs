//! ASCII PLY writer with per-vertex RGB color, used for partition and
//! segmentation visualization.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::mesh::Mesh;

pub fn write_ply_colored(path: impl AsRef<Path>, mesh: &Mesh, colors: &[[u8; 3]]) -> Result<()> {
    assert_eq!(
        colors.len(),
        mesh.n_vertices(),
        "one color per vertex required"
    );
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", mesh.n_vertices()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str(&format!("element face {}\n", mesh.n_faces()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    for (v, c) in mesh.vertices().iter().zip(colors) {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            v[0], v[1], v[2], c[0], c[1], c[2]
        ));
    }
    for f in mesh.faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// ASCII OFF writer. Coordinates use shortest-roundtrip formatting, so a
/// reload reproduces the vertex data bit for bit.
pub fn write_off(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    let mut out = String::from("OFF\n");
    out.push_str(&format!(
        "{} {} {}\n",
        mesh.n_vertices(),
        mesh.n_faces(),
        0
    ));
    for v in mesh.vertices() {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Deterministic categorical palette; labels repeat after 24 entries.
pub fn categorical_color(label: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 24] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
        [128, 128, 0],
        [255, 215, 180],
        [0, 0, 128],
        [128, 128, 128],
        [255, 255, 255],
        [100, 60, 30],
        [60, 100, 160],
        [160, 60, 100],
    ];
    PALETTE[label % PALETTE.len()]
}

/// Map a scalar in [lo, hi] onto a blue-white-red ramp.
pub fn diverging_color(x: f64, lo: f64, hi: f64) -> [u8; 3] {
    let span = (hi - lo).max(1e-300);
    let t = ((x - lo) / span).clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (u, u, 1.0)
    } else {
        let u = (t - 0.5) * 2.0;
        (1.0, 1.0 - u, 1.0 - u)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}
