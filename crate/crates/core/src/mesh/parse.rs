//! ASCII OBJ / OFF / PLY readers. Non-triangular faces are fan-triangulated;
//! binary PLY is rejected with a pointer at the offending header line.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let name = path.display().to_string();
    let (vertices, polys) = match ext.as_str() {
        "obj" => parse_obj(&name, &text)?,
        "off" => parse_off(&name, &text)?,
        "ply" => parse_ply(&name, &text)?,
        other => {
            return Err(Error::validation(format!(
                "unsupported mesh extension '.{other}' for {name}; expected .obj, .off or .ply"
            )))
        }
    };
    let faces = fan_triangulate(&name, &polys)?;
    Mesh::new(vertices, faces)
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn fan_triangulate(path: &str, polys: &[(usize, Vec<usize>)]) -> Result<Vec<[usize; 3]>> {
    let mut faces = Vec::with_capacity(polys.len());
    for (line, poly) in polys {
        if poly.len() < 3 {
            return Err(parse_err(
                path,
                *line,
                format!("face with {} vertices; need at least 3", poly.len()),
            ));
        }
        for i in 1..poly.len() - 1 {
            faces.push([poly[0], poly[i], poly[i + 1]]);
        }
    }
    Ok(faces)
}

type Polys = Vec<(usize, Vec<usize>)>;

fn parse_f64(path: &str, line: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a number, found '{tok}'")))
}

fn parse_usize(path: &str, line: usize, tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("expected a non-negative integer, found '{tok}'")))
}

fn parse_obj(path: &str, text: &str) -> Result<(Vec<[f64; 3]>, Polys)> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut polys: Polys = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<&str> = toks.collect();
                if coords.len() < 3 {
                    return Err(parse_err(path, lineno, "vertex needs 3 coordinates"));
                }
                let mut v = [0.0; 3];
                for k in 0..3 {
                    v[k] = parse_f64(path, lineno, coords[k])?;
                }
                vertices.push(v);
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in toks {
                    let first = tok.split('/').next().unwrap_or("");
                    let signed: i64 = first.parse().map_err(|_| {
                        parse_err(path, lineno, format!("bad face index '{tok}'"))
                    })?;
                    let resolved = if signed > 0 {
                        (signed - 1) as usize
                    } else if signed < 0 {
                        let rel = vertices.len() as i64 + signed;
                        if rel < 0 {
                            return Err(parse_err(
                                path,
                                lineno,
                                format!("relative face index '{tok}' precedes first vertex"),
                            ));
                        }
                        rel as usize
                    } else {
                        return Err(parse_err(path, lineno, "face index 0 is invalid in OBJ"));
                    };
                    poly.push(resolved);
                }
                polys.push((lineno, poly));
            }
            // normals, texcoords, groups, materials: ignored
            _ => {}
        }
    }
    Ok((vertices, polys))
}

fn parse_off(path: &str, text: &str) -> Result<(Vec<[f64; 3]>, Polys)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (first_no, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty OFF file"))?;
    let counts_line: Option<(usize, String)> = if first == "OFF" {
        None
    } else if let Some(rest) = first.strip_prefix("OFF") {
        Some((first_no, rest.trim().to_string()))
    } else {
        return Err(parse_err(path, first_no, "expected OFF header"));
    };
    let (counts_no, counts_str) = match counts_line {
        Some(c) => c,
        None => {
            let (no, l) = lines
                .next()
                .ok_or_else(|| parse_err(path, first_no, "missing OFF counts line"))?;
            (no, l.to_string())
        }
    };
    let counts: Vec<&str> = counts_str.split_whitespace().collect();
    if counts.len() < 2 {
        return Err(parse_err(path, counts_no, "OFF counts need <nv> <nf> [ne]"));
    }
    let nv = parse_usize(path, counts_no, counts[0])?;
    let nf = parse_usize(path, counts_no, counts[1])?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_no, "unexpected end of file in vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, no, "vertex needs 3 coordinates"));
        }
        vertices.push([
            parse_f64(path, no, toks[0])?,
            parse_f64(path, no, toks[1])?,
            parse_f64(path, no, toks[2])?,
        ]);
    }
    let mut polys = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, counts_no, "unexpected end of file in face list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.is_empty() {
            return Err(parse_err(path, no, "empty face line"));
        }
        let k = parse_usize(path, no, toks[0])?;
        if toks.len() < 1 + k {
            return Err(parse_err(path, no, format!("face promises {k} indices")));
        }
        let mut poly = Vec::with_capacity(k);
        for tok in &toks[1..1 + k] {
            poly.push(parse_usize(path, no, tok)?);
        }
        polys.push((no, poly));
    }
    Ok((vertices, polys))
}

fn parse_ply(path: &str, text: &str) -> Result<(Vec<[f64; 3]>, Polys)> {
    #[derive(Default)]
    struct Element {
        name: String,
        count: usize,
        props: Vec<String>,
        has_list: bool,
    }

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (no, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty PLY file"))?;
    if magic != "ply" {
        return Err(parse_err(path, no, "missing 'ply' magic"));
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    let header_end;
    loop {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 1, "header missing end_header"))?;
        if l.is_empty() || l.starts_with("comment") {
            continue;
        }
        if l == "end_header" {
            header_end = no;
            break;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "format" => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(parse_err(
                        path,
                        no,
                        "only ASCII PLY is supported; binary PLY is rejected",
                    ));
                }
                saw_format = true;
            }
            "element" => {
                if toks.len() < 3 {
                    return Err(parse_err(path, no, "element needs name and count"));
                }
                elements.push(Element {
                    name: toks[1].to_string(),
                    count: parse_usize(path, no, toks[2])?,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, no, "property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    el.has_list = true;
                } else if let Some(name) = toks.last() {
                    el.props.push(name.to_string());
                }
            }
            _ => {}
        }
    }
    if !saw_format {
        return Err(parse_err(path, header_end, "missing format line"));
    }

    let mut vertices = Vec::new();
    let mut polys: Polys = Vec::new();
    for el in &elements {
        if el.name == "vertex" {
            let (xi, yi, zi) = (
                el.props.iter().position(|p| p == "x"),
                el.props.iter().position(|p| p == "y"),
                el.props.iter().position(|p| p == "z"),
            );
            let (xi, yi, zi) = match (xi, yi, zi) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => {
                    return Err(parse_err(
                        path,
                        header_end,
                        "vertex element must declare x, y, z properties",
                    ))
                }
            };
            for _ in 0..el.count {
                let (no, l) = lines
                    .next()
                    .ok_or_else(|| parse_err(path, header_end, "unexpected end of vertex data"))?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.len() < el.props.len() {
                    return Err(parse_err(path, no, "vertex line has too few values"));
                }
                vertices.push([
                    parse_f64(path, no, toks[xi])?,
                    parse_f64(path, no, toks[yi])?,
                    parse_f64(path, no, toks[zi])?,
                ]);
            }
        } else if el.name == "face" {
            for _ in 0..el.count {
                let (no, l) = lines
                    .next()
                    .ok_or_else(|| parse_err(path, header_end, "unexpected end of face data"))?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.is_empty() {
                    return Err(parse_err(path, no, "empty face line"));
                }
                let k = parse_usize(path, no, toks[0])?;
                if toks.len() < 1 + k {
                    return Err(parse_err(path, no, format!("face promises {k} indices")));
                }
                let mut poly = Vec::with_capacity(k);
                for tok in &toks[1..1 + k] {
                    poly.push(parse_usize(path, no, tok)?);
                }
                polys.push((no, poly));
            }
        } else {
            // skip unknown element payload
            for _ in 0..el.count {
                lines.next();
            }
        }
    }
    Ok((vertices, polys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("geotok-parse-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn off_tetrahedron() {
        let p = write_temp(
            "tet.off",
            "OFF\n4 4 6\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.n_vertices(), 4);
        assert_eq!(m.n_faces(), 4);
    }

    #[test]
    fn obj_quad_fan_triangulates() {
        let p = write_temp(
            "quad.obj",
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.n_faces(), 2);
        assert_eq!(m.faces()[0], [0, 1, 2]);
        assert_eq!(m.faces()[1], [0, 2, 3]);
    }

    #[test]
    fn obj_slash_forms_and_negative_indices() {
        let p = write_temp(
            "slashes.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2//2 -1\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.faces()[0], [0, 1, 2]);
    }

    #[test]
    fn out_of_range_index_is_validation_error() {
        let p = write_temp("bad.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 4\n");
        let err = load_mesh(&p).unwrap_err();
        assert!(matches!(err, crate::error::Error::Validation(_)), "{err}");
    }

    #[test]
    fn parse_error_names_line() {
        let p = write_temp("badline.off", "OFF\n3 1 0\n0 0 0\nnot-a-number 0 0\n0 1 0\n3 0 1 2\n");
        match load_mesh(&p).unwrap_err() {
            crate::error::Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn binary_ply_rejected() {
        let p = write_temp(
            "bin.ply",
            "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
        );
        match load_mesh(&p).unwrap_err() {
            crate::error::Error::Parse { msg, .. } => assert!(msg.contains("binary")),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn ascii_ply_roundtrip() {
        let p = write_temp(
            "tri.ply",
            "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
        );
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.n_faces(), 1);
    }
}
