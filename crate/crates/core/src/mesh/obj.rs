use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::topology::Point;
use crate::error::{Error, Result};

/// Contents of a Wavefront OBJ file restricted to `v`, `vn` and `f` records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Point>,
    pub normals: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
}

fn resolve(tok: &str, count: usize, origin: &str, ln: usize) -> Result<usize> {
    let head = tok.split('/').next().unwrap_or("");
    let idx: i64 = head
        .parse()
        .map_err(|_| Error::parse(origin, ln, format!("bad face index `{tok}`")))?;
    let zero = match idx {
        0 => return Err(Error::parse(origin, ln, "face index 0 is not valid in OBJ")),
        i if i > 0 => i as usize - 1,
        i => {
            // negative indices count back from the latest vertex
            let back = (-i) as usize;
            if back > count {
                return Err(Error::parse(origin, ln, format!("face index {i} out of range")));
            }
            count - back
        }
    };
    Ok(zero)
}

pub fn parse_obj(text: &str, origin: &str) -> Result<ObjMesh> {
    let mut mesh = ObjMesh::default();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut toks = line.split_whitespace();
        let Some(kind) = toks.next() else { continue };
        let rest: Vec<&str> = toks.collect();
        let coords = || -> Result<Point> {
            if rest.len() < 3 {
                return Err(Error::parse(origin, ln, format!("expected 3 coordinates: `{line}`")));
            }
            let mut p = [0.0f32; 3];
            for k in 0..3 {
                p[k] = rest[k]
                    .parse()
                    .map_err(|_| Error::parse(origin, ln, format!("bad number `{}`", rest[k])))?;
            }
            Ok(p)
        };
        match kind {
            "v" => mesh.vertices.push(coords()?),
            "vn" => mesh.normals.push(coords()?),
            "f" => {
                if rest.len() < 3 {
                    return Err(Error::parse(origin, ln, "face needs at least 3 vertices"));
                }
                let idx = rest
                    .iter()
                    .map(|t| resolve(t, mesh.vertices.len(), origin, ln))
                    .collect::<Result<Vec<_>>>()?;
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            "vt" | "o" | "g" | "s" | "usemtl" | "mtllib" => {}
            other => return Err(Error::parse(origin, ln, format!("unsupported record `{other}`"))),
        }
    }
    let n = mesh.vertices.len();
    if let Some(f) = mesh.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
        return Err(Error::parse(origin, 0, format!("face {f:?} references missing vertex")));
    }
    Ok(mesh)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<ObjMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, &path.display().to_string())
}

pub fn format_obj(vertices: &[Point], faces: &[[usize; 3]], normals: Option<&[Point]>) -> String {
    let mut s = String::new();
    for [x, y, z] in vertices {
        let _ = writeln!(s, "v {x:.6} {y:.6} {z:.6}");
    }
    for [x, y, z] in normals.unwrap_or(&[]) {
        let _ = writeln!(s, "vn {x:.6} {y:.6} {z:.6}");
    }
    let with_normals = normals.is_some_and(|n| n.len() == vertices.len());
    for [a, b, c] in faces {
        let (a, b, c) = (a + 1, b + 1, c + 1);
        if with_normals {
            let _ = writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn save_obj(
    path: impl AsRef<Path>,
    vertices: &[Point],
    faces: &[[usize; 3]],
    normals: Option<&[Point]>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_obj(vertices, faces, normals)).map_err(|e| Error::io(path, e))
}
