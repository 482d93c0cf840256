use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f32; 3];

/// Compressed-row sparse matrix with f64 weights, applied to point arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, v) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sparse entry ({r}, {c})")));
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, v)| v).sum()
    }

    /// `self · points`, computed in f64.
    pub fn apply(&self, points: &[Point]) -> Result<Vec<Point>> {
        if points.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "sparse apply",
                lhs: vec![self.rows, self.cols],
                rhs: vec![points.len(), 3],
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                let mut acc = [0.0f64; 3];
                for (c, w) in self.row(r) {
                    for k in 0..3 {
                        acc[k] += w * points[c][k] as f64;
                    }
                }
                acc.map(|v| v as f32)
            })
            .collect())
    }

    /// `selfᵀ · values` for per-row 3-vectors (used to pull gradients back).
    pub fn apply_transpose(&self, values: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
        if values.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "sparse apply_transpose",
                lhs: vec![self.rows, self.cols],
                rhs: vec![values.len(), 3],
            });
        }
        let mut out = vec![[0.0f64; 3]; self.cols];
        for (r, v) in values.iter().enumerate() {
            for (c, w) in self.row(r) {
                for k in 0..3 {
                    out[c][k] += w * v[k];
                }
            }
        }
        Ok(out)
    }
}

/// Named joints used for canonical alignment and control.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Landmarks {
    pub pelvis: usize,
    pub neck: usize,
    pub hip_left: usize,
    pub hip_right: usize,
    pub end_effectors: Vec<usize>,
}

/// Fixed connectivity shared by every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshTopology {
    pub n_coarse: usize,
    pub n_dense: usize,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<Option<usize>>,
    pub faces_dense: Vec<[usize; 3]>,
    pub faces_coarse: Vec<[usize; 3]>,
    pub edges_coarse: Vec<[usize; 2]>,
    pub laplacian_coarse: SparseMatrix,
    pub joint_regressor: SparseMatrix,
    pub downsample: SparseMatrix,
    pub landmarks: Landmarks,
    /// Rest-pose coarse vertices; the template for deformation and for
    /// template-based positional embeddings.
    pub rest_coarse: Vec<Point>,
    pub rest_joints: Vec<Point>,
}

/// Parts needed to assemble a [`MeshTopology`]; the Laplacian is derived.
#[derive(Clone, Debug)]
pub struct TopologyParts {
    pub n_coarse: usize,
    pub n_dense: usize,
    pub joint_names: Vec<String>,
    pub joint_parents: Vec<Option<usize>>,
    pub faces_dense: Vec<[usize; 3]>,
    pub faces_coarse: Vec<[usize; 3]>,
    pub edges_coarse: Vec<[usize; 2]>,
    pub regressor: Vec<(usize, usize, f64)>,
    pub downsample: Vec<(usize, usize, f64)>,
    pub landmarks: Landmarks,
    pub rest_coarse: Vec<Point>,
    pub rest_joints: Vec<Point>,
}

/// Uniform umbrella Laplacian: `δᵢ = vᵢ − mean(neighbors)`.
/// Vertices without neighbors get an identity row.
pub fn umbrella_laplacian(n: usize, edges: &[[usize; 2]]) -> Result<SparseMatrix> {
    let mut nbrs = vec![Vec::new(); n];
    for &[a, b] in edges {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut trip = Vec::new();
    for (i, list) in nbrs.iter_mut().enumerate() {
        list.sort_unstable();
        list.dedup();
        trip.push((i, i, 1.0));
        let w = 1.0 / list.len().max(1) as f64;
        for &j in list.iter() {
            trip.push((i, j, -w));
        }
    }
    SparseMatrix::from_triplets(n, n, &trip)
}

impl MeshTopology {
    pub fn new(p: TopologyParts) -> Result<Self> {
        let n_joints = p.joint_names.len();
        if p.joint_parents.len() != n_joints {
            return Err(Error::invalid("joint parent list does not match joint names"));
        }
        for (j, parent) in p.joint_parents.iter().enumerate() {
            if matches!(parent, Some(q) if *q >= n_joints || *q == j) {
                return Err(Error::invalid(format!("joint {j} has invalid parent")));
            }
        }
        for &[a, b] in &p.edges_coarse {
            if a >= p.n_coarse || b >= p.n_coarse {
                return Err(Error::invalid(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::invalid(format!("degenerate edge ({a}, {a})")));
            }
        }
        for f in &p.faces_dense {
            if f.iter().any(|&i| i >= p.n_dense) {
                return Err(Error::invalid(format!("dense face {f:?} out of range")));
            }
        }
        for f in &p.faces_coarse {
            if f.iter().any(|&i| i >= p.n_coarse) {
                return Err(Error::invalid(format!("coarse face {f:?} out of range")));
            }
        }
        let lm = &p.landmarks;
        for idx in [lm.pelvis, lm.neck, lm.hip_left, lm.hip_right]
            .into_iter()
            .chain(lm.end_effectors.iter().copied())
        {
            if idx >= n_joints {
                return Err(Error::invalid(format!("landmark joint {idx} out of range")));
            }
        }
        let joint_regressor = SparseMatrix::from_triplets(n_joints, p.n_dense, &p.regressor)?;
        for j in 0..n_joints {
            let s = joint_regressor.row_sum(j);
            if (s - 1.0).abs() > 1e-6 || joint_regressor.row(j).any(|(_, w)| w < 0.0) {
                return Err(Error::invalid(format!(
                    "regressor row {j} must be nonnegative and sum to 1 (sum {s})"
                )));
            }
        }
        let downsample = SparseMatrix::from_triplets(p.n_coarse, p.n_dense, &p.downsample)?;
        if p.rest_coarse.len() != p.n_coarse || p.rest_joints.len() != n_joints {
            return Err(Error::invalid("rest template size does not match topology"));
        }
        let laplacian_coarse = umbrella_laplacian(p.n_coarse, &p.edges_coarse)?;
        Ok(Self {
            n_coarse: p.n_coarse,
            n_dense: p.n_dense,
            joint_names: p.joint_names,
            joint_parents: p.joint_parents,
            faces_dense: p.faces_dense,
            faces_coarse: p.faces_coarse,
            edges_coarse: p.edges_coarse,
            laplacian_coarse,
            joint_regressor,
            downsample,
            landmarks: p.landmarks,
            rest_coarse: p.rest_coarse,
            rest_joints: p.rest_joints,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    /// Number of coarse vertices with no incident edge.
    pub fn isolated_vertices(&self) -> usize {
        (0..self.n_coarse)
            .filter(|&i| self.laplacian_coarse.row(i).count() == 1)
            .count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("meshdiff-topology 1\n");
        let _ = writeln!(s, "counts {} {}", self.n_coarse, self.n_dense);
        for (name, parent) in self.joint_names.iter().zip(&self.joint_parents) {
            let p = parent.map_or("-".to_string(), |q| self.joint_names[q].clone());
            let _ = writeln!(s, "joint {name} {p}");
        }
        let lm = &self.landmarks;
        for (role, j) in [
            ("pelvis", lm.pelvis),
            ("neck", lm.neck),
            ("hip_left", lm.hip_left),
            ("hip_right", lm.hip_right),
        ] {
            let _ = writeln!(s, "landmark {role} {}", self.joint_names[j]);
        }
        for &j in &lm.end_effectors {
            let _ = writeln!(s, "landmark end_effector {}", self.joint_names[j]);
        }
        for [a, b] in &self.edges_coarse {
            let _ = writeln!(s, "edge {a} {b}");
        }
        for [a, b, c] in &self.faces_dense {
            let _ = writeln!(s, "face {a} {b} {c}");
        }
        for [a, b, c] in &self.faces_coarse {
            let _ = writeln!(s, "cface {a} {b} {c}");
        }
        for (j, m, w) in self.joint_regressor.triplets() {
            let _ = writeln!(s, "regressor {j} {m} {w}");
        }
        for (n, m, w) in self.downsample.triplets() {
            let _ = writeln!(s, "downsample {n} {m} {w}");
        }
        for [x, y, z] in &self.rest_coarse {
            let _ = writeln!(s, "rest_vertex {x} {y} {z}");
        }
        for [x, y, z] in &self.rest_joints {
            let _ = writeln!(s, "rest_joint {x} {y} {z}");
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "meshdiff-topology 1")) => {}
            _ => return Err(Error::parse(origin, 1, "not a meshdiff topology file")),
        }
        let mut counts = None;
        let mut names: Vec<String> = Vec::new();
        let mut parent_names: Vec<String> = Vec::new();
        let mut roles: Vec<(usize, String, String)> = Vec::new();
        let mut edges = Vec::new();
        let mut faces = Vec::new();
        let mut cfaces = Vec::new();
        let mut regressor = Vec::new();
        let mut downsample = Vec::new();
        let mut rest_v = Vec::new();
        let mut rest_j = Vec::new();
        for (ln, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let Some((&kind, args)) = toks.split_first() else { continue };
            let bad = |msg: &str| Error::parse(origin, ln, format!("{msg}: `{line}`"));
            let us = |i: usize| -> Result<usize> {
                args.get(i).and_then(|t| t.parse().ok()).ok_or_else(|| bad("expected index"))
            };
            let fl = |i: usize| -> Result<f64> {
                args.get(i).and_then(|t| t.parse().ok()).ok_or_else(|| bad("expected number"))
            };
            let point = || -> Result<Point> { Ok([fl(0)? as f32, fl(1)? as f32, fl(2)? as f32]) };
            match kind {
                "counts" => counts = Some((us(0)?, us(1)?)),
                "joint" => {
                    let [name, parent] = args else { return Err(bad("expected `joint <name> <parent>`")) };
                    names.push(name.to_string());
                    parent_names.push(parent.to_string());
                }
                "landmark" => {
                    let [role, name] = args else { return Err(bad("expected `landmark <role> <joint>`")) };
                    roles.push((ln, role.to_string(), name.to_string()));
                }
                "edge" => edges.push([us(0)?, us(1)?]),
                "face" => faces.push([us(0)?, us(1)?, us(2)?]),
                "cface" => cfaces.push([us(0)?, us(1)?, us(2)?]),
                "regressor" => regressor.push((us(0)?, us(1)?, fl(2)?)),
                "downsample" => downsample.push((us(0)?, us(1)?, fl(2)?)),
                "rest_vertex" => rest_v.push(point()?),
                "rest_joint" => rest_j.push(point()?),
                _ => return Err(bad("unknown record")),
            }
        }
        let (n_coarse, n_dense) = counts.ok_or_else(|| Error::parse(origin, 0, "missing counts"))?;
        let lookup = |name: &str, ln: usize| {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::parse(origin, ln, format!("unknown joint `{name}`")))
        };
        let parents = parent_names
            .iter()
            .map(|p| if p == "-" { Ok(None) } else { lookup(p, 0).map(Some) })
            .collect::<Result<Vec<_>>>()?;
        let (mut pelvis, mut neck, mut hl, mut hr, mut ee) = (None, None, None, None, Vec::new());
        for (ln, role, name) in &roles {
            let j = lookup(name, *ln)?;
            match role.as_str() {
                "pelvis" => pelvis = Some(j),
                "neck" => neck = Some(j),
                "hip_left" => hl = Some(j),
                "hip_right" => hr = Some(j),
                "end_effector" => ee.push(j),
                other => return Err(Error::parse(origin, *ln, format!("unknown landmark role `{other}`"))),
            }
        }
        let need = |v: Option<usize>, role: &str| {
            v.ok_or_else(|| Error::parse(origin, 0, format!("missing landmark `{role}`")))
        };
        MeshTopology::new(TopologyParts {
            n_coarse,
            n_dense,
            joint_names: names.clone(),
            joint_parents: parents,
            faces_dense: faces,
            faces_coarse: cfaces,
            edges_coarse: edges,
            regressor,
            downsample,
            landmarks: Landmarks {
                pelvis: need(pelvis, "pelvis")?,
                neck: need(neck, "neck")?,
                hip_left: need(hl, "hip_left")?,
                hip_right: need(hr, "hip_right")?,
                end_effectors: ee,
            },
            rest_coarse: rest_v,
            rest_joints: rest_j,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn umbrella_rows_sum_to_zero() {
        let edges = [[0, 1], [1, 2], [2, 0], [2, 3]];
        let l = umbrella_laplacian(5, &edges).unwrap();
        for r in 0..4 {
            assert!(l.row_sum(r).abs() < 1e-12);
            let diag: f64 = l.row(r).filter(|&(c, _)| c == r).map(|(_, v)| v).sum();
            assert_eq!(diag, 1.0);
        }
        // isolated vertex 4 keeps an identity row
        assert_eq!(l.row(4).collect::<Vec<_>>(), vec![(4, 1.0)]);
        assert_eq!(l.row(3).collect::<Vec<_>>(), vec![(2, -1.0), (3, 1.0)]);
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let m = SparseMatrix::from_triplets(1, 2, &[(0, 1, 0.25), (0, 1, 0.25), (0, 0, 0.5)]).unwrap();
        assert_eq!(m.triplets(), vec![(0, 0, 0.5), (0, 1, 0.5)]);
        assert!(SparseMatrix::from_triplets(1, 1, &[(1, 0, 1.0)]).is_err());
    }
}
