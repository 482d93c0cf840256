//! Set-level generation metrics and correspondence-based pose errors.
//!
//! Nearest-neighbour ties are always broken toward the lower index.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mesh::{procrustes_align, Point};

fn sq(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

fn mean_min_sq(a: &[Point], b: &[Point]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / a.len() as f64
}

/// Mean over `a` of the squared distance to the nearest point of `b`, plus
/// the same from `b` to `a`.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty point sets"));
    }
    Ok(mean_min_sq(a, b) + mean_min_sq(b, a))
}

/// Mean squared distance between corresponding vertices.
pub fn correspondence_l2(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("correspondence distance needs equal, non-empty vertex lists"));
    }
    Ok(a.iter().zip(b).map(|(p, q)| sq(p, q)).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeDistance {
    Chamfer,
    /// Shapes share a topology; compare vertex by vertex.
    Correspondence,
}

impl std::str::FromStr for ShapeDistance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chamfer" => Ok(Self::Chamfer),
            "l2" | "correspondence" => Ok(Self::Correspondence),
            _ => Err(Error::invalid(format!("unknown shape distance `{s}`"))),
        }
    }
}

impl ShapeDistance {
    pub fn name(self) -> &'static str {
        match self {
            Self::Chamfer => "chamfer",
            Self::Correspondence => "l2",
        }
    }
}

/// Distance between two shapes; with `aligned`, `a` is first moved onto `b`
/// by the rigid (rotation + translation) Procrustes fit over corresponding
/// vertices.
pub fn shape_distance(a: &[Point], b: &[Point], dist: ShapeDistance, aligned: bool) -> Result<f64> {
    let moved;
    let a = if aligned {
        if a.len() != b.len() {
            return Err(Error::invalid("rigid alignment needs shapes with matching vertices"));
        }
        moved = procrustes_align(a, b, false)?.aligned;
        &moved[..]
    } else {
        a
    };
    match dist {
        ShapeDistance::Chamfer => chamfer(a, b),
        ShapeDistance::Correspondence => correspondence_l2(a, b),
    }
}

/// `d[i][j]` between `rows[i]` and `cols[j]`.
pub fn distance_matrix(
    rows: &[Vec<Point>],
    cols: &[Vec<Point>],
    dist: ShapeDistance,
    aligned: bool,
) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|a| cols.iter().map(|b| shape_distance(a, b, dist, aligned)).collect())
        .collect()
}

/// Index of the smallest entry, skipping `skip`; ties go to the lower index.
fn argmin(row: &[f64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &d) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        if best.is_none_or(|b| d < row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Symmetric distances over `gen` followed by `reference`; entry `[i][j]`
/// for `i < j` is computed as `shape_distance(pool[i], pool[j])`.
pub fn pooled_matrix(
    gen: &[Vec<Point>],
    reference: &[Vec<Point>],
    dist: ShapeDistance,
    aligned: bool,
) -> Result<Vec<Vec<f64>>> {
    let pool: Vec<&Vec<Point>> = gen.iter().chain(reference).collect();
    let n = pool.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = shape_distance(pool[i], pool[j], dist, aligned)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Leave-one-out 1-NN accuracy (percent) of telling `gen` from `reference`
/// in the pooled set. 50% means indistinguishable.
pub fn one_nna(gen: &[Vec<Point>], reference: &[Vec<Point>], dist: ShapeDistance, aligned: bool) -> Result<f64> {
    if gen.len() < 2 || reference.len() < 2 {
        return Err(Error::invalid("1-NNA needs at least two shapes per set"));
    }
    Ok(one_nna_from_matrix(&pooled_matrix(gen, reference, dist, aligned)?, gen.len()))
}

/// 1-NNA from a pooled symmetric distance matrix whose first `n_gen`
/// entries are generated shapes.
pub fn one_nna_from_matrix(d: &[Vec<f64>], n_gen: usize) -> f64 {
    let n = d.len();
    let correct = (0..n)
        .filter(|&i| {
            let j = argmin(&d[i], Some(i)).expect("pool has at least two shapes");
            (i < n_gen) == (j < n_gen)
        })
        .count();
    100.0 * correct as f64 / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdCov {
    pub mmd: f64,
    /// percent of reference shapes that are some generated shape's nearest neighbour
    pub cov: f64,
}

pub fn mmd_cov(gen: &[Vec<Point>], reference: &[Vec<Point>], dist: ShapeDistance, aligned: bool) -> Result<MmdCov> {
    if gen.is_empty() || reference.is_empty() {
        return Err(Error::invalid("MMD/COV need non-empty sets"));
    }
    let d = distance_matrix(gen, reference, dist, aligned)?;
    Ok(mmd_cov_from_matrix(&d))
}

/// From `d[g][r]` between generated and reference shapes.
pub fn mmd_cov_from_matrix(d: &[Vec<f64>]) -> MmdCov {
    let n_ref = d[0].len();
    let mmd = (0..n_ref)
        .map(|r| d.iter().map(|row| row[r]).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / n_ref as f64;
    let mut covered = vec![false; n_ref];
    for row in d {
        covered[argmin(row, None).expect("non-empty reference")] = true;
    }
    MmdCov {
        mmd,
        cov: 100.0 * covered.iter().filter(|&&c| c).count() as f64 / n_ref as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseErrors {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpve: f64,
}

fn mean_euclidean(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("pose errors need matched, non-empty point lists"));
    }
    Ok(a.iter().zip(b).map(|(p, q)| sq(p, q).sqrt()).sum::<f64>() / a.len() as f64)
}

/// Mean joint and vertex distances; the PA variant first removes the
/// similarity transform (scale, rotation, translation) between the joints.
pub fn pose_errors(pred_joints: &[Point], gt_joints: &[Point], pred_verts: &[Point], gt_verts: &[Point]) -> Result<PoseErrors> {
    let mpjpe = mean_euclidean(pred_joints, gt_joints)?;
    let pa = procrustes_align(pred_joints, gt_joints, true)?;
    Ok(PoseErrors {
        mpjpe,
        pa_mpjpe: mean_euclidean(&pa.aligned, gt_joints)?,
        mpve: mean_euclidean(pred_verts, gt_verts)?,
    })
}

/// Scales every shape by `1/diagonal`.
pub fn normalize(shapes: &[Vec<Point>], diagonal: f64) -> Result<Vec<Vec<Point>>> {
    if !(diagonal > 0.0 && diagonal.is_finite()) {
        return Err(Error::invalid(format!("normalizing diagonal must be positive, got {diagonal}")));
    }
    let s = (1.0 / diagonal) as f32;
    Ok(shapes
        .iter()
        .map(|v| v.iter().map(|p| p.map(|c| c * s)).collect())
        .collect())
}

/// Named metric values, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.rows.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in &self.rows {
            let _ = writeln!(s, "{n},{v}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  value\n", "metric");
        for (n, v) in &self.rows {
            let _ = writeln!(s, "{n:<width$}  {v:.6}");
        }
        s
    }
}
