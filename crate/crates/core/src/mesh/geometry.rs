use nalgebra::{Matrix3, Vector3};

use super::topology::{Landmarks, MeshTopology, Point};
use crate::error::{Error, Result};

pub(crate) fn vec3(p: &Point) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

pub(crate) fn point(v: &Vector3<f64>) -> Point {
    [v.x as f32, v.y as f32, v.z as f32]
}

pub fn edge_lengths(vertices: &[Point], topo: &MeshTopology) -> Result<Vec<f64>> {
    if vertices.len() != topo.n_coarse {
        return Err(Error::ShapeMismatch {
            op: "edge_lengths",
            lhs: vec![vertices.len(), 3],
            rhs: vec![topo.n_coarse, 3],
        });
    }
    Ok(topo
        .edges_coarse
        .iter()
        .map(|&[a, b]| (vec3(&vertices[a]) - vec3(&vertices[b])).norm())
        .collect())
}

/// Umbrella Laplacian coordinates `L·v` of the coarse mesh.
pub fn laplacian_coords(vertices: &[Point], topo: &MeshTopology) -> Result<Vec<Point>> {
    topo.laplacian_coarse.apply(vertices)
}

pub fn regress_joints(dense: &[Point], topo: &MeshTopology) -> Result<Vec<Point>> {
    topo.joint_regressor.apply(dense)
}

/// Rotation, translation and scale mapping `p ↦ s·R·p + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        point(&(self.scale * self.rotation * vec3(p) + self.translation))
    }

    pub fn apply_all(&self, pts: &[Point]) -> Vec<Point> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    /// Rotates without translating or scaling; for directions and normals.
    pub fn rotate(&self, p: &Point) -> Point {
        point(&(self.rotation * vec3(p)))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.scale * self.rotation * other.translation + self.translation,
            scale: self.scale * other.scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub transform: Similarity,
    pub aligned: Vec<Point>,
    /// Root-mean-square distance between aligned source and target.
    pub rms: f64,
    /// The cross-covariance was rank-deficient; the rotation is one of many.
    pub degenerate: bool,
}

/// Least-squares similarity (or rigid, `with_scale = false`) alignment of
/// `source` onto `target`, with the reflection guard `det R = +1`.
pub fn procrustes_align(source: &[Point], target: &[Point], with_scale: bool) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "procrustes_align",
            lhs: vec![source.len(), 3],
            rhs: vec![target.len(), 3],
        });
    }
    let k = source.len();
    if k < 3 {
        return Err(Error::invalid(format!("procrustes needs at least 3 points, got {k}")));
    }
    let src: Vec<Vector3<f64>> = source.iter().map(vec3).collect();
    let dst: Vec<Vector3<f64>> = target.iter().map(vec3).collect();
    let mu_s = src.iter().sum::<Vector3<f64>>() / k as f64;
    let mu_t = dst.iter().sum::<Vector3<f64>>() / k as f64;
    let var_s = src.iter().map(|s| (s - mu_s).norm_squared()).sum::<f64>() / k as f64;
    if var_s <= 1e-24 {
        return Err(Error::Degenerate("procrustes source points coincide".into()));
    }
    let mut cov = Matrix3::zeros();
    for (s, t) in src.iter().zip(&dst) {
        cov += (t - mu_t) * (s - mu_s).transpose();
    }
    cov /= k as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // nalgebra does not sort singular values; order them descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let degenerate = sv[order[1]] <= 1e-12 * sv[order[0]].max(1e-300);
    let d = (u.determinant() * v_t.determinant()).signum();
    let mut dmat = Matrix3::identity();
    // flip the direction with the smallest singular value
    dmat[(order[2], order[2])] = if d < 0.0 { -1.0 } else { 1.0 };
    let rotation = u * dmat * v_t;
    let scale = if with_scale {
        (0..3).map(|i| sv[i] * dmat[(i, i)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let translation = mu_t - scale * rotation * mu_s;
    let transform = Similarity {
        rotation,
        translation,
        scale,
    };
    let aligned = transform.apply_all(source);
    let rms = (aligned
        .iter()
        .zip(&dst)
        .map(|(a, t)| (vec3(a) - t).norm_squared())
        .sum::<f64>()
        / k as f64)
        .sqrt();
    Ok(Alignment {
        transform,
        aligned,
        rms,
        degenerate,
    })
}

/// Spherical interpolation of two flat vectors; `w` may leave `[0, 1]`.
pub fn slerp(a: &[f32], b: &[f32], w: f64) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "slerp",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("slerp endpoints must be nonzero"));
    }
    let dot = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    if std::f64::consts::PI - omega < 1e-6 {
        return Err(Error::invalid("slerp endpoints are antipodal; the great circle is undefined"));
    }
    let (ca, cb) = if omega.sin() < 1e-8 {
        (1.0 - w, w)
    } else {
        let s = omega.sin();
        (((1.0 - w) * omega).sin() / s, (w * omega).sin() / s)
    };
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect())
}

/// Rigid transform taking a body into its canonical frame: pelvis at the
/// origin, y along pelvis→neck, x along the hip axis.
pub fn canonical_frame(joints: &[Point], lm: &Landmarks) -> Result<Similarity> {
    let get = |i: usize| {
        joints
            .get(i)
            .map(vec3)
            .ok_or_else(|| Error::invalid(format!("landmark joint {i} missing")))
    };
    let pelvis = get(lm.pelvis)?;
    let up = get(lm.neck)? - pelvis;
    let across = get(lm.hip_left)? - get(lm.hip_right)?;
    if up.norm() < 1e-9 {
        return Err(Error::Degenerate("pelvis and neck coincide".into()));
    }
    let y = up.normalize();
    let x_raw = across - y * across.dot(&y);
    if x_raw.norm() < 1e-6 * across.norm().max(1e-12) || x_raw.norm() < 1e-9 {
        return Err(Error::Degenerate("hip axis is collinear with the spine".into()));
    }
    let x = x_raw.normalize();
    let z = x.cross(&y);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(Similarity {
        translation: -(rotation * pelvis),
        rotation,
        scale: 1.0,
    })
}

/// Axis-aligned bounding-box diagonal.
pub fn bbox_diagonal(pts: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k] as f64);
            hi[k] = hi[k].max(p[k] as f64);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
}

/// Area-weighted vertex normals; vertices on no face get `[0, 1, 0]`.
pub fn vertex_normals(vertices: &[Point], faces: &[[usize; 3]]) -> Vec<Point> {
    let mut acc = vec![Vector3::<f64>::zeros(); vertices.len()];
    for f in faces {
        let [a, b, c] = f.map(|i| vec3(&vertices[i]));
        // cross product length is twice the area, so this is area weighting
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i] += n;
        }
    }
    acc.iter()
        .map(|n| {
            if n.norm() > 1e-20 {
                point(&n.normalize())
            } else {
                [0.0, 1.0, 0.0]
            }
        })
        .collect()
}

pub fn mean_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (vec3(p) - vec3(q)).norm())
        .sum::<f64>()
        / a.len().max(1) as f64
}
