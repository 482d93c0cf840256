use std::f64::consts::TAU;

use nalgebra::Vector3;

use super::skeleton::{Pose, SkeletonSpec};
use crate::error::Result;
use crate::mesh::{
    canonical_frame, point, vertex_normals, Landmarks, MeshTopology, Point, SparseMatrix, TopologyParts,
};

pub const RINGS: usize = 8;
pub const SEGMENTS: usize = 8;
pub const COARSE_RINGS: usize = RINGS / 2;
pub const COARSE_SEGMENTS: usize = SEGMENTS / 2;
/// Tubes blend with their parent bone over the first part of their length.
const BLEND_SPAN: f64 = 0.3;

const PER_TUBE: usize = RINGS * SEGMENTS;
const PER_COARSE_TUBE: usize = COARSE_RINGS * COARSE_SEGMENTS;

fn dense_index(tube: usize, ring: usize, seg: usize) -> usize {
    tube * PER_TUBE + ring * SEGMENTS + seg % SEGMENTS
}

fn coarse_index(tube: usize, ring: usize, seg: usize) -> usize {
    tube * PER_COARSE_TUBE + ring * COARSE_SEGMENTS + seg % COARSE_SEGMENTS
}

fn grid_faces(tubes: usize, rings: usize, segs: usize, index: impl Fn(usize, usize, usize) -> usize) -> Vec<[usize; 3]> {
    let mut faces = Vec::new();
    for t in 0..tubes {
        for r in 0..rings - 1 {
            for s in 0..segs {
                let (a, b) = (index(t, r, s), index(t, r, s + 1));
                let (c, d) = (index(t, r + 1, s + 1), index(t, r + 1, s));
                // counter-clockwise seen from outside
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
    faces
}

fn unique_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut edges: Vec<[usize; 2]> = faces
        .iter()
        .flat_map(|&[a, b, c]| [[a, b], [b, c], [c, a]])
        .map(|[a, b]| [a.min(b), a.max(b)])
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Orthonormal frame `(u, w)` perpendicular to `d`.
fn cross_frame(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = d.normalize();
    let helper = if d.cross(&Vector3::z()).norm() > 1e-6 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    (u, w)
}

/// Generated body before canonicalization.
pub(crate) struct Skinned {
    pub dense: Vec<Point>,
    pub joints: Vec<Point>,
}

pub(crate) fn skin(spec: &SkeletonSpec, pose: &Pose) -> Skinned {
    let rest = spec.forward(&Pose {
        angles: vec![[0.0; 2]; spec.n_joints()],
        ..pose.clone()
    });
    let (pos, rot) = spec.forward(pose);
    // rigid transform of the bone ending at joint j: x ↦ R_j (x − rest_parent) + parent
    let bone = |j: usize, x: &Vector3<f64>| -> Vector3<f64> {
        match spec.parents[j] {
            Some(p) => rot[j] * (x - rest.0[p]) + pos[p],
            None => x - rest.0[j] + pos[j],
        }
    };
    let mut dense = vec![[0.0f32; 3]; spec.tubes.len() * PER_TUBE];
    for (ti, tube) in spec.tubes.iter().enumerate() {
        let j = tube.joint;
        let p = spec.parents[j].unwrap();
        let (start, end) = (rest.0[p], rest.0[j]);
        let (u, w) = cross_frame(&(end - start));
        let radius = tube.radius * pose.girth;
        let parent_bone = spec.parents[p].map(|_| p);
        for r in 0..RINGS {
            let s = r as f64 / (RINGS - 1) as f64;
            let centre = start + (end - start) * s;
            let w_parent = match parent_bone {
                Some(_) if s < BLEND_SPAN => 0.5 * (1.0 - s / BLEND_SPAN),
                _ => 0.0,
            };
            for k in 0..SEGMENTS {
                let phi = TAU * k as f64 / SEGMENTS as f64;
                let x = centre + radius * (phi.cos() * u + phi.sin() * w);
                let mut v = (1.0 - w_parent) * bone(j, &x);
                if let Some(pb) = parent_bone {
                    v += w_parent * bone(pb, &x);
                }
                dense[dense_index(ti, r, k)] = point(&v);
            }
        }
    }
    Skinned {
        dense,
        joints: pos.iter().map(point).collect(),
    }
}

/// Builds the fixed topology; the rest template is the canonical rest pose.
pub(crate) fn build_topology(spec: &SkeletonSpec) -> Result<MeshTopology> {
    spec.validate()?;
    let n_tubes = spec.tubes.len();
    let faces_dense = grid_faces(n_tubes, RINGS, SEGMENTS, dense_index);
    let faces_coarse = grid_faces(n_tubes, COARSE_RINGS, COARSE_SEGMENTS, coarse_index);
    let edges_coarse = unique_edges(&faces_coarse);

    let mut downsample = Vec::new();
    for t in 0..n_tubes {
        for cr in 0..COARSE_RINGS {
            for cs in 0..COARSE_SEGMENTS {
                for (dr, ds) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    downsample.push((coarse_index(t, cr, cs), dense_index(t, 2 * cr + dr, 2 * cs + ds), 0.25));
                }
            }
        }
    }

    // each joint is the centroid of a ring that moves rigidly with it
    let tube_of = |joint: usize| spec.tubes.iter().position(|t| t.joint == joint);
    let mut regressor = Vec::new();
    for j in 0..spec.n_joints() {
        let (tube, ring) = if let Some(t) = tube_of(j) {
            (t, RINGS - 1)
        } else {
            let t = spec
                .tubes
                .iter()
                .position(|t| spec.parents[t.joint] == Some(j))
                .ok_or_else(|| crate::Error::invalid(format!("joint {j} touches no tube")))?;
            (t, 0)
        };
        for k in 0..SEGMENTS {
            regressor.push((j, dense_index(tube, ring, k), 1.0 / SEGMENTS as f64));
        }
    }

    let lm = |name: &str| spec.index(name);
    let landmarks = Landmarks {
        pelvis: lm(spec.landmark_names[0])?,
        neck: lm(spec.landmark_names[1])?,
        hip_left: lm(spec.landmark_names[2])?,
        hip_right: lm(spec.landmark_names[3])?,
        end_effectors: spec.end_effectors.clone(),
    };
    let down = SparseMatrix::from_triplets(n_tubes * PER_COARSE_TUBE, n_tubes * PER_TUBE, &downsample)?;
    let rest = skin(spec, &spec.rest_pose());
    let frame = canonical_frame(&rest.joints, &landmarks)?;
    let rest_dense = frame.apply_all(&rest.dense);
    MeshTopology::new(TopologyParts {
        n_coarse: n_tubes * PER_COARSE_TUBE,
        n_dense: n_tubes * PER_TUBE,
        joint_names: spec.names.clone(),
        joint_parents: spec.parents.clone(),
        faces_dense,
        faces_coarse,
        edges_coarse,
        regressor,
        downsample,
        landmarks,
        rest_coarse: down.apply(&rest_dense)?,
        rest_joints: frame.apply_all(&rest.joints),
    })
}

/// Linear prolongations coarse → (rings refined) → (segments refined),
/// the inverse direction of the 2×2 averaging. Used to initialize upsamplers.
pub fn prolongations(n_tubes: usize) -> Result<(SparseMatrix, SparseMatrix)> {
    let mid_index = |t: usize, r: usize, s: usize| t * RINGS * COARSE_SEGMENTS + r * COARSE_SEGMENTS + s % COARSE_SEGMENTS;
    // coarse cell c covers fine positions 2c and 2c+1, centred at 2c + 0.5
    let weights_1d = |fine: usize, n_coarse: usize, periodic: bool| -> Vec<(usize, f64)> {
        let u = (fine as f64 - 0.5) / 2.0;
        let lo = u.floor();
        let frac = u - lo;
        let lo = lo as isize;
        if periodic {
            let wrap = |i: isize| i.rem_euclid(n_coarse as isize) as usize;
            vec![(wrap(lo), 1.0 - frac), (wrap(lo + 1), frac)]
        } else {
            // linear extrapolation past the end cells
            let a = lo.clamp(0, n_coarse as isize - 2);
            let f = u - a as f64;
            vec![(a as usize, 1.0 - f), (a as usize + 1, f)]
        }
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    for t in 0..n_tubes {
        for r in 0..RINGS {
            for cs in 0..COARSE_SEGMENTS {
                for (cr, w) in weights_1d(r, COARSE_RINGS, false) {
                    first.push((mid_index(t, r, cs), coarse_index(t, cr, cs), w));
                }
            }
            for s in 0..SEGMENTS {
                for (cs, w) in weights_1d(s, COARSE_SEGMENTS, true) {
                    second.push((dense_index(t, r, s), mid_index(t, r, cs), w));
                }
            }
        }
    }
    Ok((
        SparseMatrix::from_triplets(n_tubes * RINGS * COARSE_SEGMENTS, n_tubes * PER_COARSE_TUBE, &first)?,
        SparseMatrix::from_triplets(n_tubes * PER_TUBE, n_tubes * RINGS * COARSE_SEGMENTS, &second)?,
    ))
}

pub(crate) fn dense_normals(dense: &[Point], topo: &MeshTopology) -> Vec<Point> {
    vertex_normals(dense, &topo.faces_dense)
}
