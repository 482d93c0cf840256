use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};
use crate::mesh::{vec3, Point};

/// Which global length scale a bone follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthGroup {
    Trunk,
    Arm,
    Leg,
}

/// A tube skinned onto the bone that ends at `joint`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeSpec {
    pub joint: usize,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    /// Rest offset from the parent joint; zero for the root.
    pub offsets: Vec<[f64; 3]>,
    pub groups: Vec<LengthGroup>,
    /// Two swing angles per joint (radians): about the parent-frame z axis,
    /// then about `rest direction × z`. Equal bounds pin the angle.
    pub limits: Vec<[(f64, f64); 2]>,
    pub tubes: Vec<TubeSpec>,
    /// Uniform ranges for the trunk, arm and leg length scales.
    pub length_scale: [(f64, f64); 3],
    pub girth_scale: (f64, f64),
    /// Joints named pelvis, neck, hip_left, hip_right plus end effectors.
    pub landmark_names: [&'static str; 4],
    pub end_effectors: Vec<usize>,
}

/// Per-sample draw: joint angles and shape scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub angles: Vec<[f64; 2]>,
    /// trunk, arm, leg
    pub lengths: [f64; 3],
    pub girth: f64,
}

impl SkeletonSpec {
    /// Nine-joint humanoid: pelvis, hips, neck, head, hands, feet.
    pub fn humanoid() -> Self {
        let names = [
            "pelvis",
            "hip_left",
            "hip_right",
            "neck",
            "head",
            "hand_left",
            "hand_right",
            "foot_left",
            "foot_right",
        ];
        let arm = |sx: f64| {
            let d = Vector3::new(sx, -0.3, 0.0).normalize() * 0.8;
            [d.x, d.y, d.z]
        };
        use LengthGroup::*;
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            parents: vec![None, Some(0), Some(0), Some(0), Some(3), Some(3), Some(3), Some(1), Some(2)],
            offsets: vec![
                [0.0, 0.0, 0.0],
                [0.18, -0.05, 0.0],
                [-0.18, -0.05, 0.0],
                [0.0, 0.9, 0.0],
                [0.0, 0.3, 0.0],
                arm(1.0),
                arm(-1.0),
                [0.0, -0.95, 0.0],
                [0.0, -0.95, 0.0],
            ],
            groups: vec![Trunk, Trunk, Trunk, Trunk, Trunk, Arm, Arm, Leg, Leg],
            limits: vec![
                [(0.0, 0.0); 2],
                [(0.0, 0.0); 2],
                [(0.0, 0.0); 2],
                [(-0.25, 0.25), (-0.3, 0.3)],
                [(-0.35, 0.35), (-0.35, 0.35)],
                [(-0.7, 0.9), (-0.7, 0.7)],
                [(-0.9, 0.7), (-0.7, 0.7)],
                [(-0.1, 0.4), (-0.7, 0.7)],
                [(-0.4, 0.1), (-0.7, 0.7)],
            ],
            tubes: vec![
                TubeSpec { joint: 3, radius: 0.15 },
                TubeSpec { joint: 4, radius: 0.12 },
                TubeSpec { joint: 5, radius: 0.06 },
                TubeSpec { joint: 6, radius: 0.06 },
                TubeSpec { joint: 7, radius: 0.08 },
                TubeSpec { joint: 8, radius: 0.08 },
            ],
            length_scale: [(0.92, 1.08), (0.9, 1.1), (0.9, 1.1)],
            girth_scale: (0.95, 1.05),
            landmark_names: ["pelvis", "neck", "hip_left", "hip_right"],
            end_effectors: vec![4, 5, 6, 7, 8],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_joints();
        if [self.parents.len(), self.offsets.len(), self.groups.len(), self.limits.len()]
            .iter()
            .any(|&l| l != j)
        {
            return Err(Error::invalid("skeleton tables disagree on joint count"));
        }
        if self.parents.iter().filter(|p| p.is_none()).count() != 1 || self.parents[0].is_some() {
            return Err(Error::invalid("skeleton needs exactly one root, at index 0"));
        }
        for (i, p) in self.parents.iter().enumerate() {
            // parents precede children, which also rules out cycles
            if matches!(p, Some(q) if *q >= i) {
                return Err(Error::invalid(format!("joint {i} listed before its parent")));
            }
        }
        if self.offsets[0] != [0.0; 3] {
            return Err(Error::invalid("root offset must be the origin"));
        }
        let ranges = self
            .limits
            .iter()
            .flatten()
            .chain(&self.length_scale)
            .chain(std::iter::once(&self.girth_scale));
        for (lo, hi) in ranges {
            if lo > hi {
                return Err(Error::invalid(format!("degenerate limits: min {lo} > max {hi}")));
            }
        }
        for t in &self.tubes {
            if t.joint == 0 || t.joint >= j || t.radius <= 0.0 {
                return Err(Error::invalid("tube must sit on a non-root bone with positive radius"));
            }
        }
        for name in self.landmark_names {
            self.index(name)?;
        }
        Ok(())
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("skeleton has no joint `{name}`")))
    }

    pub fn rest_pose(&self) -> Pose {
        Pose {
            angles: vec![[0.0; 2]; self.n_joints()],
            lengths: [1.0; 3],
            girth: 1.0,
        }
    }

    pub fn scaled_offset(&self, j: usize, pose: &Pose) -> Vector3<f64> {
        let s = pose.lengths[self.groups[j] as usize];
        Vector3::from(self.offsets[j]) * s
    }

    fn local_rotation(&self, j: usize, angles: [f64; 2]) -> Matrix3<f64> {
        let z = Vector3::z();
        let d = Vector3::from(self.offsets[j]);
        let axis2 = d.cross(&z);
        let r1 = Rotation3::from_axis_angle(&Vector3::z_axis(), angles[0]);
        let r2 = if axis2.norm() > 1e-9 {
            Rotation3::from_axis_angle(&Unit::new_normalize(axis2), angles[1])
        } else {
            Rotation3::from_axis_angle(&Vector3::x_axis(), angles[1])
        };
        (r2 * r1).into_inner()
    }

    /// Forward kinematics: joint positions and the world rotation of the
    /// bone ending at each joint (identity for the root).
    pub fn forward(&self, pose: &Pose) -> (Vec<Vector3<f64>>, Vec<Matrix3<f64>>) {
        let n = self.n_joints();
        let mut pos = vec![Vector3::zeros(); n];
        let mut rot = vec![Matrix3::identity(); n];
        for j in 1..n {
            let p = self.parents[j].unwrap();
            rot[j] = rot[p] * self.local_rotation(j, pose.angles[j]);
            pos[j] = pos[p] + rot[j] * self.scaled_offset(j, pose);
        }
        (pos, rot)
    }
}

/// Skeleton with `a`'s bone directions and `b`'s bone lengths. Bones of
/// zero length in `a` copy `b`'s bone vector.
pub fn resegment_skeleton(a: &[Point], b: &[Point], parents: &[Option<usize>]) -> Result<Vec<Point>> {
    if a.len() != b.len() || a.len() != parents.len() {
        return Err(Error::invalid("skeletons and tree disagree on joint count"));
    }
    let mut out: Vec<Vector3<f64>> = a.iter().map(vec3).collect();
    for j in 0..a.len() {
        let Some(p) = parents[j] else { continue };
        if p >= j {
            return Err(Error::invalid("tree must list parents before children"));
        }
        let da = vec3(&a[j]) - vec3(&a[p]);
        let db = vec3(&b[j]) - vec3(&b[p]);
        out[j] = out[p]
            + if da.norm() < 1e-12 {
                db
            } else {
                da.normalize() * db.norm()
            };
    }
    Ok(out.iter().map(crate::mesh::point).collect())
}
