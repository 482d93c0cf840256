//! Procedural articulated bodies: tube meshes skinned onto a small skeleton.

mod body;
mod skeleton;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use body::{prolongations, COARSE_RINGS, COARSE_SEGMENTS, RINGS, SEGMENTS};
pub use skeleton::{resegment_skeleton, LengthGroup, Pose, SkeletonSpec, TubeSpec};

use crate::error::{Error, Result};
use crate::mesh::{canonical_frame, load_obj, save_obj, ArticulatedSample, MeshTopology, Point};

/// One generated body in its canonical frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySample {
    pub coarse: Vec<Point>,
    pub dense: Vec<Point>,
    pub joints: Vec<Point>,
    pub coarse_normals: Vec<Point>,
    pub dense_normals: Vec<Point>,
}

impl BodySample {
    pub fn articulated(&self, with_normals: bool) -> ArticulatedSample {
        ArticulatedSample {
            coarse: self.coarse.clone(),
            joints: self.joints.clone(),
            normals: with_normals.then(|| self.coarse_normals.clone()),
        }
    }

    /// Rebuilds the derived fields from a dense mesh and its joints.
    pub fn from_dense(dense: Vec<Point>, joints: Vec<Point>, topo: &MeshTopology) -> Result<Self> {
        let dense_normals = body::dense_normals(&dense, topo);
        let coarse = topo.downsample.apply(&dense)?;
        let coarse_normals = topo
            .downsample
            .apply(&dense_normals)?
            .into_iter()
            .map(|n| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > 1e-12 {
                    n.map(|c| c / len)
                } else {
                    [0.0, 1.0, 0.0]
                }
            })
            .collect();
        Ok(Self {
            coarse,
            dense,
            joints,
            coarse_normals,
            dense_normals,
        })
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_pose<R: Rng>(spec: &SkeletonSpec, rng: &mut R) -> Pose {
    let angles = spec
        .limits
        .iter()
        .map(|[a, b]| [uniform(rng, *a), uniform(rng, *b)])
        .collect();
    let lengths = spec.length_scale.map(|r| uniform(rng, r));
    Pose {
        angles,
        lengths,
        girth: uniform(rng, spec.girth_scale),
    }
}

/// Skins `pose` and moves the result into its canonical frame.
pub fn pose_body(spec: &SkeletonSpec, pose: &Pose, topo: &MeshTopology) -> Result<BodySample> {
    let raw = body::skin(spec, pose);
    let frame = canonical_frame(&raw.joints, &topo.landmarks)?;
    BodySample::from_dense(frame.apply_all(&raw.dense), frame.apply_all(&raw.joints), topo)
}

pub fn build_topology(spec: &SkeletonSpec) -> Result<MeshTopology> {
    body::build_topology(spec)
}

/// `n` bodies; sample `i` draws from its own stream of `seed`, so any
/// subset can be regenerated independently.
pub fn generate_dataset(spec: &SkeletonSpec, n: usize, seed: u64) -> Result<(Vec<BodySample>, MeshTopology)> {
    generate_range(spec, 0..n, seed)
}

pub fn generate_range(
    spec: &SkeletonSpec,
    range: std::ops::Range<usize>,
    seed: u64,
) -> Result<(Vec<BodySample>, MeshTopology)> {
    if range.is_empty() {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let topo = build_topology(spec)?;
    let samples = range
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            pose_body(spec, &sample_pose(spec, &mut rng), &topo)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, topo))
}

pub fn format_joints(names: &[String], joints: &[Point]) -> String {
    let mut s = String::new();
    for (n, [x, y, z]) in names.iter().zip(joints) {
        let _ = writeln!(s, "{n} {x} {y} {z}");
    }
    s
}

/// Reads `name c1 c2 [c3]` rows; returns names and coordinates in file order.
pub fn parse_named_rows(text: &str, origin: &str, dims: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dims + 1 {
            return Err(Error::parse(origin, i + 1, format!("expected a name and {dims} numbers")));
        }
        let vals = toks[1..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(origin, i + 1, format!("bad number in `{line}`")))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(origin, i + 1, "non-finite coordinate"));
        }
        rows.push((toks[0].to_string(), vals));
    }
    Ok(rows)
}

/// Joints keyed by name, reordered to the topology's joint order.
pub fn parse_joints(text: &str, origin: &str, topo: &MeshTopology) -> Result<Vec<Point>> {
    let rows = parse_named_rows(text, origin, 3)?;
    let mut out = vec![None; topo.n_joints()];
    for (name, v) in rows {
        let j = topo
            .joint_index(&name)
            .ok_or_else(|| Error::parse(origin, 0, format!("unknown joint `{name}`")))?;
        out[j] = Some([v[0] as f32, v[1] as f32, v[2] as f32]);
    }
    out.into_iter()
        .enumerate()
        .map(|(j, p)| p.ok_or_else(|| Error::parse(origin, 0, format!("missing joint `{}`", topo.joint_names[j]))))
        .collect()
}

pub fn save_sample(dir: &Path, stem: &str, s: &BodySample, topo: &MeshTopology) -> Result<()> {
    save_obj(dir.join(format!("{stem}.obj")), &s.dense, &topo.faces_dense, Some(&s.dense_normals))?;
    let path = dir.join(format!("{stem}.joints"));
    fs::write(&path, format_joints(&topo.joint_names, &s.joints)).map_err(|e| Error::io(&path, e))
}

pub fn load_sample(obj: &Path, topo: &MeshTopology) -> Result<BodySample> {
    let mesh = load_obj(obj)?;
    if mesh.vertices.len() != topo.n_dense {
        return Err(Error::invalid(format!(
            "{}: {} vertices, topology expects {}",
            obj.display(),
            mesh.vertices.len(),
            topo.n_dense
        )));
    }
    let jpath = obj.with_extension("joints");
    let text = fs::read_to_string(&jpath).map_err(|e| Error::io(&jpath, e))?;
    let joints = parse_joints(&text, &jpath.display().to_string(), topo)?;
    BodySample::from_dense(mesh.vertices, joints, topo)
}

/// Sorted `*.obj` files of a directory.
pub fn list_meshes(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "obj") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Layout: `topology.txt`, then `train/` and `val/` with `NNNNN.obj` + `NNNNN.joints`.
pub fn save_dataset(dir: &Path, topo: &MeshTopology, train: &[BodySample], val: &[BodySample]) -> Result<()> {
    for sub in ["train", "val"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    topo.save(dir.join("topology.txt"))?;
    for (sub, set) in [("train", train), ("val", val)] {
        for (i, s) in set.iter().enumerate() {
            save_sample(&dir.join(sub), &format!("{i:05}"), s, topo)?;
        }
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: &str, topo: &MeshTopology) -> Result<Vec<BodySample>> {
    list_meshes(&dir.join(split))?
        .iter()
        .map(|p| load_sample(p, topo))
        .collect()
}
