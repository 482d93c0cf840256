//! Files the subcommands read and write.

use std::fs;
use std::path::{Path, PathBuf};

use meshdiff::diffusion::NoiseSchedule;
use meshdiff::mesh::{save_obj, vertex_normals, ArticulatedSample, MeshTopology, Upsampler};
use meshdiff::model::DiffusionModel;
use meshdiff::numerics::{Checkpoint, Tensor};
use meshdiff::synthetic::{format_joints, parse_joints};
use meshdiff::training::sampling_model;

use crate::CliError;

const TOPOLOGY_KEY: &str = "topology";
// checkpoint meta values are single lines
const LINE_SEP: &str = ";";

pub fn embed_topology(ck: &mut Checkpoint, topo: &MeshTopology) {
    ck.set_meta(TOPOLOGY_KEY, topo.to_text().trim_end().replace('\n', LINE_SEP));
}

/// A trained checkpoint with everything sampling needs.
pub struct Bundle {
    pub model: DiffusionModel,
    pub schedule: NoiseSchedule,
    pub topo: MeshTopology,
    pub upsampler: Upsampler,
}

impl Bundle {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ck = Checkpoint::load(path)?;
        let model = sampling_model(&ck)?;
        meshdiff::downstream::require_trained(&model)?;
        let t_max: usize = ck.meta_parse("diffusion.t_max")?;
        let text = ck.meta_str(TOPOLOGY_KEY)?.replace(LINE_SEP, "\n");
        let topo = MeshTopology::from_text(&text, &format!("{} (topology)", path.display()))?;
        let upsampler = Upsampler::read_from(&ck)?;
        if topo.n_coarse != model.config.n_vertices || topo.n_joints() != model.config.n_joints {
            return Err(CliError::data(format!("{}: topology does not match the model", path.display())));
        }
        Ok(Self {
            model,
            schedule: NoiseSchedule::default_sigmoid(t_max)?,
            topo,
            upsampler,
        })
    }

    /// Reads an OBJ (dense or coarse vertices) plus its `.joints` file.
    pub fn load_body(&self, obj: &Path) -> Result<ArticulatedSample, CliError> {
        let mesh = meshdiff::mesh::load_obj(obj)?;
        let coarse = if mesh.vertices.len() == self.topo.n_coarse {
            mesh.vertices
        } else if mesh.vertices.len() == self.topo.n_dense {
            self.topo.downsample.apply(&mesh.vertices)?
        } else {
            return Err(CliError::data(format!(
                "{}: {} vertices, expected {} (coarse) or {} (dense)",
                obj.display(),
                mesh.vertices.len(),
                self.topo.n_coarse,
                self.topo.n_dense
            )));
        };
        let jpath = obj.with_extension("joints");
        let text = read_text(&jpath)?;
        let joints = parse_joints(&text, &jpath.display().to_string(), &self.topo)?;
        Ok(ArticulatedSample {
            coarse,
            joints,
            normals: None,
        })
    }

    /// Writes the upsampled mesh to `obj`, joints beside it, and the coarse
    /// mesh to `coarse` when given.
    pub fn save_body(&self, obj: &Path, coarse: Option<&Path>, s: &ArticulatedSample) -> Result<(), CliError> {
        let dense = self.upsampler.upsample(&s.coarse)?;
        let normals = vertex_normals(&dense, &self.topo.faces_dense);
        save_obj(obj, &dense, &self.topo.faces_dense, Some(&normals))?;
        write_text(&obj.with_extension("joints"), &format_joints(&self.topo.joint_names, &s.joints))?;
        if let Some(c) = coarse {
            save_obj(c, &s.coarse, &self.topo.faces_coarse, None)?;
        }
        Ok(())
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

/// Where a file output's configuration echo goes: `<out>.config.toml`.
pub fn config_echo_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    out.with_file_name(name)
}

pub fn save_noise(path: &Path, z: &[f32]) -> Result<(), CliError> {
    let mut ck = Checkpoint::new();
    ck.tensors.insert("noise".into(), Tensor::new(&[z.len()], z.to_vec())?);
    Ok(ck.save(path)?)
}

pub fn load_noise(path: &Path) -> Result<Vec<f32>, CliError> {
    Ok(Checkpoint::load(path)?.tensor("noise")?.data().to_vec())
}
