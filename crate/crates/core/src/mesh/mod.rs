//! Fixed mesh topology and the geometry kernels built on it.

mod geometry;
mod obj;
mod topology;
mod upsample;

pub use geometry::{
    bbox_diagonal, canonical_frame, edge_lengths, laplacian_coords, mean_distance, procrustes_align,
    regress_joints, slerp, vertex_normals, Alignment, Similarity,
};
pub(crate) use geometry::{point, vec3};
pub use obj::{format_obj, load_obj, parse_obj, save_obj, ObjMesh};
pub use topology::{umbrella_laplacian, Landmarks, MeshTopology, Point, SparseMatrix, TopologyParts};
pub use upsample::Upsampler;

/// One datum: coarse surface, joints, and optional unit normals.
#[derive(Clone, Debug, PartialEq)]
pub struct ArticulatedSample {
    pub coarse: Vec<Point>,
    pub joints: Vec<Point>,
    pub normals: Option<Vec<Point>>,
}

impl ArticulatedSample {
    pub fn transformed(&self, t: &Similarity) -> Self {
        Self {
            coarse: t.apply_all(&self.coarse),
            joints: t.apply_all(&self.joints),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|p| t.rotate(p)).collect()),
        }
    }
}
