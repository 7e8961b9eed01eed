//! Linear blend skinning and transport of embedded Gaussians from the
//! canonical mesh onto a posed one.

use nalgebra::{Isometry3, Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    frame_rotation_matrix, normalize_vjp, triangle_area, triangle_frame, Quat, TriangleFrame,
};
use crate::scene::{GaussianSet, SkinnedMesh};

/// Per-joint skinning transforms (canonical → posed) plus a global root map.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub joint_transforms: Vec<Isometry3<f64>>,
    pub root: Isometry3<f64>,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Self {
            joint_transforms: vec![Isometry3::identity(); joint_count],
            root: Isometry3::identity(),
        }
    }

    /// Pose that moves the whole mesh rigidly by `root`.
    pub fn rigid(joint_count: usize, root: Isometry3<f64>) -> Self {
        Self {
            root,
            ..Self::identity(joint_count)
        }
    }

    /// Forward kinematics from joint-local rotations/translations expressed in
    /// each joint's bind frame. `locals[j]` is applied about joint `j`'s pivot
    /// and inherited by its descendants.
    pub fn from_local(
        mesh: &SkinnedMesh,
        locals: &[Isometry3<f64>],
        root: Isometry3<f64>,
    ) -> Result<Self> {
        if locals.len() != mesh.joints.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} local transforms for {} joints",
                locals.len(),
                mesh.joints.len()
            )));
        }
        let mut global: Vec<Isometry3<f64>> = Vec::with_capacity(locals.len());
        for (j, joint) in mesh.joints.iter().enumerate() {
            let g = match joint.parent {
                Some(p) => global[p] * mesh.joints[p].bind.inverse() * joint.bind * locals[j],
                None => joint.bind * locals[j],
            };
            global.push(g);
        }
        let joint_transforms = global
            .iter()
            .zip(&mesh.joints)
            .map(|(g, joint)| g * joint.bind.inverse())
            .collect();
        Ok(Self {
            joint_transforms,
            root,
        })
    }

    pub fn is_identity(&self) -> bool {
        let id = Isometry3::identity();
        self.root == id && self.joint_transforms.iter().all(|t| *t == id)
    }
}

/// Skinned vertex positions `root · Σ_j w_j T_j v`.
pub fn pose_mesh(mesh: &SkinnedMesh, pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    if pose.joint_transforms.len() != mesh.joints.len() {
        return Err(Error::ShapeMismatch(format!(
            "pose has {} joints, mesh has {}",
            pose.joint_transforms.len(),
            mesh.joints.len()
        )));
    }
    if pose.is_identity() {
        return Ok(mesh.vertices.clone());
    }
    let mats: Vec<(Matrix3<f64>, Vector3<f64>)> = pose
        .joint_transforms
        .iter()
        .map(|t| (t.rotation.to_rotation_matrix().into_inner(), t.translation.vector))
        .collect();
    Ok(mesh
        .vertices
        .par_iter()
        .zip(mesh.skin_weights.par_iter())
        .map(|(v, weights)| {
            let mut m = Matrix3::zeros();
            let mut t = Vector3::zeros();
            for &(j, w) in weights {
                let (r, tr) = &mats[j as usize];
                m += r * w;
                t += tr * w;
            }
            (pose.root * Point3::from(m * v + t)).coords
        })
        .collect())
}

/// How one face moved between the canonical and a posed mesh: the frame
/// rotation and per-axis length ratios along tangent, bitangent and normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceTransport {
    pub canonical: TriangleFrame,
    pub posed: TriangleFrame,
    pub rotation: Quat,
    pub rotation_matrix: Matrix3<f64>,
    pub ratios: Vector3<f64>,
    /// Set when the posed triangle is bitwise equal to the canonical one.
    pub is_identity: bool,
}

pub fn face_transport(canonical: &[Vector3<f64>; 3], posed: &[Vector3<f64>; 3]) -> Result<FaceTransport> {
    let cf = triangle_frame(&canonical[0], &canonical[1], &canonical[2])?;
    if canonical == posed {
        return Ok(FaceTransport {
            canonical: cf,
            posed: cf,
            rotation: Quat::IDENTITY,
            rotation_matrix: Matrix3::identity(),
            ratios: Vector3::repeat(1.0),
            is_identity: true,
        });
    }
    let pf = triangle_frame(&posed[0], &posed[1], &posed[2])?;
    let rotation_matrix = frame_rotation_matrix(&cf, &pf);
    Ok(FaceTransport {
        canonical: cf,
        posed: pf,
        rotation: Quat::from_matrix(&rotation_matrix),
        rotation_matrix,
        ratios: length_ratios(canonical, posed),
        is_identity: false,
    })
}

/// Tangent ratio from the first edge, bitangent ratio from the triangle
/// height over that edge, normal ratio as the square root of the area ratio.
pub fn length_ratios(canonical: &[Vector3<f64>; 3], posed: &[Vector3<f64>; 3]) -> Vector3<f64> {
    let e = (canonical[1] - canonical[0]).norm();
    let e_p = (posed[1] - posed[0]).norm();
    let a = triangle_area(&canonical[0], &canonical[1], &canonical[2]);
    let a_p = triangle_area(&posed[0], &posed[1], &posed[2]);
    let h = 2.0 * a / e;
    let h_p = 2.0 * a_p / e_p;
    Vector3::new(e_p / e, h_p / h, (a_p / a).sqrt())
}

/// Posed vertex positions together with the per-face transports.
#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub vertices: Vec<Vector3<f64>>,
    transports: Vec<Option<FaceTransport>>,
}

impl PosedMesh {
    pub fn new(mesh: &SkinnedMesh, vertices: Vec<Vector3<f64>>) -> Result<Self> {
        if vertices.len() != mesh.vertices.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} posed vertices for a mesh with {}",
                vertices.len(),
                mesh.vertices.len()
            )));
        }
        let transports = mesh
            .faces
            .par_iter()
            .map(|f| {
                let c = f.map(|v| mesh.vertices[v as usize]);
                let p = f.map(|v| vertices[v as usize]);
                face_transport(&c, &p).ok()
            })
            .collect();
        Ok(Self {
            vertices,
            transports,
        })
    }

    pub fn canonical(mesh: &SkinnedMesh) -> Result<Self> {
        Self::new(mesh, mesh.vertices.clone())
    }

    pub fn posed(mesh: &SkinnedMesh, pose: &Pose) -> Result<Self> {
        Self::new(mesh, pose_mesh(mesh, pose)?)
    }

    pub fn transport(&self, face: u32) -> Result<&FaceTransport> {
        match self.transports.get(face as usize) {
            Some(Some(t)) => Ok(t),
            Some(None) => Err(Error::DegenerateTriangle {
                face: Some(face),
                area: 0.0,
            }),
            None => Err(Error::InvalidArgument(format!("face index {face} out of range"))),
        }
    }

    pub fn face_count(&self) -> usize {
        self.transports.len()
    }
}

/// A Gaussian placed in world space for one pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReposedGaussian {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
}

/// Gradient of a scalar with respect to a [`ReposedGaussian`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReposedGrad {
    pub position: Vector3<f64>,
    pub rotation: [f64; 4],
    pub scale: Vector3<f64>,
}

/// Offsets and scales are stretched by the face's per-axis ratios, the local
/// rotation is carried by the face's frame rotation.
pub fn repose_gaussian(set: &GaussianSet, i: usize, posed: &PosedMesh) -> Result<ReposedGaussian> {
    let t = posed.transport(set.face[i])?;
    Ok(repose_with(set, i, t))
}

pub(crate) fn repose_with(set: &GaussianSet, i: usize, t: &FaceTransport) -> ReposedGaussian {
    let local = Vector3::from(set.offsets[i]).component_mul(&t.ratios);
    let q_local = set.unit_rotation(i);
    let rotation = if t.is_identity {
        q_local
    } else {
        t.rotation.mul(&q_local)
    };
    ReposedGaussian {
        position: t.posed.to_world(&local),
        rotation,
        scale: set.scale(i).component_mul(&t.ratios),
    }
}

pub fn repose_all(set: &GaussianSet, posed: &PosedMesh) -> Result<Vec<ReposedGaussian>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| repose_gaussian(set, i, posed))
        .collect()
}

/// Parameter-space gradients of one Gaussian from its world-space gradient.
/// Returns `(d_offsets, d_rotation_raw, d_log_scale)`.
pub fn repose_vjp(
    set: &GaussianSet,
    i: usize,
    t: &FaceTransport,
    g: &ReposedGrad,
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let d_local = t.posed.basis().transpose() * g.position;
    let d_offsets = d_local.component_mul(&t.ratios);

    let raw = Quat::from_array(set.rotation[i]);
    let d_unit = if t.is_identity {
        g.rotation
    } else {
        t.rotation.mul_vjp(&raw.normalized(), &g.rotation).1
    };
    let d_rot = normalize_vjp(&raw, &d_unit);

    let world_scale = set.scale(i).component_mul(&t.ratios);
    let d_log_scale = g.scale.component_mul(&world_scale);
    (d_offsets.into(), d_rot, d_log_scale.into())
}
