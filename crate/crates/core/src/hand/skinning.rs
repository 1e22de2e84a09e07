use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Vector3};

use super::{fk, HandError, HandModel, HandPose};
use crate::textfmt::{self, FormatError};

pub const MAX_INFLUENCES: usize = 4;
const WEIGHT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedMesh {
    rest_vertices: Vec<Vector3<f64>>,
    weights: Vec<Vec<(usize, f64)>>,
    faces: Vec<[usize; 3]>,
}

impl SkinnedMesh {
    pub fn new(
        rest_vertices: Vec<Vector3<f64>>,
        weights: Vec<Vec<(usize, f64)>>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self, HandError> {
        if weights.len() != rest_vertices.len() {
            return Err(HandError::InvalidMesh("one weight list per vertex required".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            let sum: f64 = w.iter().map(|&(_, x)| x).sum();
            if w.is_empty() || w.len() > MAX_INFLUENCES || w.iter().any(|&(_, x)| !(x >= 0.0)) || (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(HandError::InvalidMesh(format!("vertex {i}: weights must be 1..=4 non-negative values summing to 1")));
            }
        }
        if faces.iter().flatten().any(|&v| v >= rest_vertices.len()) {
            return Err(HandError::InvalidMesh("face index out of range".into()));
        }
        Ok(SkinnedMesh {
            rest_vertices,
            weights,
            faces,
        })
    }

    pub fn rest_vertices(&self) -> &[Vector3<f64>] {
        &self.rest_vertices
    }

    pub fn weights(&self) -> &[Vec<(usize, f64)>] {
        &self.weights
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Procedural mesh of one tube per bone segment, in the rest pose of the
    /// model. Rings at the ends of a segment blend half-and-half with the
    /// neighboring segment across the joint.
    pub fn tube_hand(model: &HandModel) -> Self {
        const SIDES: usize = 8;
        const RINGS: usize = 4;
        let rest = fk::evaluate_chain(model, &HandPose::rest(&model.skeleton)).expect("rest pose matches skeleton");
        let bones = model.skeleton.bones();
        let first_child: Vec<Option<usize>> = (0..bones.len())
            .map(|b| bones.iter().position(|c| c.parent == Some(b)))
            .collect();
        let mut verts = Vec::new();
        let mut weights = Vec::new();
        let mut faces = Vec::new();
        for (b, bone) in bones.iter().enumerate() {
            // The rest chain has an identity global pose, so the wrist is the origin.
            let start = bone.parent.map_or(Vector3::zeros(), |p| rest.joint_position(p));
            let end = rest.joint_position(b);
            let axis = end - start;
            let len = axis.norm();
            if len < 1e-9 {
                continue;
            }
            let dir = axis / len;
            let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let u = dir.cross(&helper).normalize();
            let v = dir.cross(&u);
            let radius = if bone.parent.is_none() { 0.011 } else { 0.008 };
            let base = verts.len();
            for ring in 0..RINGS {
                let t = ring as f64 / (RINGS - 1) as f64;
                let center = start + t * axis;
                let w = match ring {
                    0 => match bone.parent {
                        Some(p) => vec![(b, 0.5), (p, 0.5)],
                        None => vec![(b, 1.0)],
                    },
                    r if r == RINGS - 1 => match first_child[b] {
                        Some(c) => vec![(b, 0.5), (c, 0.5)],
                        None => vec![(b, 1.0)],
                    },
                    _ => vec![(b, 1.0)],
                };
                for s in 0..SIDES {
                    let phi = std::f64::consts::TAU * s as f64 / SIDES as f64;
                    verts.push(center + radius * (phi.cos() * u + phi.sin() * v));
                    weights.push(w.clone());
                }
            }
            for ring in 0..RINGS - 1 {
                for s in 0..SIDES {
                    let a = base + ring * SIDES + s;
                    let b2 = base + ring * SIDES + (s + 1) % SIDES;
                    let c = a + SIDES;
                    let d = b2 + SIDES;
                    faces.push([a, b2, d]);
                    faces.push([a, d, c]);
                }
            }
        }
        SkinnedMesh::new(verts, weights, faces).expect("generated mesh is valid")
    }

    pub fn to_obj(&self, vertices: &[Vector3<f64>]) -> String {
        let mut out = String::new();
        for v in vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    pub fn save_obj(&self, path: impl AsRef<Path>, vertices: &[Vector3<f64>]) -> Result<(), FormatError> {
        textfmt::write_string(path.as_ref(), &self.to_obj(vertices))
    }
}

/// Linear blend skinning: `v_i = sum_j w_ij T_j(v_i_rest)`.
pub fn skin_vertices(mesh: &SkinnedMesh, bone_transforms: &[Isometry3<f64>]) -> Result<Vec<Vector3<f64>>, HandError> {
    if let Some(&(b, _)) = mesh.weights.iter().flatten().find(|&&(b, _)| b >= bone_transforms.len()) {
        return Err(HandError::InvalidMesh(format!("weight references bone {b} but only {} transforms given", bone_transforms.len())));
    }
    Ok(mesh
        .rest_vertices
        .iter()
        .zip(&mesh.weights)
        .map(|(v, w)| {
            let p = Point3::from(*v);
            w.iter().fold(Vector3::zeros(), |acc, &(b, x)| acc + x * (bone_transforms[b] * p).coords)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::Hand;
    use nalgebra::{Translation3, UnitQuaternion};
    use proptest::prelude::*;

    fn two_bone_mesh(weights: Vec<Vec<(usize, f64)>>) -> SkinnedMesh {
        let verts = vec![Vector3::new(0.1, 0.2, 0.3); weights.len()];
        SkinnedMesh::new(verts, weights, vec![]).unwrap()
    }

    #[test]
    fn identity_transforms_return_rest() {
        let model = HandModel::default_for(Hand::Right);
        let mesh = SkinnedMesh::tube_hand(&model);
        let out = skin_vertices(&mesh, &vec![Isometry3::identity(); 20]).unwrap();
        assert_eq!(out, mesh.rest_vertices());
    }

    #[test]
    fn single_bone_is_rigid() {
        let mesh = two_bone_mesh(vec![vec![(1, 1.0)]]);
        let t = Isometry3::from_parts(Translation3::new(1.0, 2.0, 3.0), UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3));
        let out = skin_vertices(&mesh, &[Isometry3::identity(), t]).unwrap();
        assert!((out[0] - (t * Point3::new(0.1, 0.2, 0.3)).coords).norm() < 1e-15);
    }

    #[test]
    fn half_blend_with_translation() {
        let mesh = two_bone_mesh(vec![vec![(0, 0.5), (1, 0.5)]]);
        let t = Vector3::new(0.4, -0.2, 1.0);
        let out = skin_vertices(&mesh, &[Isometry3::identity(), Isometry3::translation(t.x, t.y, t.z)]).unwrap();
        assert!((out[0] - (Vector3::new(0.1, 0.2, 0.3) + 0.5 * t)).norm() < 1e-15);
    }

    #[test]
    fn rejects_bad_weights() {
        let v = vec![Vector3::zeros()];
        assert!(SkinnedMesh::new(v.clone(), vec![vec![(0, 0.7)]], vec![]).is_err());
        assert!(SkinnedMesh::new(v.clone(), vec![vec![(0, 1.2), (1, -0.2)]], vec![]).is_err());
        assert!(SkinnedMesh::new(v, vec![vec![(0, 1.0)]], vec![[0, 0, 1]]).is_err());
    }

    #[test]
    fn posed_mesh_follows_fingertip() {
        let model = HandModel::default_for(Hand::Right);
        let mesh = SkinnedMesh::tube_hand(&model);
        let mut pose = HandPose::rest(&model.skeleton);
        pose.angles[model.skeleton.dof_offset(5)] = 1.2;
        let tf = fk::bone_transforms(&model, &pose).unwrap();
        let verts = skin_vertices(&mesh, &tf).unwrap();
        let lm = fk::forward_kinematics(&model, &pose).unwrap();
        // Vertices fully weighted to the index distal segment stay within the
        // tube radius of the DIP -> tip segment.
        let (a, b) = (lm[7], lm[8]);
        let d = (b - a).normalize();
        let mut checked = 0;
        for (v, w) in verts.iter().zip(mesh.weights()) {
            if w == &vec![(7, 1.0)] {
                let rel = v - a;
                let radial = (rel - rel.dot(&d) * d).norm();
                assert!((radial - 0.008).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn obj_output_shape() {
        let model = HandModel::default_for(Hand::Left);
        let mesh = SkinnedMesh::tube_hand(&model);
        let obj = mesh.to_obj(mesh.rest_vertices());
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), mesh.rest_vertices().len());
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), mesh.faces().len());
    }

    proptest! {
        #[test]
        fn convex_blend_is_affine(w in 0.0f64..1.0, t in prop::array::uniform3(-1.0f64..1.0), r in prop::array::uniform3(-2.0f64..2.0)) {
            let mesh = two_bone_mesh(vec![vec![(0, w), (1, 1.0 - w)]]);
            let a = Isometry3::from_parts(Translation3::from(Vector3::from(t)), UnitQuaternion::from_scaled_axis(Vector3::from(r)));
            let b = Isometry3::translation(0.3, 0.1, -0.2);
            let out = skin_vertices(&mesh, &[a, b]).unwrap();
            let p = Point3::new(0.1, 0.2, 0.3);
            let expected = w * (a * p).coords + (1.0 - w) * (b * p).coords;
            prop_assert!((out[0] - expected).norm() < 1e-12);
        }
    }
}
