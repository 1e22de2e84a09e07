use std::path::Path;

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::HandError;
use crate::detections::{Hand, LANDMARKS_PER_HAND};
use crate::textfmt::{self, FormatError};

pub const SKELETON_SCHEMA_VERSION: u32 = 1;
pub const PROFILE_SCHEMA_VERSION: u32 = 1;
pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);

const DEFAULT_SKELETON: &str = include_str!("../../data/skeleton_default.toml");

/// Indices of landmarks that are rigid with the wrist regardless of joint
/// angles: the wrist and the finger base joints.
pub const PALM_LANDMARKS: [usize; 6] = [0, 1, 5, 9, 13, 17];

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub name: String,
    /// `None` for bones attached directly to the wrist.
    pub parent: Option<usize>,
    /// Joint position in the parent frame at rest.
    pub rest_offset: Vector3<f64>,
    /// Rotation axes in the bone frame, applied in order.
    pub axes: Vec<Unit<Vector3<f64>>>,
    pub limits: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub name: String,
    /// `None` means the wrist frame.
    pub bone: Option<usize>,
    pub point: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandSkeleton {
    bones: Vec<Bone>,
    landmarks: Vec<Landmark>,
    side: Hand,
    /// First DoF index of each bone.
    dof_offsets: Vec<usize>,
    dof_count: usize,
}

impl HandSkeleton {
    pub fn new(bones: Vec<Bone>, landmarks: Vec<Landmark>, side: Hand) -> Result<Self, HandError> {
        let bad = |m: String| Err(HandError::InvalidSkeleton(m));
        if bones.is_empty() {
            return bad("no bones".into());
        }
        for (i, b) in bones.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return bad(format!("bone {i} has parent {p}; parents must precede children"));
                }
            }
            if b.axes.len() != b.limits.len() || b.axes.len() > 3 {
                return bad(format!("bone {i}: need one limit per axis and at most 3 axes"));
            }
            for &(lo, hi) in &b.limits {
                if !(lo < hi && lo <= 0.0 && hi >= 0.0) {
                    return bad(format!("bone {i}: limits [{lo}, {hi}] must satisfy lo < hi and contain 0"));
                }
            }
            if b.rest_offset.iter().any(|v| !v.is_finite()) {
                return bad(format!("bone {i}: non-finite offset"));
            }
        }
        if landmarks.len() != LANDMARKS_PER_HAND {
            return bad(format!("expected {LANDMARKS_PER_HAND} landmarks, got {}", landmarks.len()));
        }
        if landmarks[0].bone.is_some() || landmarks[0].point != Vector3::zeros() {
            return bad("landmark 0 must be the wrist origin".into());
        }
        if let Some(l) = landmarks.iter().find(|l| l.bone.is_some_and(|b| b >= bones.len())) {
            return bad(format!("landmark {} references a missing bone", l.name));
        }
        let mut dof_offsets = Vec::with_capacity(bones.len());
        let mut dof_count = 0;
        for b in &bones {
            dof_offsets.push(dof_count);
            dof_count += b.axes.len();
        }
        Ok(HandSkeleton {
            bones,
            landmarks,
            side,
            dof_offsets,
            dof_count,
        })
    }

    /// The shipped right-hand skeleton.
    pub fn default_right() -> Self {
        Self::from_toml_str(DEFAULT_SKELETON, "skeleton_default.toml").expect("bundled skeleton is valid")
    }

    /// The shipped skeleton for either side.
    pub fn default_for(side: Hand) -> Self {
        let right = Self::default_right();
        match side {
            Hand::Right => right,
            Hand::Left => right.mirrored(),
        }
    }

    /// Reflects the skeleton through the hand's sagittal plane (x -> -x),
    /// swapping its side. Rotation axes map as `-M a` so that the same angle
    /// produces the mirrored motion.
    pub fn mirrored(&self) -> Self {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let bones = self
            .bones
            .iter()
            .map(|b| Bone {
                rest_offset: m * b.rest_offset,
                axes: b.axes.iter().map(|a| Unit::new_normalize(-(m * a.into_inner()))).collect(),
                ..b.clone()
            })
            .collect();
        let landmarks = self
            .landmarks
            .iter()
            .map(|l| Landmark {
                point: m * l.point,
                ..l.clone()
            })
            .collect();
        let side = match self.side {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        };
        HandSkeleton::new(bones, landmarks, side).expect("mirror of a valid skeleton is valid")
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn side(&self) -> Hand {
        self.side
    }

    pub fn dof_count(&self) -> usize {
        self.dof_count
    }

    pub fn dof_offset(&self, bone: usize) -> usize {
        self.dof_offsets[bone]
    }

    /// Lower and upper limits for every DoF in pose order.
    pub fn dof_limits(&self) -> Vec<(f64, f64)> {
        self.bones.iter().flat_map(|b| b.limits.iter().copied()).collect()
    }

    /// True if `ancestor` lies on the chain from the wrist to `bone`
    /// (inclusive).
    pub fn is_ancestor_or_self(&self, ancestor: usize, mut bone: usize) -> bool {
        loop {
            if bone == ancestor {
                return true;
            }
            match self.bones[bone].parent {
                Some(p) => bone = p,
                None => return false,
            }
        }
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, FormatError> {
        let file: SkeletonFile = toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))?;
        if file.schema_version != SKELETON_SCHEMA_VERSION {
            return Err(FormatError::SchemaVersionMismatch {
                path: path.to_string(),
                found: file.schema_version.to_string(),
                expected: SKELETON_SCHEMA_VERSION.to_string(),
            });
        }
        let side = match file.side.as_str() {
            "left" => Hand::Left,
            "right" => Hand::Right,
            other => return Err(FormatError::invalid(path, format!("side must be left or right, got {other:?}"))),
        };
        let mut bones = Vec::with_capacity(file.bones.len());
        for b in file.bones {
            let mut axes = Vec::with_capacity(b.axes.len());
            for a in &b.axes {
                let v = Vector3::from(*a);
                if !(v.norm() > 1e-9) || v.iter().any(|x| !x.is_finite()) {
                    return Err(FormatError::invalid(path, format!("bone {}: zero or invalid axis", b.name)));
                }
                axes.push(Unit::new_normalize(v));
            }
            bones.push(Bone {
                name: b.name,
                parent: b.parent,
                rest_offset: Vector3::from(b.offset),
                axes,
                limits: b.limits.iter().map(|l| (l[0], l[1])).collect(),
            });
        }
        let landmarks = file
            .landmarks
            .into_iter()
            .map(|l| Landmark {
                name: l.name,
                bone: l.bone,
                point: Vector3::from(l.point),
            })
            .collect();
        HandSkeleton::new(bones, landmarks, side).map_err(|e| FormatError::invalid(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        Self::from_toml_str(&textfmt::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        let file = SkeletonFile {
            schema_version: SKELETON_SCHEMA_VERSION,
            side: match self.side {
                Hand::Left => "left".into(),
                Hand::Right => "right".into(),
            },
            bones: self
                .bones
                .iter()
                .map(|b| BoneRecord {
                    name: b.name.clone(),
                    parent: b.parent,
                    offset: b.rest_offset.into(),
                    axes: b.axes.iter().map(|a| a.into_inner().into()).collect(),
                    limits: b.limits.iter().map(|&(lo, hi)| [lo, hi]).collect(),
                })
                .collect(),
            landmarks: self
                .landmarks
                .iter()
                .map(|l| LandmarkRecord {
                    name: l.name.clone(),
                    bone: l.bone,
                    point: l.point.into(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("skeleton serializes to TOML")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    schema_version: u32,
    side: String,
    bones: Vec<BoneRecord>,
    landmarks: Vec<LandmarkRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoneRecord {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<usize>,
    offset: [f64; 3],
    axes: Vec<[f64; 3]>,
    limits: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LandmarkRecord {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bone: Option<usize>,
    point: [f64; 3],
}

/// Per-subject bone length scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectProfile {
    pub subject_id: String,
    pub bone_scales: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_scale: Option<f64>,
}

impl SubjectProfile {
    pub fn unit(subject_id: impl Into<String>, bone_count: usize) -> Self {
        SubjectProfile {
            subject_id: subject_id.into(),
            bone_scales: vec![1.0; bone_count],
            global_scale: None,
        }
    }

    pub fn validate(&self, skel: &HandSkeleton) -> Result<(), HandError> {
        if self.bone_scales.len() != skel.bones().len() {
            return Err(HandError::InvalidProfile(format!(
                "{} bone scales for {} bones",
                self.bone_scales.len(),
                skel.bones().len()
            )));
        }
        let (lo, hi) = SCALE_RANGE;
        for &s in self.bone_scales.iter().chain(self.global_scale.iter()) {
            if !(lo..=hi).contains(&s) {
                return Err(HandError::InvalidProfile(format!("scale {s} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Effective length factor for bone `i`.
    pub fn scale(&self, i: usize) -> f64 {
        self.bone_scales[i] * self.global_scale.unwrap_or(1.0)
    }

    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, FormatError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct ProfileFile {
            schema_version: u32,
            #[serde(flatten)]
            profile: SubjectProfile,
        }
        let file: ProfileFile = toml::from_str(text).map_err(|e| FormatError::invalid(path, e.to_string()))?;
        if file.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(FormatError::SchemaVersionMismatch {
                path: path.to_string(),
                found: file.schema_version.to_string(),
                expected: PROFILE_SCHEMA_VERSION.to_string(),
            });
        }
        Ok(file.profile)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        Self::from_toml_str(&textfmt::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct ProfileFile<'a> {
            schema_version: u32,
            #[serde(flatten)]
            profile: &'a SubjectProfile,
        }
        toml::to_string(&ProfileFile {
            schema_version: PROFILE_SCHEMA_VERSION,
            profile: self,
        })
        .expect("profile serializes to TOML")
    }
}

/// Skeleton and subject profile for one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandModel {
    pub skeleton: HandSkeleton,
    pub profile: SubjectProfile,
}

impl HandModel {
    pub fn new(skeleton: HandSkeleton, profile: SubjectProfile) -> Result<Self, HandError> {
        profile.validate(&skeleton)?;
        Ok(HandModel { skeleton, profile })
    }

    pub fn default_for(side: Hand) -> Self {
        let skeleton = HandSkeleton::default_for(side);
        let profile = SubjectProfile::unit("default", skeleton.bones().len());
        HandModel { skeleton, profile }
    }
}
