//! Joint hierarchy and forward kinematics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotations::{from_sixd, Mat3, Rotation6D, RotationError, Vec3};

pub const NUM_JOINTS: usize = 24;

const CANONICAL_JSON: &str = include_str!("../assets/skeleton_v1.json");

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton must have exactly {NUM_JOINTS} joints, found {0}")]
    JointCount(usize),
    #[error("joint 0 must be the root (no parent)")]
    RootNotFirst,
    #[error("joint {joint} has no parent but is not joint 0")]
    ExtraRoot { joint: usize },
    #[error("joint {joint} names parent {parent}, which does not exist")]
    BadParent { joint: usize, parent: usize },
    #[error("parent graph has a cycle through joint {joint}")]
    Cycle { joint: usize },
    #[error("pose has {got} rotations, expected {NUM_JOINTS}")]
    PoseSize { got: usize },
    #[error("frame has {got} values, expected {expected}")]
    FrameSize { got: usize, expected: usize },
    #[error("joint {joint}: {source}")]
    Rotation { joint: usize, source: RotationError },
    #[error("reading skeleton: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing skeleton: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SkeletonFile {
    #[serde(default)]
    name: String,
    #[serde(default = "one")]
    version: u32,
    joints: Vec<JointSpec>,
}

fn one() -> u32 {
    1
}

/// A validated 24-joint tree. Joint 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub name: String,
    pub version: u32,
    joints: Vec<JointSpec>,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
}

impl Skeleton {
    /// The skeleton shipped with the crate.
    pub fn canonical() -> Self {
        Self::from_json_str(CANONICAL_JSON).expect("bundled skeleton is valid")
    }

    pub fn canonical_json() -> &'static str {
        CANONICAL_JSON
    }

    pub fn from_json_str(s: &str) -> Result<Self, SkeletonError> {
        let f: SkeletonFile = serde_json::from_str(s)?;
        Self::from_joints(f.name, f.version, f.joints)
    }

    pub fn from_path(p: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        Self::from_json_str(&std::fs::read_to_string(p)?)
    }

    pub fn to_json(&self) -> String {
        let f = SkeletonFile { name: self.name.clone(), version: self.version, joints: self.joints.clone() };
        serde_json::to_string_pretty(&f).expect("skeleton serializes")
    }

    pub fn from_joints(name: String, version: u32, joints: Vec<JointSpec>) -> Result<Self, SkeletonError> {
        if joints.len() != NUM_JOINTS {
            return Err(SkeletonError::JointCount(joints.len()));
        }
        if joints[0].parent.is_some() {
            return Err(SkeletonError::RootNotFirst);
        }
        for (j, spec) in joints.iter().enumerate().skip(1) {
            match spec.parent {
                None => return Err(SkeletonError::ExtraRoot { joint: j }),
                Some(p) if p >= NUM_JOINTS => return Err(SkeletonError::BadParent { joint: j, parent: p }),
                Some(_) => {}
            }
        }
        let mut depth = [0usize; NUM_JOINTS];
        for (j, d) in depth.iter_mut().enumerate() {
            let mut cur = j;
            while let Some(p) = joints[cur].parent {
                *d += 1;
                if *d > NUM_JOINTS {
                    return Err(SkeletonError::Cycle { joint: j });
                }
                cur = p;
            }
        }
        let mut order: Vec<usize> = (0..NUM_JOINTS).collect();
        order.sort_by_key(|&j| (depth[j], j));
        Ok(Skeleton { name, version, joints, order })
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.joints[j].parent
    }

    pub fn offset(&self, j: usize) -> Vec3 {
        let o = self.joints[j].offset;
        Vec3::new(o[0], o[1], o[2])
    }

    /// Global joint positions from local rotations and a root translation.
    pub fn forward_kinematics(&self, translation: Vec3, local: &[Mat3]) -> Result<Vec<Vec3>, SkeletonError> {
        if local.len() != NUM_JOINTS {
            return Err(SkeletonError::PoseSize { got: local.len() });
        }
        let mut global = [Mat3::identity(); NUM_JOINTS];
        let mut pos = vec![Vec3::zeros(); NUM_JOINTS];
        for &j in &self.order {
            match self.joints[j].parent {
                None => {
                    pos[j] = translation + self.offset(j);
                    global[j] = local[j];
                }
                Some(p) => {
                    pos[j] = pos[p] + global[p] * self.offset(j);
                    global[j] = global[p] * local[j];
                }
            }
        }
        Ok(pos)
    }

    /// Joint positions for one 147-value dance frame.
    pub fn frame_positions(&self, frame: &[f64]) -> Result<Vec<Vec3>, SkeletonError> {
        let expected = 3 + 6 * NUM_JOINTS;
        if frame.len() != expected {
            return Err(SkeletonError::FrameSize { got: frame.len(), expected });
        }
        let mut rots = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let s = Rotation6D::from_slice(&frame[3 + 6 * j..]);
            rots.push(from_sixd(&s).map_err(|source| SkeletonError::Rotation { joint: j, source })?);
        }
        self.forward_kinematics(Vec3::new(frame[0], frame[1], frame[2]), &rots)
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::canonical()
    }
}
