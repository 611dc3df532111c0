//! Quaternion-parameterized skeleton and posing of the G-SoG template.
//!
//! Each joint `l` carries a fixed offset in its parent's frame and a rotation
//! from the pose. World transforms compose down the tree:
//! `T_l = T_parent(l) * Trans(offset_l) * Rot(q_l)`, where the root's parent
//! transform is the global translation `t`.
//!
//! Quaternions are stored `[x, y, z, w]` with `w` the scalar part; the
//! identity is `(0, 0, 0, 1)`. They are unnormalized parameters and are
//! divided by their norm before use.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{GsogError, Result};
use crate::gaussian::{AnisotropicGaussian, GSoG, Precision};

pub const IDENTITY_QUATERNION: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

/// Normalizes `r`, returning `(p, |r|)`.
pub(crate) fn normalize_quaternion(r: &Vector4<f64>, joint: usize) -> Result<(Vector4<f64>, f64)> {
    let n = r.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(GsogError::ZeroQuaternion { joint });
    }
    Ok((r / n, n))
}

/// Rotation matrix of a unit quaternion `p = [x, y, z, w]`.
pub(crate) fn unit_quaternion_matrix(p: &Vector4<f64>) -> Matrix3<f64> {
    let (x, y, z, w) = (p[0], p[1], p[2], p[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`unit_quaternion_matrix`] with respect to
/// `x, y, z, w`, treating the entries as polynomials in `p`.
pub(crate) fn unit_quaternion_matrix_derivatives(p: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (x, y, z, w) = (2.0 * p[0], 2.0 * p[1], 2.0 * p[2], 2.0 * p[3]);
    [
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
    ]
}

/// Rotation matrix of the (unnormalized) quaternion `r = [x, y, z, w]`.
pub fn quat_to_rotation(r: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let (p, _) = normalize_quaternion(r, 0)?;
    Ok(unit_quaternion_matrix(&p))
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// `self * other`
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse_transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: Option<String>,
    /// `None` for the root.
    pub parent: Option<usize>,
    /// Translation in the parent's frame.
    pub offset: Vector3<f64>,
}

impl Joint {
    pub fn root(offset: Vector3<f64>) -> Self {
        Joint {
            name: None,
            parent: None,
            offset,
        }
    }

    pub fn child(parent: usize, offset: Vector3<f64>) -> Self {
        Joint {
            name: None,
            parent: Some(parent),
            offset,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

/// Joint tree in topological order: joint 0 is the root and every other
/// joint's parent has a smaller index.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    // chains[l] lists the joints from the root down to l, inclusive.
    chains: Vec<Vec<usize>>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(GsogError::InvalidSkeleton("no joints".into()));
        }
        let mut chains: Vec<Vec<usize>> = Vec::with_capacity(joints.len());
        for (i, j) in joints.iter().enumerate() {
            if j.offset.iter().any(|v| !v.is_finite()) {
                return Err(GsogError::InvalidSkeleton(format!("joint {i} has a non-finite offset")));
            }
            match (i, j.parent) {
                (0, None) => chains.push(vec![0]),
                (0, Some(_)) => return Err(GsogError::InvalidSkeleton("joint 0 must be the root".into())),
                (_, None) => {
                    return Err(GsogError::InvalidSkeleton(format!(
                        "joint {i} has no parent; only joint 0 may be the root"
                    )))
                }
                (_, Some(p)) if p >= i => {
                    return Err(GsogError::InvalidSkeleton(format!(
                        "joint {i} has parent {p}; parents must precede children"
                    )))
                }
                (_, Some(p)) => {
                    let mut chain = chains[p].clone();
                    chain.push(i);
                    chains.push(chain);
                }
            }
        }
        Ok(Skeleton { joints, chains })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    /// Number of pose parameters, `4L + 3`.
    pub fn parameter_count(&self) -> usize {
        4 * self.joints.len() + 3
    }

    /// Joints from the root down to `joint`, inclusive.
    pub fn chain(&self, joint: usize) -> &[usize] {
        &self.chains[joint]
    }

    pub fn is_ancestor_or_self(&self, ancestor: usize, joint: usize) -> bool {
        self.chains[joint].contains(&ancestor)
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name.as_deref() == Some(name))
    }
}

/// Pose parameters: global translation plus one unnormalized quaternion per
/// joint. Flattened layout is `[t, r_0, r_1, ..., r_{L-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub quaternions: Vec<Vector4<f64>>,
}

impl Pose {
    pub fn new(translation: Vector3<f64>, quaternions: Vec<Vector4<f64>>) -> Result<Self> {
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GsogError::NonFinite("pose translation"));
        }
        for (joint, q) in quaternions.iter().enumerate() {
            normalize_quaternion(q, joint)?;
        }
        Ok(Pose {
            translation,
            quaternions,
        })
    }

    /// Zero translation, identity rotations.
    pub fn rest(joint_count: usize) -> Self {
        Pose {
            translation: Vector3::zeros(),
            quaternions: vec![Vector4::from(IDENTITY_QUATERNION); joint_count],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.quaternions.len()
    }

    pub fn parameter_count(&self) -> usize {
        4 * self.quaternions.len() + 3
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        v.extend_from_slice(self.translation.as_slice());
        for q in &self.quaternions {
            v.extend_from_slice(q.as_slice());
        }
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 7 || !(values.len() - 3).is_multiple_of(4) {
            return Err(GsogError::PoseLength {
                expected: 4 * ((values.len().max(7) - 3) / 4) + 3,
                got: values.len(),
            });
        }
        let translation = Vector3::new(values[0], values[1], values[2]);
        let quaternions = values[3..]
            .chunks_exact(4)
            .map(|c| Vector4::new(c[0], c[1], c[2], c[3]))
            .collect();
        Pose::new(translation, quaternions)
    }

    /// Like [`Pose::from_slice`] but also checks the joint count.
    pub fn from_slice_for(values: &[f64], skeleton: &Skeleton) -> Result<Self> {
        if values.len() != skeleton.parameter_count() {
            return Err(GsogError::PoseLength {
                expected: skeleton.parameter_count(),
                got: values.len(),
            });
        }
        Pose::from_slice(values)
    }

    /// Copy with every quaternion scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let quaternions = self
            .quaternions
            .iter()
            .enumerate()
            .map(|(j, q)| normalize_quaternion(q, j).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pose {
            translation: self.translation,
            quaternions,
        })
    }

    pub fn check_for(&self, skeleton: &Skeleton) -> Result<()> {
        if self.quaternions.len() != skeleton.len() {
            return Err(GsogError::PoseLength {
                expected: skeleton.parameter_count(),
                got: self.parameter_count(),
            });
        }
        Ok(())
    }
}

pub fn flatten_pose(pose: &Pose) -> Vec<f64> {
    pose.to_vec()
}

pub fn unflatten_pose(values: &[f64], skeleton: &Skeleton) -> Result<Pose> {
    Pose::from_slice_for(values, skeleton)
}

/// World transform of every joint.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>> {
    pose.check_for(skeleton)?;
    let mut out: Vec<RigidTransform> = Vec::with_capacity(skeleton.len());
    for (l, joint) in skeleton.joints().iter().enumerate() {
        let parent = match joint.parent {
            None => RigidTransform::from_translation(pose.translation),
            Some(p) => out[p],
        };
        let (p, _) = normalize_quaternion(&pose.quaternions[l], l)?;
        let local = RigidTransform::new(unit_quaternion_matrix(&p), joint.offset);
        out.push(parent.compose(&local));
    }
    Ok(out)
}

/// World position of every joint origin.
pub fn joint_positions(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    Ok(forward_kinematics(skeleton, pose)?
        .into_iter()
        .map(|t| t.translation)
        .collect())
}

/// An anisotropic Gaussian expressed in the local frame of a joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub joint: usize,
    pub gaussian: AnisotropicGaussian,
}

/// Skeleton with anisotropic Gaussians bound to its segments.
#[derive(Debug, Clone, PartialEq)]
pub struct GSoGTemplate {
    skeleton: Skeleton,
    attachments: Vec<Attachment>,
}

impl GSoGTemplate {
    pub fn new(skeleton: Skeleton, attachments: Vec<Attachment>) -> Result<Self> {
        if attachments.is_empty() {
            return Err(GsogError::InvalidTemplate("template has no Gaussians".into()));
        }
        if let Some(a) = attachments.iter().find(|a| a.joint >= skeleton.len()) {
            return Err(GsogError::InvalidTemplate(format!(
                "attachment references joint {} but the skeleton has {} joints",
                a.joint,
                skeleton.len()
            )));
        }
        Ok(GSoGTemplate { skeleton, attachments })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn attachments(&self) -> &[Attachment] {
        &self.attachments
    }

    pub fn len(&self) -> usize {
        self.attachments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attachments.is_empty()
    }

    pub fn rest_pose(&self) -> Pose {
        Pose::rest(self.skeleton.len())
    }
}

/// Template evaluated at a pose, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedModel {
    pub world_gaussians: GSoG,
    pub world_transforms: Vec<RigidTransform>,
    /// Owning joint of each world Gaussian.
    pub owners: Vec<usize>,
}

/// Poses every attached Gaussian: mean `R_l mu + t_l`, precision `R_l P R_l^T`.
pub fn pose_template(template: &GSoGTemplate, pose: &Pose) -> Result<PosedModel> {
    let transforms = forward_kinematics(template.skeleton(), pose)?;
    let components = template
        .attachments()
        .iter()
        .map(|a| {
            let t = &transforms[a.joint];
            a.gaussian.transformed(&t.rotation, &t.translation)
        })
        .collect();
    Ok(PosedModel {
        world_gaussians: GSoG::new(components)?,
        owners: template.attachments().iter().map(|a| a.joint).collect(),
        world_transforms: transforms,
    })
}

/// World precisions of the template at `pose`, one per attachment.
pub fn posed_precisions(template: &GSoGTemplate, pose: &Pose) -> Result<Vec<Precision>> {
    let transforms = forward_kinematics(template.skeleton(), pose)?;
    Ok(template
        .attachments()
        .iter()
        .map(|a| a.gaussian.precision().rotated(&transforms[a.joint].rotation))
        .collect())
}

/// Poses the means only; world precisions are taken from `precisions`
/// (typically [`posed_precisions`] at a reference pose).
pub fn pose_template_with_precisions(
    template: &GSoGTemplate,
    pose: &Pose,
    precisions: &[Precision],
) -> Result<PosedModel> {
    if precisions.len() != template.len() {
        return Err(GsogError::LengthMismatch(format!(
            "{} precisions for {} attachments",
            precisions.len(),
            template.len()
        )));
    }
    let transforms = forward_kinematics(template.skeleton(), pose)?;
    let components = template
        .attachments()
        .iter()
        .zip(precisions)
        .map(|(a, p)| {
            let mean = transforms[a.joint].transform_point(a.gaussian.mean());
            a.gaussian.with_mean_and_precision(mean, *p)
        })
        .collect();
    Ok(PosedModel {
        world_gaussians: GSoG::new(components)?,
        owners: template.attachments().iter().map(|a| a.joint).collect(),
        world_transforms: transforms,
    })
}
