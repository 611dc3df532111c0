//! Analytic gradient of the similarity with respect to the pose parameters.
//!
//! Only the world means depend on the pose while differentiating; world
//! precisions are frozen at a reference pose and refreshed by the optimizer
//! between runs. For a template mean `u` owned by joint `l`:
//!
//! * `du/dt = I`
//! * for every joint `k` on the root-to-`l` chain,
//!   `du/dp_k = R_parent(k) * dR(p_k)/dp * y_k` where `y_k` is `u` expressed in
//!   the frame of `k`, followed by the normalization Jacobian
//!   `dp/dr = (I - p p^T) / |r|`.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{GsogError, Result};
use crate::gaussian::{AnisotropicGaussian, IsotropicGaussian, Precision, SoG};
use crate::kinematics::{
    forward_kinematics, normalize_quaternion, pose_template_with_precisions, posed_precisions,
    unit_quaternion_matrix_derivatives, GSoGTemplate, Pose, PosedModel, RigidTransform, Skeleton,
};
use crate::similarity::{for_each_pair, model_similarity_with, GaussianPairTerm, SimilarityOptions};

/// Gradient aligned with the flattened pose layout `[t, r_0, ..., r_{L-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn quaternion(&self, joint: usize) -> Vector4<f64> {
        let o = 3 + 4 * joint;
        Vector4::new(self.0[o], self.0[o + 1], self.0[o + 2], self.0[o + 3])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `dE_ij / du_i` with the precision held fixed: `-E_ij P (a - z)` where `z`
/// is the mean of the product Gaussian, `Q^{-1} b`.
pub fn grad_pair_wrt_mean(term: &GaussianPairTerm, gi: &AnisotropicGaussian, _gj: &IsotropicGaussian) -> Vector3<f64> {
    let w = Vector3::from(term.aux);
    let z = term.factor.solve_upper(&w);
    -term.value * gi.precision().entries().mul_vec(&(gi.mean() - z))
}

/// Jacobian of one world mean with respect to the pose. Blocks for joints
/// outside the owning chain are zero and omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanJacobian {
    pub translation: Matrix3<f64>,
    pub quaternion_blocks: Vec<(usize, Matrix3x4<f64>)>,
}

impl MeanJacobian {
    pub fn to_dense(&self, joint_count: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3, 4 * joint_count + 3);
        m.view_mut((0, 0), (3, 3)).copy_from(&self.translation);
        for (k, block) in &self.quaternion_blocks {
            m.view_mut((0, 3 + 4 * k), (3, 4)).copy_from(block);
        }
        m
    }
}

/// Per-joint quantities reused by every mean Jacobian at one pose.
struct JointDerivatives {
    transforms: Vec<RigidTransform>,
    parent_rotations: Vec<Matrix3<f64>>,
    rotation_derivatives: Vec<[Matrix3<f64>; 4]>,
    // (I - p p^T) / |r|
    normalization: Vec<Matrix4<f64>>,
}

impl JointDerivatives {
    fn new(skeleton: &Skeleton, pose: &Pose, transforms: Vec<RigidTransform>) -> Result<Self> {
        let n = skeleton.len();
        let mut parent_rotations = Vec::with_capacity(n);
        let mut rotation_derivatives = Vec::with_capacity(n);
        let mut normalization = Vec::with_capacity(n);
        for (l, joint) in skeleton.joints().iter().enumerate() {
            parent_rotations.push(match joint.parent {
                None => Matrix3::identity(),
                Some(p) => transforms[p].rotation,
            });
            let (p, norm) = normalize_quaternion(&pose.quaternions[l], l)?;
            rotation_derivatives.push(unit_quaternion_matrix_derivatives(&p));
            normalization.push((Matrix4::identity() - p * p.transpose()) / norm);
        }
        Ok(JointDerivatives {
            transforms,
            parent_rotations,
            rotation_derivatives,
            normalization,
        })
    }

    /// `du/dr_k` for a world point `u` rigidly attached below joint `k`.
    fn block(&self, k: usize, u: &Vector3<f64>) -> Matrix3x4<f64> {
        let y = self.transforms[k].inverse_transform_point(u);
        let rp = &self.parent_rotations[k];
        let dr = &self.rotation_derivatives[k];
        let dp = Matrix3x4::from_columns(&[rp * dr[0] * y, rp * dr[1] * y, rp * dr[2] * y, rp * dr[3] * y]);
        dp * self.normalization[k]
    }

    /// Adds `g^T du/dr_k` for every `k` on `chain` into `out`.
    fn accumulate(&self, chain: &[usize], u: &Vector3<f64>, g: &Vector3<f64>, out: &mut [f64]) {
        out[0] += g.x;
        out[1] += g.y;
        out[2] += g.z;
        for &k in chain {
            let y = self.transforms[k].inverse_transform_point(u);
            let gp = self.parent_rotations[k].transpose() * g;
            let dr = &self.rotation_derivatives[k];
            let dp = Vector4::new(
                gp.dot(&(dr[0] * y)),
                gp.dot(&(dr[1] * y)),
                gp.dot(&(dr[2] * y)),
                gp.dot(&(dr[3] * y)),
            );
            let dr_k = self.normalization[k] * dp;
            let o = 3 + 4 * k;
            for m in 0..4 {
                out[o + m] += dr_k[m];
            }
        }
    }
}

/// `du_i / dTheta` for attachment `attachment` of `template` at `pose`.
pub fn grad_mean_wrt_pose(template: &GSoGTemplate, pose: &Pose, attachment: usize) -> Result<MeanJacobian> {
    let a = template
        .attachments()
        .get(attachment)
        .ok_or_else(|| GsogError::InvalidArgument(format!("attachment {attachment} out of range")))?;
    let skeleton = template.skeleton();
    let transforms = forward_kinematics(skeleton, pose)?;
    let u = transforms[a.joint].transform_point(a.gaussian.mean());
    let jd = JointDerivatives::new(skeleton, pose, transforms)?;
    Ok(MeanJacobian {
        translation: Matrix3::identity(),
        quaternion_blocks: skeleton.chain(a.joint).iter().map(|&k| (k, jd.block(k, &u))).collect(),
    })
}

/// `E` and `dE/dTheta` for a model posed at `pose`. The world means of
/// `posed` must be those of `template` at `pose`; its precisions are treated
/// as constants.
pub fn grad_similarity(
    template: &GSoGTemplate,
    posed: &PosedModel,
    data: &SoG,
    pose: &Pose,
) -> Result<(f64, GradientVector)> {
    grad_similarity_with(template, posed, data, pose, &SimilarityOptions::default())
}

pub fn grad_similarity_with(
    template: &GSoGTemplate,
    posed: &PosedModel,
    data: &SoG,
    pose: &Pose,
    options: &SimilarityOptions,
) -> Result<(f64, GradientVector)> {
    let skeleton = template.skeleton();
    pose.check_for(skeleton)?;
    if posed.world_gaussians.len() != template.len() {
        return Err(GsogError::LengthMismatch(format!(
            "posed model has {} Gaussians, template has {}",
            posed.world_gaussians.len(),
            template.len()
        )));
    }
    let row = |gi: &AnisotropicGaussian| -> Result<(f64, Vector3<f64>)> {
        let mut e = 0.0;
        let mut g = Vector3::zeros();
        for_each_pair(gi, data, options.cutoff, |_, gj, term| {
            if let Some(term) = term {
                e += term.value;
                g += grad_pair_wrt_mean(term, gi, gj);
            }
        })?;
        Ok((e, g))
    };
    let gaussians = posed.world_gaussians.components();
    let rows: Vec<(f64, Vector3<f64>)> = if options.parallel {
        gaussians.par_iter().map(row).collect::<Result<_>>()?
    } else {
        gaussians.iter().map(row).collect::<Result<_>>()?
    };

    let jd = JointDerivatives::new(skeleton, pose, posed.world_transforms.clone())?;
    let mut grad = vec![0.0; skeleton.parameter_count()];
    let mut value = 0.0;
    for ((gi, &owner), (e, g)) in gaussians.iter().zip(&posed.owners).zip(&rows) {
        value += e;
        jd.accumulate(skeleton.chain(owner), gi.mean(), g, &mut grad);
    }
    Ok((value, GradientVector(grad)))
}

/// Similarity as a function of the pose with world precisions frozen.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    template: &'a GSoGTemplate,
    data: &'a SoG,
    precisions: Vec<Precision>,
    options: SimilarityOptions,
}

impl<'a> Objective<'a> {
    /// Precisions are taken from the template posed at `reference`.
    pub fn new(template: &'a GSoGTemplate, data: &'a SoG, reference: &Pose) -> Result<Self> {
        Ok(Objective {
            template,
            data,
            precisions: posed_precisions(template, reference)?,
            options: SimilarityOptions::default(),
        })
    }

    pub fn with_options(mut self, options: SimilarityOptions) -> Self {
        self.options = options;
        self
    }

    pub fn template(&self) -> &GSoGTemplate {
        self.template
    }

    pub fn data(&self) -> &SoG {
        self.data
    }

    pub fn precisions(&self) -> &[Precision] {
        &self.precisions
    }

    pub fn refresh_precisions(&mut self, reference: &Pose) -> Result<()> {
        self.precisions = posed_precisions(self.template, reference)?;
        Ok(())
    }

    pub fn posed(&self, pose: &Pose) -> Result<PosedModel> {
        pose_template_with_precisions(self.template, pose, &self.precisions)
    }

    pub fn value(&self, pose: &Pose) -> Result<f64> {
        Ok(model_similarity_with(&self.posed(pose)?, self.data, &self.options)?.value)
    }

    pub fn value_and_gradient(&self, pose: &Pose) -> Result<(f64, GradientVector)> {
        let posed = self.posed(pose)?;
        grad_similarity_with(self.template, &posed, self.data, pose, &self.options)
    }
}

/// Central finite differences of `f` at `x` with the given step.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let plus = f(&probe)?;
        probe[k] = x[k] - step;
        let minus = f(&probe)?;
        probe[k] = x[k];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Worst-case componentwise error scaled by the largest reference entry:
/// `max_k |a_k - b_k| / max(max_k |b_k|, floor)`.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    let scale = reference.iter().fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}
