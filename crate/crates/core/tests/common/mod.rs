#![allow(dead_code)]

use std::path::PathBuf;

use gsog::config::TemplateConfig;
use gsog::gaussian::SoG;
use gsog::kinematics::{pose_template, GSoGTemplate, Pose};
use gsog::synthetic::{add_noise, from_unit_quaternion, perturb_pose, sample_posed};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;

pub const POINTS_PER_COMPONENT: usize = 1000;
/// Per-joint spread of the true pose around the base pose (radians).
pub const TRUTH_SPREAD: f64 = 0.2;
pub const INIT_PERTURBATION_DEG: f64 = 5.0;

pub fn template_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates").join(name)
}

pub fn load(name: &str) -> (TemplateConfig, GSoGTemplate) {
    let config = TemplateConfig::load(template_path(name)).unwrap();
    let template = config.template().unwrap();
    (config, template)
}

/// Standing human with arms abducted and legs slightly apart, 2.5 m in
/// front of the origin.
pub fn human_base_pose(template: &GSoGTemplate) -> Pose {
    let skeleton = template.skeleton();
    let mut pose = template.rest_pose();
    pose.translation = Vector3::new(0.0, 1.0, 2.5);
    for (name, angle) in [
        ("l_shoulder", 1.2),
        ("r_shoulder", -1.2),
        ("l_hip", 0.15),
        ("r_hip", -0.15),
    ] {
        let joint = skeleton.find(name).unwrap();
        pose.quaternions[joint] = from_unit_quaternion(&UnitQuaternion::from_scaled_axis(Vector3::z() * angle));
    }
    pose
}

pub struct RecoveryCase {
    pub truth: Pose,
    pub init: Pose,
    pub cloud: gsog::pointcloud::PointCloud,
}

/// True pose near `base`, a cloud sampled from the template at that pose and
/// an initial pose within the init perturbation of the truth.
pub fn recovery_case<R: Rng>(template: &GSoGTemplate, base: &Pose, noise_std: f64, rng: &mut R) -> RecoveryCase {
    let truth = perturb_pose(base, TRUTH_SPREAD, 0.0, rng).unwrap();
    let init = perturb_pose(&truth, INIT_PERTURBATION_DEG.to_radians(), 0.0, rng).unwrap();
    let posed = pose_template(template, &truth).unwrap();
    let cloud = sample_posed(&posed, POINTS_PER_COMPONENT, rng).unwrap();
    let cloud = add_noise(&cloud, noise_std, rng).unwrap();
    RecoveryCase { truth, init, cloud }
}

pub fn data_sog(config: &TemplateConfig, cloud: &gsog::pointcloud::PointCloud) -> SoG {
    config.data.convert(cloud).unwrap()
}

pub fn max_joint_error(template: &GSoGTemplate, estimate: &Pose, truth: &Pose) -> f64 {
    gsog::evaluation::joint_position_errors(template.skeleton(), estimate, truth)
        .unwrap()
        .into_iter()
        .fold(0.0, f64::max)
}
