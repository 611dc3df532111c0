use gsog::gaussian::{AnisotropicGaussian, IsotropicGaussian, Precision, SoG};
use gsog::gradients::{finite_difference, max_relative_error, Objective};
use gsog::kinematics::{forward_kinematics, pose_template, Attachment, GSoGTemplate, Joint, Pose, Skeleton};
use gsog::similarity::{model_similarity, pair_similarity};
use gsog::verify::{overlap_by_quadrature, random_configuration, random_pair, random_precision};
use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tree(rng: &mut ChaCha8Rng, size: usize) -> Skeleton {
    Skeleton::new(
        (0..size)
            .map(|l| {
                let offset = Vector3::from_fn(|_, _| rng.random_range(-0.4..0.4));
                if l == 0 {
                    Joint::root(offset)
                } else {
                    Joint::child(rng.random_range(0..l), offset)
                }
            })
            .collect(),
    )
    .unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, joints: usize) -> Pose {
    let quaternions = (0..joints)
        .map(|_| Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector4::new(0.0, 0.0, 0.0, 0.1))
        .collect();
    Pose::new(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)), quaternions).unwrap()
}

fn random_template(rng: &mut ChaCha8Rng, joints: usize) -> GSoGTemplate {
    let skeleton = random_tree(rng, joints);
    let attachments = (0..joints * 2)
        .map(|k| Attachment {
            joint: k % joints,
            gaussian: AnisotropicGaussian::with_weight(
                Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
                random_precision(rng, 0.04, 0.2),
                rng.random_range(0.5..2.0),
            )
            .unwrap(),
        })
        .collect();
    GSoGTemplate::new(skeleton, attachments).unwrap()
}

fn homogeneous(r: &Vector4<f64>, offset: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = UnitQuaternion::from_quaternion(Quaternion::new(r[3], r[0], r[1], r[2])).to_homogeneous();
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(offset);
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kinematics_matches_matrix_composition(seed in any::<u64>(), size in 1usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = random_tree(&mut rng, size);
        let pose = random_pose(&mut rng, size);
        let fk = forward_kinematics(&skeleton, &pose).unwrap();
        let mut world: Vec<Matrix4<f64>> = Vec::new();
        for (l, joint) in skeleton.joints().iter().enumerate() {
            let parent = joint.parent.map_or(Matrix4::new_translation(&pose.translation), |p| world[p]);
            world.push(parent * homogeneous(&pose.quaternions[l], &joint.offset));
            prop_assert!((fk[l].to_homogeneous() - world[l]).amax() <= 1e-12);
        }
    }

    #[test]
    fn similarity_is_invariant_under_shared_rigid_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gi, gj) = random_pair(&mut rng).unwrap();
        let r = UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)));
        let t = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let m = r.to_rotation_matrix().into_inner();
        let gi2 = gi.transformed(&m, &t);
        let gj2 = IsotropicGaussian::with_weight(m * gj.mean() + t, gj.variance(), gj.weight()).unwrap();
        let a = pair_similarity(&gi, &gj).unwrap().value;
        let b = pair_similarity(&gi2, &gj2).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
    }

    #[test]
    fn similarity_is_bounded_by_isotropic_envelope(seed in any::<u64>()) {
        // P >= lambda_min I, so the overlap cannot exceed the one with the
        // broader isotropic Gaussian of variance 1 / lambda_min at equal means.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (gi, gj) = random_pair(&mut rng).unwrap();
        let s1 = 1.0 / gi.precision().min_eigenvalue();
        let s2 = gj.variance();
        let bound = gi.weight() * gj.weight() * (2.0 * std::f64::consts::PI * s1 * s2 / (s1 + s2)).powf(1.5);
        let e = pair_similarity(&gi, &gj).unwrap().value;
        prop_assert!(e > 0.0 && e <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn full_gradient_matches_central_differences(seed in any::<u64>(), joints in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = random_template(&mut rng, joints);
        let (pose, data) = random_configuration(&template, &mut rng).unwrap();
        let objective = Objective::new(&template, &data, &pose).unwrap();
        let (_, g) = objective.value_and_gradient(&pose).unwrap();
        let numeric = finite_difference(|x| objective.value(&Pose::from_slice(x)?), &pose.to_vec(), 1e-5).unwrap();
        prop_assert!(max_relative_error(g.as_slice(), &numeric, 1e-9) <= 1e-5);
    }
}

#[test]
fn closed_form_matches_quadrature_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (gi, gj) = random_pair(&mut rng).unwrap();
        let closed = pair_similarity(&gi, &gj).unwrap().value;
        let quad = overlap_by_quadrature(&gi, &gj, 1e-9);
        assert!((closed - quad).abs() <= 1e-6 * quad, "{closed} vs {quad}");
    }
}

#[test]
fn elongated_component_matches_quadrature() {
    let p = Precision::from_axes(
        &Vector3::new(0.01, 0.3, 0.02),
        &UnitQuaternion::from_euler_angles(0.4, -0.7, 1.1),
    )
    .unwrap();
    let gi = AnisotropicGaussian::new(Vector3::new(0.1, 0.0, -0.2), p).unwrap();
    let gj = IsotropicGaussian::new(Vector3::new(0.05, 0.2, -0.1), 0.002).unwrap();
    let closed = pair_similarity(&gi, &gj).unwrap().value;
    let quad = overlap_by_quadrature(&gi, &gj, 1e-9);
    assert!((closed - quad).abs() <= 1e-6 * quad);
}

#[test]
fn model_similarity_is_brute_force_pair_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let template = random_template(&mut rng, 5);
    let (pose, data) = random_configuration(&template, &mut rng).unwrap();
    let posed = pose_template(&template, &pose).unwrap();
    let mut brute = 0.0;
    for gi in posed.world_gaussians.components() {
        for gj in data.components() {
            brute += pair_similarity(gi, gj).unwrap().value;
        }
    }
    let e = model_similarity(&posed, &data).unwrap().value;
    assert!((e - brute).abs() <= 1e-12 * brute);
    let single = SoG::new(vec![data.components()[0]]).unwrap();
    assert!(model_similarity(&posed, &single).unwrap().value < e);
}
