//! Synthetic observations and motions generated from a template.

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{GsogError, Result};
use crate::kinematics::{forward_kinematics, GSoGTemplate, Pose, PosedModel, Skeleton};
use crate::pointcloud::PointCloud;

pub fn to_unit_quaternion(q: &Vector4<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[0], q[1], q[2]))
}

pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> Vector4<f64> {
    Vector4::new(q.i, q.j, q.k, q.w)
}

/// Uniformly distributed unit axis.
pub fn random_axis<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Applies to every joint a local rotation about a random axis by an angle
/// drawn uniformly from `[0, max_angle]` radians, and shifts the root by a
/// random vector of length at most `max_translation`.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose, max_angle: f64, max_translation: f64, rng: &mut R) -> Result<Pose> {
    let quaternions = pose
        .quaternions
        .iter()
        .map(|q| {
            let angle = rng.random_range(0.0..=max_angle);
            let delta = UnitQuaternion::from_scaled_axis(random_axis(rng) * angle);
            from_unit_quaternion(&(to_unit_quaternion(q) * delta))
        })
        .collect();
    let shift = random_axis(rng) * rng.random_range(0.0..=max_translation);
    Pose::new(pose.translation + shift, quaternions)
}

/// Largest rotation angle (radians) between corresponding joint quaternions.
pub fn max_joint_angle(a: &Pose, b: &Pose) -> f64 {
    a.quaternions
        .iter()
        .zip(&b.quaternions)
        .map(|(p, q)| to_unit_quaternion(p).angle_to(&to_unit_quaternion(q)))
        .fold(0.0, f64::max)
}

/// Draws points from each world Gaussian of `posed`, treated as a normal
/// distribution with covariance equal to the inverse precision; `counts`
/// gives the number per component. Points come in antithetic pairs, so each
/// component's sample mean is its mean; an odd count adds the mean itself.
pub fn sample_posed_counts<R: Rng + ?Sized>(posed: &PosedModel, counts: &[usize], rng: &mut R) -> Result<PointCloud> {
    if counts.len() != posed.world_gaussians.len() {
        return Err(GsogError::LengthMismatch(format!(
            "{} counts for {} components",
            counts.len(),
            posed.world_gaussians.len()
        )));
    }
    let mut points = Vec::with_capacity(counts.iter().sum());
    for (g, &n) in posed.world_gaussians.components().iter().zip(counts) {
        let factor = g
            .precision()
            .entries()
            .cholesky()
            .ok_or(GsogError::NotPositiveDefinite)?;
        let mu = *g.mean();
        for _ in 0..n / 2 {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let d = factor.solve_upper(&z);
            points.push(mu + d);
            points.push(mu - d);
        }
        if n % 2 == 1 {
            points.push(mu);
        }
    }
    PointCloud::new(points)
}

/// `per_component` points from every component.
pub fn sample_posed<R: Rng + ?Sized>(posed: &PosedModel, per_component: usize, rng: &mut R) -> Result<PointCloud> {
    if per_component == 0 {
        return Err(GsogError::InvalidArgument("per_component must be positive".into()));
    }
    sample_posed_counts(posed, &vec![per_component; posed.world_gaussians.len()], rng)
}

/// Splits `total` points across components in proportion to their volume
/// `1 / sqrt(det P)`, so the sampled cloud has roughly uniform density.
pub fn volume_counts(posed: &PosedModel, total: usize) -> Result<Vec<usize>> {
    let volumes = posed
        .world_gaussians
        .components()
        .iter()
        .map(|g| {
            let f = g
                .precision()
                .entries()
                .cholesky()
                .ok_or(GsogError::NotPositiveDefinite)?;
            Ok(1.0 / f.sqrt_det())
        })
        .collect::<Result<Vec<f64>>>()?;
    let sum: f64 = volumes.iter().sum();
    let exact: Vec<f64> = volumes.iter().map(|v| v / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    Ok(counts)
}

/// Adds isotropic normal noise with standard deviation `std` to every point.
pub fn add_noise<R: Rng + ?Sized>(cloud: &PointCloud, std: f64, rng: &mut R) -> Result<PointCloud> {
    if std == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| GsogError::InvalidArgument(e.to_string()))?;
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| p + Vector3::from_fn(|_, _| normal.sample(rng)))
            .collect(),
    )
}

/// Smooth motion starting at `base`: each joint oscillates about a fixed
/// random axis with an angle `a sin(w t + phi) - a sin(phi)` whose per-frame
/// change never exceeds `max_step` radians; the root drifts linearly by at
/// most `max_translation_step` per frame.
pub fn oscillating_motion<R: Rng + ?Sized>(
    base: &Pose,
    frames: usize,
    max_step: f64,
    max_amplitude: f64,
    max_translation_step: f64,
    rng: &mut R,
) -> Result<Vec<Pose>> {
    struct Osc {
        axis: Vector3<f64>,
        amplitude: f64,
        omega: f64,
        phase: f64,
    }
    let oscillators: Vec<Osc> = base
        .quaternions
        .iter()
        .map(|_| {
            let amplitude = rng.random_range(0.3..=1.0) * max_amplitude;
            // |d/dt a sin(w t)| <= a w, so a w <= max_step bounds each increment
            let omega = if amplitude > 0.0 {
                rng.random_range(0.5..=1.0) * max_step / amplitude
            } else {
                0.0
            };
            Osc {
                axis: random_axis(rng),
                amplitude,
                omega,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let drift = random_axis(rng) * rng.random_range(0.0..=max_translation_step);
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let quaternions = base
                .quaternions
                .iter()
                .zip(&oscillators)
                .map(|(q, o)| {
                    let angle = o.amplitude * ((o.omega * t + o.phase).sin() - o.phase.sin());
                    from_unit_quaternion(&(to_unit_quaternion(q) * UnitQuaternion::from_scaled_axis(o.axis * angle)))
                })
                .collect();
            Pose::new(base.translation + drift * t, quaternions)
        })
        .collect()
}

/// World joint positions of `pose`, convenience for recovery checks.
pub fn world_joint_positions(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    Ok(forward_kinematics(skeleton, pose)?
        .iter()
        .map(|t| t.translation)
        .collect())
}

/// Template-derived point cloud at `pose`.
pub fn sample_template<R: Rng + ?Sized>(
    template: &GSoGTemplate,
    pose: &Pose,
    per_component: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    let posed = crate::kinematics::pose_template(template, pose)?;
    let cloud = sample_posed(&posed, per_component, rng)?;
    add_noise(&cloud, noise_std, rng)
}
