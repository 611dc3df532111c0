//! Numerical oracles for the closed-form similarity and its gradient:
//! adaptive Gauss-Kronrod quadrature of the overlap integral and central
//! finite differences of the objective.

use std::collections::BinaryHeap;

use nalgebra::{UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gaussian::{AnisotropicGaussian, IsotropicGaussian, Precision, SoG};
use crate::gradients::{finite_difference, max_relative_error, Objective};
use crate::kinematics::{pose_template, GSoGTemplate, Pose};
use crate::similarity::pair_similarity;
use crate::synthetic::random_axis;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (the 7-point rule).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive 15-point Gauss-Kronrod integration over `[a, b]`,
/// bisecting the worst segment until the summed error estimate is within
/// `max(abs_tol, rel_tol * |I|)` or `max_segments` is reached.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_segments: usize,
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (value, error) = gk15(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a, b, value, error });
    let (mut total, mut total_err) = (value, error);
    while total_err > abs_tol.max(rel_tol * total.abs()) && heap.len() < max_segments {
        let worst = heap.pop().expect("non-empty");
        let m = 0.5 * (worst.a + worst.b);
        let (v1, e1) = gk15(&mut f, worst.a, m);
        let (v2, e2) = gk15(&mut f, m, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Segment {
            a: worst.a,
            b: m,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: m,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
    heap.iter().map(|s| s.value).sum()
}

/// Nested adaptive quadrature of `f` over the box `[lo, hi]`.
///
/// A coarse tensor-product pass sets absolute tolerances for the inner
/// integrals so that negligible tails are not refined.
pub fn integrate_box<F: Fn(&Vector3<f64>) -> f64>(f: F, lo: &Vector3<f64>, hi: &Vector3<f64>, rel_tol: f64) -> f64 {
    let coarse = |x: f64| {
        let mut inner = |y: f64| gk15(&mut |z| f(&Vector3::new(x, y, z)), lo.z, hi.z).0;
        gk15(&mut inner, lo.y, hi.y).0
    };
    let estimate = gk15(&mut { coarse }, lo.x, hi.x).0.abs();
    let (lx, ly) = (hi.x - lo.x, hi.y - lo.y);
    let tol_z = 1e-3 * rel_tol * estimate / (lx * ly);
    let tol_y = 1e-2 * rel_tol * estimate / lx;
    integrate(
        |x| {
            integrate(
                |y| integrate(|z| f(&Vector3::new(x, y, z)), lo.z, hi.z, tol_z, 1e-2 * rel_tol, 400),
                lo.y,
                hi.y,
                tol_y,
                1e-1 * rel_tol,
                400,
            )
        },
        lo.x,
        hi.x,
        0.0,
        rel_tol,
        400,
    )
}

/// Overlap integral of the two densities by quadrature over the intersection
/// of their 10-standard-deviation boxes, outside of which either factor is
/// below `exp(-50)` of its peak.
pub fn overlap_by_quadrature(gi: &AnisotropicGaussian, gj: &IsotropicGaussian, rel_tol: f64) -> f64 {
    let cov = gi.precision().to_matrix().try_inverse().expect("precision is SPD");
    let sd_i = Vector3::new(cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt());
    let sd_j = gj.variance().sqrt();
    let lo = (gi.mean() - sd_i * 10.0).sup(&gj.mean().add_scalar(-10.0 * sd_j));
    let hi = (gi.mean() + sd_i * 10.0).inf(&gj.mean().add_scalar(10.0 * sd_j));
    if (0..3).any(|k| hi[k] <= lo[k]) {
        return 0.0;
    }
    integrate_box(|x| gi.eval(x) * gj.eval(x), &lo, &hi, rel_tol)
}

/// Random SPD precision with standard deviations in `[min_sd, max_sd]`.
pub fn random_precision<R: Rng + ?Sized>(rng: &mut R, min_sd: f64, max_sd: f64) -> Precision {
    let sd = Vector3::from_fn(|_, _| rng.random_range(min_sd..=max_sd));
    let q = UnitQuaternion::from_scaled_axis(random_axis(rng) * rng.random_range(0.0..std::f64::consts::PI));
    Precision::from_axes(&sd, &q).expect("positive axes")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckSettings {
    pub gradient_cases: usize,
    pub quadrature_cases: usize,
    pub step: f64,
    pub gradient_tolerance: f64,
    pub absolute_floor: f64,
    pub quadrature_tolerance: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            gradient_cases: 100,
            quadrature_cases: 50,
            step: 1e-5,
            gradient_tolerance: 1e-5,
            absolute_floor: 1e-9,
            quadrature_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub settings: CheckSettings,
    pub gradient_max_error: f64,
    pub gradient_worst_case: usize,
    pub quadrature_max_error: f64,
    pub quadrature_worst_case: usize,
    pub passed: bool,
}

/// Analytic `(E, dE/dTheta)` under test.
pub type GradientFn<'f> = dyn Fn(&Objective, &Pose) -> Result<(f64, Vec<f64>)> + 'f;

/// Random pose with non-unit quaternions and observations scattered around
/// the posed template.
pub fn random_configuration<R: Rng + ?Sized>(template: &GSoGTemplate, rng: &mut R) -> Result<(Pose, SoG)> {
    let quaternions = template
        .skeleton()
        .joints()
        .iter()
        .map(|_| {
            let q = UnitQuaternion::from_scaled_axis(random_axis(rng) * rng.random_range(0.0..1.5));
            Vector4::new(q.i, q.j, q.k, q.w) * rng.random_range(0.5..2.0)
        })
        .collect();
    let t = Vector3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(1.0..3.0),
    );
    let pose = Pose::new(t, quaternions)?;
    let posed = pose_template(template, &pose)?;
    let n = rng.random_range(10..40);
    let comps = posed.world_gaussians.components();
    let data = (0..n)
        .map(|_| {
            let anchor = comps[rng.random_range(0..comps.len())].mean();
            let offset = Vector3::from_fn(|_, _| rng.random_range(-0.08..0.08));
            IsotropicGaussian::new(anchor + offset, rng.random_range(0.0005..0.01))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pose, SoG::new(data)?))
}

pub fn analytic_gradient(objective: &Objective, pose: &Pose) -> Result<(f64, Vec<f64>)> {
    objective.value_and_gradient(pose).map(|(e, g)| (e, g.0))
}

pub fn check_gradients(template: &GSoGTemplate, seed: u64, settings: &CheckSettings) -> Result<CheckReport> {
    check_gradients_with(template, seed, settings, &analytic_gradient)
}

/// Compares `gradient` against central differences on random configurations
/// of `template`, and the closed-form pair similarity against quadrature on
/// random Gaussian pairs.
pub fn check_gradients_with(
    template: &GSoGTemplate,
    seed: u64,
    settings: &CheckSettings,
    gradient: &GradientFn,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gmax, mut gworst) = (0.0f64, 0);
    for case in 0..settings.gradient_cases {
        let (pose, data) = random_configuration(template, &mut rng)?;
        let objective = Objective::new(template, &data, &pose)?;
        let (_, analytic) = gradient(&objective, &pose)?;
        let numeric = finite_difference(
            |x| objective.value(&Pose::from_slice(x)?),
            &pose.to_vec(),
            settings.step,
        )?;
        let err = max_relative_error(&analytic, &numeric, settings.absolute_floor);
        if !(err <= gmax) {
            gmax = err;
            gworst = case;
        }
    }
    let (mut qmax, mut qworst) = (0.0f64, 0);
    for case in 0..settings.quadrature_cases {
        let (gi, gj) = random_pair(&mut rng)?;
        let closed = pair_similarity(&gi, &gj)?.value;
        let quad = overlap_by_quadrature(&gi, &gj, settings.quadrature_tolerance * 1e-2);
        let err = (closed - quad).abs() / quad.abs();
        if !(err <= qmax) {
            qmax = err;
            qworst = case;
        }
    }
    Ok(CheckReport {
        seed,
        settings: *settings,
        gradient_max_error: gmax,
        gradient_worst_case: gworst,
        quadrature_max_error: qmax,
        quadrature_worst_case: qworst,
        passed: gmax <= settings.gradient_tolerance && qmax <= settings.quadrature_tolerance,
    })
}

/// Random anisotropic/isotropic pair with appreciable overlap.
pub fn random_pair<R: Rng + ?Sized>(rng: &mut R) -> Result<(AnisotropicGaussian, IsotropicGaussian)> {
    let p = random_precision(rng, 0.03, 0.3);
    let mu_i = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    let gi = AnisotropicGaussian::with_weight(mu_i, p, rng.random_range(0.5..2.0))?;
    let mu_j = mu_i + Vector3::from_fn(|_, _| rng.random_range(-0.25..0.25));
    let gj = IsotropicGaussian::with_weight(mu_j, rng.random_range(0.001..0.05), rng.random_range(0.5..2.0))?;
    Ok((gi, gj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{AnisotropicGaussian, Precision};
    use crate::kinematics::{Attachment, Joint, Skeleton};

    #[test]
    fn integrates_polynomials_and_gaussians() {
        let v = integrate(|x| x.powi(6), -1.0, 2.0, 0.0, 1e-14, 100);
        assert!((v - (128.0 + 1.0) / 7.0).abs() < 1e-12);
        let v = integrate(|x| (-0.5 * x * x).exp(), -12.0, 12.0, 0.0, 1e-14, 200);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-13);
        // peak 20 widths across, as in the overlap boxes
        let v = integrate(
            |x| (-0.5 * ((x - 3.3) / 0.5).powi(2)).exp(),
            -6.7,
            13.3,
            0.0,
            1e-12,
            400,
        );
        assert!((v / (0.5 * (2.0 * std::f64::consts::PI).sqrt()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn box_volume_of_gaussian() {
        let s = Vector3::new(0.1, 0.2, 0.05);
        let f = |x: &Vector3<f64>| (-0.5 * (x.component_div(&s)).norm_squared()).exp();
        let v = integrate_box(f, &(-s * 10.0), &(s * 10.0), 1e-10);
        let exact = (2.0 * std::f64::consts::PI).powf(1.5) * s.x * s.y * s.z;
        assert!((v / exact - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quadrature_overlap_of_distant_pair_is_zero() {
        let gi = AnisotropicGaussian::new(Vector3::zeros(), Precision::isotropic(0.01).unwrap()).unwrap();
        let gj = IsotropicGaussian::new(Vector3::new(50.0, 0.0, 0.0), 0.01).unwrap();
        assert_eq!(overlap_by_quadrature(&gi, &gj, 1e-8), 0.0);
    }

    fn small_template() -> GSoGTemplate {
        let skel = Skeleton::new(vec![
            Joint::root(Vector3::zeros()),
            Joint::child(0, Vector3::new(0.0, 0.3, 0.0)),
            Joint::child(1, Vector3::new(0.0, 0.3, 0.0)),
        ])
        .unwrap();
        let p = Precision::from_axes(&Vector3::new(0.05, 0.15, 0.05), &UnitQuaternion::identity()).unwrap();
        let attachments = (0..3)
            .map(|j| Attachment {
                joint: j,
                gaussian: AnisotropicGaussian::new(Vector3::new(0.0, 0.15, 0.0), p).unwrap(),
            })
            .collect();
        GSoGTemplate::new(skel, attachments).unwrap()
    }

    #[test]
    fn harness_passes_and_is_deterministic() {
        let t = small_template();
        let s = CheckSettings {
            gradient_cases: 10,
            quadrature_cases: 3,
            ..Default::default()
        };
        let a = check_gradients(&t, 5, &s).unwrap();
        assert!(a.passed, "{a:?}");
        assert_eq!(a, check_gradients(&t, 5, &s).unwrap());
    }

    #[test]
    fn harness_detects_corrupted_gradient() {
        let t = small_template();
        let s = CheckSettings {
            gradient_cases: 3,
            quadrature_cases: 0,
            ..Default::default()
        };
        let corrupted = |o: &Objective, p: &Pose| -> Result<(f64, Vec<f64>)> {
            let (e, mut g) = analytic_gradient(o, p)?;
            let m = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            g[0] += 1e-3 * m;
            Ok((e, g))
        };
        let r = check_gradients_with(&t, 5, &s, &corrupted).unwrap();
        assert!(!r.passed);
    }
}
