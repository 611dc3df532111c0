//! Closed-form overlap between a G-SoG template and an observed SoG.
//!
//! For an anisotropic Gaussian with mean `a` and precision `P`, and an
//! isotropic Gaussian with mean `d` and precision `m I`, the product exponent
//! is `-0.5 [(x-a)^T P (x-a) + m |x-d|^2]`. Writing `Q = P + m I` and
//! `b = P a + m d`, the exponent becomes
//! `-0.5 [x^T Q x - 2 b^T x + K]` with `K = a^T P a + m |d|^2`. Factor
//! `Q = U^T U` with `U` upper triangular and let `w = U^{-T} b`; then
//! completing the square gives
//!
//! ```text
//! E_ij = (2 pi)^{3/2} / (q11 q22 q33) * exp(-0.5 (K - L)),   L = |w|^2
//! ```
//!
//! where `q11, q22, q33` is the diagonal of `U` and `(q14, q24, q34) = w`,
//! i.e. the fourth column of the triangularized augmented matrix `[Q | b]`.

use rayon::prelude::*;

use crate::error::{GsogError, Result};
use crate::gaussian::{AnisotropicGaussian, Cholesky3, IsotropicGaussian, SoG};
use crate::kinematics::PosedModel;

/// `(2 pi)^{3/2}`
pub const TWO_PI_POW_1_5: f64 = 15.749_609_945_722_419;

/// One anisotropic-isotropic overlap term with its factorization retained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPairTerm {
    pub value: f64,
    /// Upper-triangular factor of `P + m I`; its diagonal is `(q11, q22, q33)`.
    pub factor: Cholesky3,
    /// `(q14, q24, q34)`.
    pub aux: [f64; 3],
    pub k: f64,
    pub l: f64,
}

impl GaussianPairTerm {
    pub fn q_diagonal(&self) -> [f64; 3] {
        [self.factor.u11, self.factor.u22, self.factor.u33]
    }

    /// `-0.5 (K - L)`
    pub fn exponent(&self) -> f64 {
        -0.5 * (self.k - self.l)
    }
}

/// Closed-form `E_ij`, weights included.
pub fn pair_similarity(gi: &AnisotropicGaussian, gj: &IsotropicGaussian) -> Result<GaussianPairTerm> {
    let m = 1.0 / gj.variance();
    let factor = gi
        .precision()
        .entries()
        .add_diagonal(m)
        .cholesky()
        .ok_or(GsogError::NotPositiveDefinite)?;
    Ok(pair_with_factor(gi, gj, m, factor))
}

fn pair_with_factor(gi: &AnisotropicGaussian, gj: &IsotropicGaussian, m: f64, factor: Cholesky3) -> GaussianPairTerm {
    let a = gi.mean();
    let d = gj.mean();
    let p = gi.precision().entries();
    let pa = p.mul_vec(a);
    let k = a.dot(&pa) + m * d.norm_squared();
    let b = pa + d * m;
    let w = factor.solve_lower(&b);
    let l = w.norm_squared();
    let value = gi.weight() * gj.weight() * TWO_PI_POW_1_5 / factor.sqrt_det() * (-0.5 * (k - l)).exp();
    GaussianPairTerm {
        value,
        factor,
        aux: [w.x, w.y, w.z],
        k,
        l,
    }
}

/// Evaluation options for [`model_similarity`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimilarityOptions {
    /// Sum template rows on the rayon pool.
    pub parallel: bool,
    /// Skip pairs whose exponent `-0.5 (K - L)` is below this value. Off by
    /// default; `Some(-40.0)` drops terms smaller than ~4e-18 of their peak.
    pub cutoff: Option<f64>,
    /// Keep every `E_ij` (row-major, template x data).
    pub retain_pairs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityValue {
    pub value: f64,
    /// Row-major `E_ij` when requested.
    pub pair_terms: Option<Vec<f64>>,
}

/// Iterates the pair terms of one template Gaussian against every data
/// component, reusing the factorization while the data variance is unchanged.
pub(crate) fn for_each_pair<F>(gi: &AnisotropicGaussian, data: &SoG, cutoff: Option<f64>, mut f: F) -> Result<()>
where
    F: FnMut(usize, &IsotropicGaussian, Option<&GaussianPairTerm>),
{
    let mut cached: Option<(f64, Cholesky3)> = None;
    for (j, gj) in data.components().iter().enumerate() {
        let var = gj.variance();
        let factor = match cached {
            Some((v, c)) if v == var => c,
            _ => {
                let c = gi
                    .precision()
                    .entries()
                    .add_diagonal(1.0 / var)
                    .cholesky()
                    .ok_or(GsogError::NotPositiveDefinite)?;
                cached = Some((var, c));
                c
            }
        };
        let term = pair_with_factor(gi, gj, 1.0 / var, factor);
        match cutoff {
            Some(c) if term.exponent() < c => f(j, gj, None),
            _ => f(j, gj, Some(&term)),
        }
    }
    Ok(())
}

fn row_similarity(gi: &AnisotropicGaussian, data: &SoG, options: &SimilarityOptions) -> Result<(f64, Vec<f64>)> {
    let mut sum = 0.0;
    let mut row = Vec::new();
    if options.retain_pairs {
        row.reserve(data.len());
    }
    for_each_pair(gi, data, options.cutoff, |_, _, term| {
        let v = term.map_or(0.0, |t| t.value);
        sum += v;
        if options.retain_pairs {
            row.push(v);
        }
    })?;
    Ok((sum, row))
}

/// `E = sum_i sum_j E_ij` over the posed template and the data, template-major.
pub fn model_similarity(posed: &PosedModel, data: &SoG) -> Result<SimilarityValue> {
    model_similarity_with(posed, data, &SimilarityOptions::default())
}

pub fn model_similarity_with(posed: &PosedModel, data: &SoG, options: &SimilarityOptions) -> Result<SimilarityValue> {
    let template = posed.world_gaussians.components();
    let rows: Vec<(f64, Vec<f64>)> = if options.parallel {
        template
            .par_iter()
            .map(|gi| row_similarity(gi, data, options))
            .collect::<Result<_>>()?
    } else {
        template
            .iter()
            .map(|gi| row_similarity(gi, data, options))
            .collect::<Result<_>>()?
    };
    let value = rows.iter().map(|(s, _)| s).sum();
    let pair_terms = options
        .retain_pairs
        .then(|| rows.into_iter().flat_map(|(_, r)| r).collect());
    Ok(SimilarityValue { value, pair_terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{GSoG, Precision, SymMat3};
    use crate::kinematics::RigidTransform;
    use approx::assert_relative_eq;
    use nalgebra::{UnitQuaternion, Vector3};

    fn posed(components: Vec<AnisotropicGaussian>) -> PosedModel {
        let n = components.len();
        PosedModel {
            world_gaussians: GSoG::new(components).unwrap(),
            world_transforms: vec![RigidTransform::identity()],
            owners: vec![0; n],
        }
    }

    #[test]
    fn unit_case_is_pi_to_three_halves() {
        let gi = AnisotropicGaussian::new(Vector3::new(0.3, 0.1, -0.2), Precision::isotropic(1.0).unwrap()).unwrap();
        let gj = IsotropicGaussian::new(Vector3::new(0.3, 0.1, -0.2), 1.0).unwrap();
        let t = pair_similarity(&gi, &gj).unwrap();
        assert_relative_eq!(t.value, std::f64::consts::PI.powf(1.5), max_relative = 1e-14);
        assert_relative_eq!(t.k, t.l, max_relative = 1e-14);
        let [q11, q22, q33] = t.q_diagonal();
        assert_relative_eq!(q11 * q22 * q33, 2f64.powf(1.5), max_relative = 1e-14);
    }

    #[test]
    fn constant_matches_two_pi() {
        assert_relative_eq!(
            TWO_PI_POW_1_5,
            (2.0 * std::f64::consts::PI).powf(1.5),
            max_relative = 1e-15
        );
    }

    #[test]
    fn decays_with_separation() {
        let p = Precision::new(SymMat3([3.0, 0.4, -0.2, 1.5, 0.3, 2.0])).unwrap();
        let gi = AnisotropicGaussian::new(Vector3::zeros(), p).unwrap();
        let dir = Vector3::new(0.3, -0.8, 0.5).normalize();
        let mut last = f64::INFINITY;
        for k in 0..40 {
            let gj = IsotropicGaussian::new(dir * (k as f64 * 0.25), 0.3).unwrap();
            let v = pair_similarity(&gi, &gj).unwrap().value;
            assert!(v < last && v >= 0.0);
            last = v;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn weights_multiply() {
        let p = Precision::isotropic(0.5).unwrap();
        let gi = AnisotropicGaussian::with_weight(Vector3::zeros(), p, 2.0).unwrap();
        let gj = IsotropicGaussian::with_weight(Vector3::new(0.1, 0.0, 0.0), 0.2, 3.0).unwrap();
        let unit_i = AnisotropicGaussian::new(Vector3::zeros(), p).unwrap();
        let unit_j = IsotropicGaussian::new(Vector3::new(0.1, 0.0, 0.0), 0.2).unwrap();
        let a = pair_similarity(&gi, &gj).unwrap().value;
        let b = pair_similarity(&unit_i, &unit_j).unwrap().value;
        assert_relative_eq!(a, 6.0 * b, max_relative = 1e-14);
    }

    #[test]
    fn isotropic_overlap_formula() {
        let (si, sj) = (0.3f64, 0.7f64);
        let mi = Vector3::new(0.2, -0.4, 1.0);
        let mj = Vector3::new(-0.1, 0.3, 0.6);
        let gi = AnisotropicGaussian::new(mi, Precision::isotropic(si).unwrap()).unwrap();
        let gj = IsotropicGaussian::new(mj, sj).unwrap();
        let s = si + sj;
        let expected =
            (2.0 * std::f64::consts::PI * si * sj / s).powf(1.5) * (-(mi - mj).norm_squared() / (2.0 * s)).exp();
        assert_relative_eq!(pair_similarity(&gi, &gj).unwrap().value, expected, max_relative = 1e-12);
    }

    #[test]
    fn model_sum_and_bilinearity() {
        let p = Precision::from_axes(
            &Vector3::new(0.1, 0.3, 0.05),
            &UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        )
        .unwrap();
        let template = vec![
            AnisotropicGaussian::new(Vector3::new(0.0, 0.1, 0.0), p).unwrap(),
            AnisotropicGaussian::new(Vector3::new(0.2, -0.1, 0.1), p).unwrap(),
        ];
        let data: Vec<_> = (0..5)
            .map(|k| {
                IsotropicGaussian::new(Vector3::new(0.05 * k as f64, 0.02, -0.03), 0.01 + 0.005 * k as f64).unwrap()
            })
            .collect();
        let model = posed(template.clone());
        let e = model_similarity(&model, &SoG::new(data.clone()).unwrap())
            .unwrap()
            .value;
        let mut oracle = 0.0;
        for gi in &template {
            for gj in &data {
                oracle += pair_similarity(gi, gj).unwrap().value;
            }
        }
        assert_relative_eq!(e, oracle, max_relative = 1e-14);

        let doubled: Vec<_> = data.iter().flat_map(|g| [*g, *g]).collect();
        let e2 = model_similarity(&model, &SoG::new(doubled).unwrap()).unwrap().value;
        assert_relative_eq!(e2, 2.0 * e, max_relative = 1e-14);

        let single = posed(vec![template[0]]);
        let one = SoG::new(vec![data[0]]).unwrap();
        assert_eq!(
            model_similarity(&single, &one).unwrap().value,
            pair_similarity(&template[0], &data[0]).unwrap().value
        );
    }

    #[test]
    fn retained_pairs_and_parallel_sum() {
        let p = Precision::isotropic(0.04).unwrap();
        let template: Vec<_> = (0..7)
            .map(|k| AnisotropicGaussian::new(Vector3::new(0.03 * k as f64, 0.0, 0.0), p).unwrap())
            .collect();
        let data = SoG::new(
            (0..30)
                .map(|k| IsotropicGaussian::new(Vector3::new(0.01 * k as f64, 0.02, 0.0), 0.01).unwrap())
                .collect(),
        )
        .unwrap();
        let model = posed(template);
        let seq = model_similarity_with(
            &model,
            &data,
            &SimilarityOptions {
                retain_pairs: true,
                ..Default::default()
            },
        )
        .unwrap();
        let par = model_similarity_with(
            &model,
            &data,
            &SimilarityOptions {
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        let pairs = seq.pair_terms.unwrap();
        assert_eq!(pairs.len(), 7 * 30);
        assert_relative_eq!(pairs.iter().sum::<f64>(), seq.value, max_relative = 1e-12);
        assert_relative_eq!(par.value, seq.value, max_relative = 1e-12);
    }

    #[test]
    fn cutoff_drops_only_negligible_terms() {
        let p = Precision::isotropic(0.01).unwrap();
        let model = posed(vec![AnisotropicGaussian::new(Vector3::zeros(), p).unwrap()]);
        let data = SoG::new(vec![
            IsotropicGaussian::new(Vector3::new(0.05, 0.0, 0.0), 0.01).unwrap(),
            IsotropicGaussian::new(Vector3::new(5.0, 0.0, 0.0), 0.01).unwrap(),
        ])
        .unwrap();
        let opts = SimilarityOptions {
            cutoff: Some(-40.0),
            retain_pairs: true,
            ..Default::default()
        };
        let cut = model_similarity_with(&model, &data, &opts).unwrap();
        let full = model_similarity(&model, &data).unwrap();
        assert_eq!(cut.pair_terms.unwrap()[1], 0.0);
        assert_relative_eq!(cut.value, full.value, max_relative = 1e-15);
    }
}
