//! Un-normalized isotropic and anisotropic 3D Gaussians and their mixtures.
//!
//! An isotropic Gaussian is `w * exp(-|x - mu|^2 / (2 var))`. An anisotropic
//! Gaussian replaces the scalar variance with a symmetric positive-definite
//! precision matrix `P`: `w * exp(-0.5 (x - mu)^T P (x - mu))`. Neither carries
//! the probability normalization constant.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{GsogError, Result};

/// Symmetric 3x3 matrix stored as its six unique entries
/// `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat3(pub [f64; 6]);

impl SymMat3 {
    pub fn identity() -> Self {
        SymMat3([1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    }

    pub fn scaled_identity(s: f64) -> Self {
        SymMat3([s, 0.0, 0.0, s, 0.0, s])
    }

    /// Takes the upper triangle of `m`. The lower triangle is ignored.
    pub fn from_upper(m: &Matrix3<f64>) -> Self {
        SymMat3([m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]])
    }

    /// Averages `m` with its transpose.
    pub fn symmetrize(m: &Matrix3<f64>) -> Self {
        SymMat3([
            m[(0, 0)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            m[(1, 1)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            m[(2, 2)],
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn mul_vec(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Vector3::new(
            xx * v.x + xy * v.y + xz * v.z,
            xy * v.x + yy * v.y + yz * v.z,
            xz * v.x + yz * v.y + zz * v.z,
        )
    }

    pub fn quadratic_form(&self, v: &Vector3<f64>) -> f64 {
        v.dot(&self.mul_vec(v))
    }

    pub fn add_diagonal(&self, s: f64) -> Self {
        let mut e = self.0;
        e[0] += s;
        e[3] += s;
        e[5] += s;
        SymMat3(e)
    }

    /// `R * self * R^T`, re-symmetrized to remove rounding asymmetry.
    pub fn conjugate(&self, rotation: &Matrix3<f64>) -> Self {
        SymMat3::symmetrize(&(rotation * self.to_matrix() * rotation.transpose()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn cholesky(&self) -> Option<Cholesky3> {
        Cholesky3::new(self)
    }
}

/// Upper-triangular factor `U` with `A = U^T U` for a 3x3 SPD matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cholesky3 {
    pub u11: f64,
    pub u12: f64,
    pub u13: f64,
    pub u22: f64,
    pub u23: f64,
    pub u33: f64,
}

impl Cholesky3 {
    pub fn new(a: &SymMat3) -> Option<Self> {
        let [a11, a12, a13, a22, a23, a33] = a.0;
        if !(a11 > 0.0) {
            return None;
        }
        let u11 = a11.sqrt();
        let u12 = a12 / u11;
        let u13 = a13 / u11;
        let d2 = a22 - u12 * u12;
        if !(d2 > 0.0) {
            return None;
        }
        let u22 = d2.sqrt();
        let u23 = (a23 - u12 * u13) / u22;
        let d3 = a33 - u13 * u13 - u23 * u23;
        if !(d3 > 0.0) || !d3.is_finite() {
            return None;
        }
        Some(Cholesky3 {
            u11,
            u12,
            u13,
            u22,
            u23,
            u33: d3.sqrt(),
        })
    }

    /// Product of the diagonal, equal to `sqrt(det A)`.
    pub fn sqrt_det(&self) -> f64 {
        self.u11 * self.u22 * self.u33
    }

    /// Solves `U^T w = b` (forward substitution).
    pub fn solve_lower(&self, b: &Vector3<f64>) -> Vector3<f64> {
        let w1 = b.x / self.u11;
        let w2 = (b.y - self.u12 * w1) / self.u22;
        let w3 = (b.z - self.u13 * w1 - self.u23 * w2) / self.u33;
        Vector3::new(w1, w2, w3)
    }

    /// Solves `U z = w` (back substitution).
    pub fn solve_upper(&self, w: &Vector3<f64>) -> Vector3<f64> {
        let z3 = w.z / self.u33;
        let z2 = (w.y - self.u23 * z3) / self.u22;
        let z1 = (w.x - self.u12 * z2 - self.u13 * z3) / self.u11;
        Vector3::new(z1, z2, z3)
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &Vector3<f64>) -> Vector3<f64> {
        self.solve_upper(&self.solve_lower(b))
    }
}

/// Symmetric positive-definite precision (inverse covariance) matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precision(SymMat3);

impl Precision {
    pub fn new(m: SymMat3) -> Result<Self> {
        if !m.is_finite() {
            return Err(GsogError::NonFinite("precision"));
        }
        m.cholesky().ok_or(GsogError::NotPositiveDefinite)?;
        Ok(Precision(m))
    }

    /// Builds a precision from a full matrix. The matrix must be symmetric up
    /// to a small relative tolerance; the upper triangle is kept.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if (m - m.transpose()).amax() > 1e-9 * scale {
            return Err(GsogError::InvalidArgument("precision matrix is not symmetric".into()));
        }
        Precision::new(SymMat3::from_upper(m))
    }

    pub fn isotropic(variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(GsogError::NonPositiveVariance(variance));
        }
        Ok(Precision(SymMat3::scaled_identity(1.0 / variance)))
    }

    /// Precision of an ellipsoidal Gaussian with standard deviations
    /// `std_devs` along the axes of `orientation`.
    pub fn from_axes(std_devs: &Vector3<f64>, orientation: &UnitQuaternion<f64>) -> Result<Self> {
        if std_devs.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(GsogError::InvalidArgument(format!(
                "semi-axes must be positive, got {:?}",
                std_devs.as_slice()
            )));
        }
        let r = orientation.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&std_devs.map(|s| 1.0 / (s * s)));
        Precision::new(SymMat3::symmetrize(&(r * d * r.transpose())))
    }

    pub fn entries(&self) -> &SymMat3 {
        &self.0
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.0.to_matrix()
    }

    /// Rotates the ellipsoid: `R P R^T`. SPD is preserved by rotation.
    pub fn rotated(&self, rotation: &Matrix3<f64>) -> Self {
        Precision(self.0.conjugate(rotation))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.to_matrix().symmetric_eigenvalues().min()
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if weight > 0.0 && weight.is_finite() {
        Ok(())
    } else {
        Err(GsogError::NonPositiveWeight(weight))
    }
}

fn check_mean(mean: &Vector3<f64>) -> Result<()> {
    if mean.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GsogError::NonFinite("mean"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicGaussian {
    mean: Vector3<f64>,
    variance: f64,
    weight: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vector3<f64>, variance: f64) -> Result<Self> {
        Self::with_weight(mean, variance, 1.0)
    }

    pub fn with_weight(mean: Vector3<f64>, variance: f64, weight: f64) -> Result<Self> {
        check_mean(&mean)?;
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(GsogError::NonPositiveVariance(variance));
        }
        check_weight(weight)?;
        Ok(IsotropicGaussian { mean, variance, weight })
    }

    pub fn mean(&self) -> &Vector3<f64> {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        self.weight * (-(x - self.mean).norm_squared() / (2.0 * self.variance)).exp()
    }

    /// Same density expressed with a scalar precision matrix.
    pub fn to_anisotropic(&self) -> AnisotropicGaussian {
        AnisotropicGaussian {
            mean: self.mean,
            precision: Precision(SymMat3::scaled_identity(1.0 / self.variance)),
            weight: self.weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisotropicGaussian {
    mean: Vector3<f64>,
    precision: Precision,
    weight: f64,
}

impl AnisotropicGaussian {
    pub fn new(mean: Vector3<f64>, precision: Precision) -> Result<Self> {
        Self::with_weight(mean, precision, 1.0)
    }

    pub fn with_weight(mean: Vector3<f64>, precision: Precision, weight: f64) -> Result<Self> {
        check_mean(&mean)?;
        check_weight(weight)?;
        Ok(AnisotropicGaussian {
            mean,
            precision,
            weight,
        })
    }

    pub fn mean(&self) -> &Vector3<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.mean;
        self.weight * (-0.5 * self.precision.0.quadratic_form(&d)).exp()
    }

    /// Applies a rigid motion `x -> R x + t` to the density.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        AnisotropicGaussian {
            mean: rotation * self.mean + translation,
            precision: self.precision.rotated(rotation),
            weight: self.weight,
        }
    }

    pub(crate) fn with_mean_and_precision(&self, mean: Vector3<f64>, precision: Precision) -> Self {
        AnisotropicGaussian {
            mean,
            precision,
            weight: self.weight,
        }
    }
}

/// Sum of isotropic Gaussians, the observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct SoG {
    components: Vec<IsotropicGaussian>,
}

impl SoG {
    pub fn new(components: Vec<IsotropicGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(GsogError::EmptyMixture);
        }
        Ok(SoG { components })
    }

    pub fn components(&self) -> &[IsotropicGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        self.components.iter().map(|g| g.eval(x)).sum()
    }
}

/// Sum of anisotropic Gaussians, the shape template.
#[derive(Debug, Clone, PartialEq)]
pub struct GSoG {
    components: Vec<AnisotropicGaussian>,
}

impl GSoG {
    pub fn new(components: Vec<AnisotropicGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(GsogError::EmptyMixture);
        }
        Ok(GSoG { components })
    }

    pub fn components(&self) -> &[AnisotropicGaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn eval(&self, x: &Vector3<f64>) -> f64 {
        self.components.iter().map(|g| g.eval(x)).sum()
    }
}

impl From<&SoG> for GSoG {
    fn from(sog: &SoG) -> Self {
        GSoG {
            components: sog.components.iter().map(|g| g.to_anisotropic()).collect(),
        }
    }
}

pub fn eval_isotropic(g: &IsotropicGaussian, x: &Vector3<f64>) -> f64 {
    g.eval(x)
}

pub fn eval_anisotropic(g: &AnisotropicGaussian, x: &Vector3<f64>) -> f64 {
    g.eval(x)
}

pub fn isotropic_to_anisotropic(g: &IsotropicGaussian) -> AnisotropicGaussian {
    g.to_anisotropic()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(Vector3::from(axis)), angle)
            .to_rotation_matrix()
            .into_inner()
    }

    fn spd() -> Precision {
        Precision::new(SymMat3([4.0, 1.0, 0.5, 3.0, -0.7, 2.5])).unwrap()
    }

    #[test]
    fn isotropic_at_mean_is_weight() {
        let g = IsotropicGaussian::new(Vector3::new(0.3, -0.2, 1.1), 0.04).unwrap();
        assert_eq!(g.eval(&Vector3::new(0.3, -0.2, 1.1)), 1.0);
        let g = IsotropicGaussian::with_weight(Vector3::zeros(), 2.0, 3.5).unwrap();
        assert_eq!(g.eval(&Vector3::zeros()), 3.5);
    }

    #[test]
    fn isotropic_unit_step() {
        let g = IsotropicGaussian::new(Vector3::zeros(), 1.0).unwrap();
        assert_relative_eq!(
            g.eval(&Vector3::new(1.0, 0.0, 0.0)),
            0.606_530_659_712_633_4,
            max_relative = 1e-15
        );
    }

    #[test]
    fn isotropic_literal_formula() {
        // exp(-(0.05^2) / 0.08) = exp(-0.03125)
        let g = IsotropicGaussian::new(Vector3::new(0.3, -0.2, 1.1), 0.04).unwrap();
        let v = g.eval(&Vector3::new(0.35, -0.2, 1.1));
        assert_relative_eq!(v, 0.969_233_234_476_344, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            IsotropicGaussian::new(Vector3::zeros(), 0.0),
            Err(GsogError::NonPositiveVariance(_))
        ));
        assert!(matches!(
            IsotropicGaussian::with_weight(Vector3::zeros(), 1.0, -1.0),
            Err(GsogError::NonPositiveWeight(_))
        ));
        assert!(matches!(
            Precision::new(SymMat3([1.0, 2.0, 0.0, 1.0, 0.0, 1.0])),
            Err(GsogError::NotPositiveDefinite)
        ));
        assert!(matches!(
            Precision::new(SymMat3([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])),
            Err(GsogError::NotPositiveDefinite)
        ));
        assert!(Precision::new(SymMat3([f64::NAN, 0.0, 0.0, 1.0, 0.0, 1.0])).is_err());
        assert!(matches!(SoG::new(vec![]), Err(GsogError::EmptyMixture)));
        assert!(matches!(GSoG::new(vec![]), Err(GsogError::EmptyMixture)));
        let asym = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Precision::from_matrix(&asym).is_err());
    }

    #[test]
    fn scalar_precision_matches_isotropic() {
        let iso = IsotropicGaussian::new(Vector3::new(1.0, 2.0, 3.0), 0.25).unwrap();
        let aniso = iso.to_anisotropic();
        assert_eq!(aniso.precision().to_matrix(), Matrix3::identity() * 4.0);
        let unit = IsotropicGaussian::new(Vector3::zeros(), 1.0).unwrap();
        assert_eq!(unit.to_anisotropic().precision().to_matrix(), Matrix3::identity());
    }

    #[test]
    fn anisotropic_quadratic_form_expansion() {
        let p = spd();
        let mu = Vector3::new(0.1, -0.4, 0.2);
        let g = AnisotropicGaussian::new(mu, p).unwrap();
        let x = Vector3::new(0.5, 0.3, -0.6);
        let (dx, dy, dz) = (x.x - mu.x, x.y - mu.y, x.z - mu.z);
        let [c11, c12, c13, c22, c23, c33] = p.entries().0;
        let q = c11 * dx * dx
            + 2.0 * c12 * dx * dy
            + 2.0 * c13 * dx * dz
            + c22 * dy * dy
            + 2.0 * c23 * dy * dz
            + c33 * dz * dz;
        assert_relative_eq!(g.eval(&x), (-0.5 * q).exp(), max_relative = 1e-14);
        assert_eq!(g.eval(&mu), 1.0);
    }

    #[test]
    fn mixture_sums_components() {
        let g = IsotropicGaussian::new(Vector3::new(0.0, 1.0, 0.0), 0.5).unwrap();
        let x = Vector3::new(0.2, 0.4, -0.1);
        assert_eq!(SoG::new(vec![g]).unwrap().eval(&x), g.eval(&x));
        assert_eq!(SoG::new(vec![g, g]).unwrap().eval(&x), 2.0 * g.eval(&x));
        let a = AnisotropicGaussian::new(Vector3::zeros(), spd()).unwrap();
        assert_eq!(GSoG::new(vec![a, a]).unwrap().eval(&x), 2.0 * a.eval(&x));
    }

    #[test]
    fn from_axes_builds_ellipsoid() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let p = Precision::from_axes(&Vector3::new(2.0, 1.0, 0.5), &q).unwrap();
        // the x semi-axis is now along y
        let m = p.to_matrix();
        assert_relative_eq!(m[(1, 1)], 0.25, epsilon = 1e-14);
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(m[(2, 2)], 4.0, epsilon = 1e-14);
        assert!(Precision::from_axes(&Vector3::new(1.0, 0.0, 1.0), &q).is_err());
    }

    #[test]
    fn cholesky_solves() {
        let p = spd();
        let c = p.entries().cholesky().unwrap();
        let b = Vector3::new(1.0, -2.0, 0.5);
        let x = c.solve(&b);
        assert_relative_eq!(p.to_matrix() * x, b, epsilon = 1e-13);
        assert_relative_eq!(c.sqrt_det().powi(2), p.to_matrix().determinant(), max_relative = 1e-13);
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn arb_precision() -> impl Strategy<Value = Precision> {
        (arb_vec(1.0), 0.2f64..3.0, 0.2f64..3.0, 0.2f64..3.0, 0.0f64..3.0).prop_map(|(axis, s1, s2, s3, angle)| {
            let axis = if axis.norm() < 1e-3 { Vector3::x() } else { axis };
            let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            Precision::from_axes(&Vector3::new(s1, s2, s3), &q).unwrap()
        })
    }

    proptest! {
        #[test]
        fn density_bounded_by_weight(p in arb_precision(), mu in arb_vec(2.0), x in arb_vec(2.0), w in 0.1f64..5.0) {
            let g = AnisotropicGaussian::with_weight(mu, p, w).unwrap();
            let v = g.eval(&x);
            prop_assert!(v > 0.0);
            prop_assert!(v <= w);
        }

        #[test]
        fn rotation_consistency(p in arb_precision(), mu in arb_vec(2.0), x in arb_vec(2.0),
                                axis in arb_vec(1.0), angle in -3.0f64..3.0) {
            let axis = if axis.norm() < 1e-3 { [0.0, 0.0, 1.0] } else { [axis.x, axis.y, axis.z] };
            let r = rotation(axis, angle);
            let g = AnisotropicGaussian::new(mu, p).unwrap();
            let rg = g.transformed(&r, &Vector3::zeros());
            let a = g.eval(&x);
            let b = rg.eval(&(r * x));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300);
        }

        #[test]
        fn isotropic_embedding_agrees(mu in arb_vec(2.0), x in arb_vec(3.0), var in 0.05f64..4.0) {
            let g = IsotropicGaussian::new(mu, var).unwrap();
            let a = g.eval(&x);
            let b = g.to_anisotropic().eval(&x);
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }
}
