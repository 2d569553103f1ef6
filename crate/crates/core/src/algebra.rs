//! Real, complex and quaternion arithmetic used by every model variant.
//!
//! Elements of ℝ, ℂ and ℍ are carried as [`ModuleElement`]s. The field norm
//! is the squared modulus throughout (`N(r) = r²`, `N(a+bi) = a²+b²`,
//! `N(a+bi+cj+dk) = a²+b²+c²+d²`), so the same formulas hold along the chain
//! ℝ ⊂ ℂ ⊂ ℍ.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use thiserror::Error;

/// Complex numbers are the standard `num-complex` type.
pub type ComplexNumber = Complex64;

/// Norms at or below this are treated as zero by [`normalize`].
pub const DEGENERATE_NORM: f64 = 1e-24;

/// Tolerance on `|N(g) - 1|` for an element to count as a unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Below this rotation angle [`exp_map`] switches to its first-order limit.
pub const EXP_MAP_SMALL_ANGLE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("cannot normalize an element with field norm {0:e}")]
    DegenerateElement(f64),
    #[error("element kinds differ: {0} vs {1}")]
    TagMismatch(ElementKind, ElementKind),
    #[error("norm of an empty tuple")]
    EmptyTuple,
    #[error("norm exponent must be a positive integer, got {0}")]
    InvalidExponent(u32),
    #[error("group element is not a unit (field norm {0})")]
    NotUnit(f64),
    #[error("GL(1) scaling by zero")]
    ZeroScaling,
}

/// A quaternion `a + b·i + c·j + d·k`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Quaternion {
    pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Quaternion { a, b, c, d }
    }

    pub const fn from_real(r: f64) -> Self {
        Quaternion::new(r, 0.0, 0.0, 0.0)
    }

    pub fn from_complex(z: ComplexNumber) -> Self {
        Quaternion::new(z.re, z.im, 0.0, 0.0)
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Quaternion::new(x[0], x[1], x[2], x[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn conj(self) -> Self {
        quat_conj(self)
    }

    /// `a² + b² + c² + d²`.
    pub fn norm_sqr(self) -> f64 {
        self.dot(self)
    }

    /// Real-coordinate dot product.
    pub fn dot(self, other: Quaternion) -> f64 {
        self.a * other.a + self.b * other.b + self.c * other.c + self.d * other.d
    }

    pub fn scale(self, s: f64) -> Self {
        Quaternion::new(self.a * s, self.b * s, self.c * s, self.d * s)
    }

    pub fn is_finite(self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite() && self.d.is_finite()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        quat_mul(self, rhs)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;

    fn add(self, rhs: Quaternion) -> Quaternion {
        Quaternion::new(self.a + rhs.a, self.b + rhs.b, self.c + rhs.c, self.d + rhs.d)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;

    fn sub(self, rhs: Quaternion) -> Quaternion {
        Quaternion::new(self.a - rhs.a, self.b - rhs.b, self.c - rhs.c, self.d - rhs.d)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.a, -self.b, -self.c, -self.d)
    }
}

/// Hamilton product `p ⊗ q`.
pub fn quat_mul(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion {
        a: p.a * q.a - p.b * q.b - p.c * q.c - p.d * q.d,
        b: p.a * q.b + p.b * q.a + p.c * q.d - p.d * q.c,
        c: p.a * q.c - p.b * q.d + p.c * q.a + p.d * q.b,
        d: p.a * q.d + p.b * q.c - p.c * q.b + p.d * q.a,
    }
}

pub fn quat_conj(q: Quaternion) -> Quaternion {
    Quaternion::new(q.a, -q.b, -q.c, -q.d)
}

/// A quaternion with field norm 1. Only constructible through
/// [`normalize`], [`exp_map`] or [`UnitQuaternion::try_from_quaternion`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion(Quaternion);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion(Quaternion::ONE);

    /// Accepts `q` as-is when it is already unit within [`UNIT_TOLERANCE`].
    pub fn try_from_quaternion(q: Quaternion) -> Result<Self, AlgebraError> {
        let n = q.norm_sqr();
        if (n - 1.0).abs() <= UNIT_TOLERANCE {
            Ok(UnitQuaternion(q))
        } else {
            Err(AlgebraError::NotUnit(n))
        }
    }

    pub fn quaternion(self) -> Quaternion {
        self.0
    }

    pub fn inverse(self) -> Self {
        UnitQuaternion(self.0.conj())
    }
}

impl From<UnitQuaternion> for Quaternion {
    fn from(u: UnitQuaternion) -> Quaternion {
        u.0
    }
}

/// `q / sqrt(N(q))`.
pub fn normalize(q: Quaternion) -> Result<UnitQuaternion, AlgebraError> {
    let n = q.norm_sqr();
    if n.is_nan() || n <= DEGENERATE_NORM {
        return Err(AlgebraError::DegenerateElement(n));
    }
    Ok(UnitQuaternion(q.scale(1.0 / n.sqrt())))
}

/// Maps a rotation vector `ω` to `(cos|ω|, sin|ω| · ω/|ω|)`.
pub fn exp_map(omega: [f64; 3]) -> UnitQuaternion {
    let theta = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    if theta < EXP_MAP_SMALL_ANGLE {
        let q = Quaternion::new(1.0, omega[0], omega[1], omega[2]);
        // |ω| < 1e-12 keeps the norm at 1 + O(1e-24), never degenerate.
        return UnitQuaternion(q.scale(1.0 / q.norm_sqr().sqrt()));
    }
    let s = theta.sin() / theta;
    UnitQuaternion(Quaternion::new(theta.cos(), s * omega[0], s * omega[1], s * omega[2]))
}

/// Backpropagates an upstream gradient on `exp_map(ω)` to `ω`.
pub(crate) fn exp_map_vjp(omega: [f64; 3], upstream: Quaternion) -> [f64; 3] {
    let theta2 = omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2];
    let theta = theta2.sqrt();
    // q = (cos θ, s(θ) ω) with s = sin θ / θ.
    // ∂q₀/∂ωᵢ = -s ωᵢ, ∂qⱼ/∂ωᵢ = δᵢⱼ s + ωᵢ ωⱼ c3, c3 = (θ cos θ - sin θ) / θ³.
    let (s, c3) = if theta < 1e-3 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            -1.0 / 3.0 + theta2 / 30.0 - theta2 * theta2 / 840.0,
        )
    } else {
        let (sin, cos) = theta.sin_cos();
        (sin / theta, (theta * cos - sin) / (theta2 * theta))
    };
    let v = [upstream.b, upstream.c, upstream.d];
    let w_dot_v = omega[0] * v[0] + omega[1] * v[1] + omega[2] * v[2];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = -s * omega[i] * upstream.a + s * v[i] + c3 * omega[i] * w_dot_v;
    }
    out
}

/// `(cos θ, sin θ)` as a unit complex number embedded in ℍ.
pub(crate) fn phase(theta: f64) -> Quaternion {
    let (s, c) = theta.sin_cos();
    Quaternion::new(c, s, 0.0, 0.0)
}

pub(crate) fn phase_vjp(theta: f64, upstream: Quaternion) -> f64 {
    let (s, c) = theta.sin_cos();
    -s * upstream.a + c * upstream.b
}

/// Which ring an element lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Real,
    Complex,
    Quaternion,
}

impl ElementKind {
    /// Number of real coordinates.
    pub fn width(self) -> usize {
        match self {
            ElementKind::Real => 1,
            ElementKind::Complex => 2,
            ElementKind::Quaternion => 4,
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ElementKind::Real => "real",
            ElementKind::Complex => "complex",
            ElementKind::Quaternion => "quaternion",
        })
    }
}

/// An entry of an embedding tuple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModuleElement {
    Real(f64),
    Complex(ComplexNumber),
    Quaternion(Quaternion),
}

impl ModuleElement {
    pub fn kind(&self) -> ElementKind {
        match self {
            ModuleElement::Real(_) => ElementKind::Real,
            ModuleElement::Complex(_) => ElementKind::Complex,
            ModuleElement::Quaternion(_) => ElementKind::Quaternion,
        }
    }

    /// Embeds the element into ℍ.
    pub fn to_quaternion(&self) -> Quaternion {
        match *self {
            ModuleElement::Real(r) => Quaternion::from_real(r),
            ModuleElement::Complex(z) => Quaternion::from_complex(z),
            ModuleElement::Quaternion(q) => q,
        }
    }

    /// Restricts a quaternion to the coordinates of `kind`. Coordinates
    /// outside the subring are dropped.
    pub fn from_quaternion(kind: ElementKind, q: Quaternion) -> Self {
        match kind {
            ElementKind::Real => ModuleElement::Real(q.a),
            ElementKind::Complex => ModuleElement::Complex(ComplexNumber::new(q.a, q.b)),
            ElementKind::Quaternion => ModuleElement::Quaternion(q),
        }
    }

    pub fn identity(kind: ElementKind) -> Self {
        ModuleElement::from_quaternion(kind, Quaternion::ONE)
    }

    pub fn coords(&self) -> Vec<f64> {
        let q = self.to_quaternion().to_array();
        q[..self.kind().width()].to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.to_quaternion().is_finite()
    }
}

impl From<f64> for ModuleElement {
    fn from(r: f64) -> Self {
        ModuleElement::Real(r)
    }
}

impl From<ComplexNumber> for ModuleElement {
    fn from(z: ComplexNumber) -> Self {
        ModuleElement::Complex(z)
    }
}

impl From<Quaternion> for ModuleElement {
    fn from(q: Quaternion) -> Self {
        ModuleElement::Quaternion(q)
    }
}

impl From<UnitQuaternion> for ModuleElement {
    fn from(q: UnitQuaternion) -> Self {
        ModuleElement::Quaternion(q.quaternion())
    }
}

/// Field norm over ℝ: the squared modulus.
pub fn field_norm(x: &ModuleElement) -> f64 {
    match *x {
        ModuleElement::Real(r) => r * r,
        ModuleElement::Complex(z) => z.norm_sqr(),
        ModuleElement::Quaternion(q) => q.norm_sqr(),
    }
}

/// Real-coordinate dot product of two elements of the same ring.
pub fn inner_product(x: &ModuleElement, y: &ModuleElement) -> Result<f64, AlgebraError> {
    match (*x, *y) {
        (ModuleElement::Real(p), ModuleElement::Real(q)) => Ok(p * q),
        (ModuleElement::Complex(p), ModuleElement::Complex(q)) => Ok(p.re * q.re + p.im * q.im),
        (ModuleElement::Quaternion(p), ModuleElement::Quaternion(q)) => Ok(p.dot(q)),
        _ => Err(AlgebraError::TagMismatch(x.kind(), y.kind())),
    }
}

/// `(Σᵢ N(xᵢ)ᵖ)^(1/p)` over a tuple of same-kind elements.
pub fn g_p_norm(xs: &[ModuleElement], p: u32) -> Result<f64, AlgebraError> {
    let first = xs.first().ok_or(AlgebraError::EmptyTuple)?;
    if p == 0 {
        return Err(AlgebraError::InvalidExponent(p));
    }
    let kind = first.kind();
    let mut sum = 0.0;
    for x in xs {
        if x.kind() != kind {
            return Err(AlgebraError::TagMismatch(kind, x.kind()));
        }
        sum += field_norm(x).powi(p as i32);
    }
    Ok(sum.powf(1.0 / p as f64))
}

fn check_unit(g: &ModuleElement) -> Result<(), AlgebraError> {
    let n = field_norm(g);
    if (n - 1.0).abs() <= UNIT_TOLERANCE {
        Ok(())
    } else {
        Err(AlgebraError::NotUnit(n))
    }
}

/// Acts on `v` by a unit element `g` of the same ring: `v · g`
/// (complex product, or Hamilton product `v ⊗ g`).
pub fn apply_rotation(v: &ModuleElement, g: &ModuleElement) -> Result<ModuleElement, AlgebraError> {
    if v.kind() != g.kind() {
        return Err(AlgebraError::TagMismatch(v.kind(), g.kind()));
    }
    check_unit(g)?;
    let out = v.to_quaternion() * g.to_quaternion();
    Ok(ModuleElement::from_quaternion(v.kind(), out))
}

/// Scales `s` by `g`: real multiplication for GL(1), `s ⊗ g` for U_ℍ(1).
pub fn apply_scaling(s: &ModuleElement, g: &ModuleElement) -> Result<ModuleElement, AlgebraError> {
    match (*s, *g) {
        (ModuleElement::Real(x), ModuleElement::Real(y)) => {
            if y == 0.0 {
                Err(AlgebraError::ZeroScaling)
            } else {
                Ok(ModuleElement::Real(x * y))
            }
        }
        (ModuleElement::Quaternion(x), ModuleElement::Quaternion(y)) => {
            check_unit(g)?;
            Ok(ModuleElement::Quaternion(x * y))
        }
        _ => Err(AlgebraError::TagMismatch(s.kind(), g.kind())),
    }
}

/// Scalar multiplication `s · v` of the module: a real scalar scales every
/// coordinate, a quaternion scalar multiplies on the left (`s ⊗ v`).
pub fn scalar_multiply(s: &ModuleElement, v: &ModuleElement) -> Result<ModuleElement, AlgebraError> {
    match (*s, v.kind()) {
        (ModuleElement::Real(r), kind) => {
            Ok(ModuleElement::from_quaternion(kind, v.to_quaternion().scale(r)))
        }
        (ModuleElement::Quaternion(q), ElementKind::Quaternion) => {
            Ok(ModuleElement::Quaternion(q * v.to_quaternion()))
        }
        _ => Err(AlgebraError::TagMismatch(s.kind(), v.kind())),
    }
}
