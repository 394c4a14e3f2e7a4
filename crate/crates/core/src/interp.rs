//! Scalar interpolation profiles and their exact derivatives.
//!
//! A kernel element spreads its weight over the integer grid through a
//! one-dimensional profile evaluated per axis. The profile width is driven by
//! a raw standard deviation through `sigma_eff = sigma0 + |sigma_raw|`, which
//! keeps the effective width at least `sigma0` for any real `sigma_raw`.
//!
//! Three families are supported:
//!
//! * `Bilinear`: triangle of fixed unit width; `sigma_raw` is ignored and
//!   carries no gradient. Positions are expected to stay inside the grid, so
//!   this family asks for position clamping after every optimizer step.
//! * `Triangle`: `max(0, sigma_eff - |x|)` with `sigma0 = 1`.
//! * `Gauss`: `exp(-x^2 / (2 sigma_eff^2))` with `sigma0 = 0.27`.
//!
//! Derivative conventions at the non-smooth points: `sign(0) = 0`, and the
//! triangle takes subgradient 0 both at its peak `x = 0` and at the support
//! boundary `|x| = sigma_eff`.

use crate::scalar::Scalar;

pub const TRIANGLE_SIGMA0: f64 = 1.0;
pub const GAUSS_SIGMA0: f64 = 0.27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterpFamily {
    Bilinear,
    Triangle,
    Gauss,
}

impl InterpFamily {
    pub const ALL: [InterpFamily; 3] =
        [InterpFamily::Bilinear, InterpFamily::Triangle, InterpFamily::Gauss];

    pub fn name(self) -> &'static str {
        match self {
            InterpFamily::Bilinear => "bilinear",
            InterpFamily::Triangle => "triangle",
            InterpFamily::Gauss => "gauss",
        }
    }

    pub fn parse(s: &str) -> Option<InterpFamily> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bilinear" => Some(InterpFamily::Bilinear),
            "triangle" => Some(InterpFamily::Triangle),
            "gauss" | "gaussian" => Some(InterpFamily::Gauss),
            _ => None,
        }
    }
}

/// Interpolation family plus the policy knobs that ride along with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationKind {
    family: InterpFamily,
    sigma0: f64,
    clamp_positions: bool,
}

impl InterpolationKind {
    pub fn bilinear() -> Self {
        InterpolationKind {
            family: InterpFamily::Bilinear,
            sigma0: 1.0,
            clamp_positions: true,
        }
    }

    pub fn triangle() -> Self {
        InterpolationKind {
            family: InterpFamily::Triangle,
            sigma0: TRIANGLE_SIGMA0,
            clamp_positions: false,
        }
    }

    pub fn gauss() -> Self {
        InterpolationKind {
            family: InterpFamily::Gauss,
            sigma0: GAUSS_SIGMA0,
            clamp_positions: false,
        }
    }

    pub fn of(family: InterpFamily) -> Self {
        match family {
            InterpFamily::Bilinear => Self::bilinear(),
            InterpFamily::Triangle => Self::triangle(),
            InterpFamily::Gauss => Self::gauss(),
        }
    }

    #[inline]
    pub fn family(&self) -> InterpFamily {
        self.family
    }

    #[inline]
    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// Whether positions must be clamped into the grid after optimizer steps.
    #[inline]
    pub fn clamp_positions(&self) -> bool {
        self.clamp_positions
    }

    /// Whether `sigma_raw` receives a gradient under this family.
    #[inline]
    pub fn learns_sigma(&self) -> bool {
        self.family != InterpFamily::Bilinear
    }

    /// Profile value at offset `x` for the element's raw sigma.
    #[inline]
    pub fn eval<T: Scalar>(&self, x: T, sigma_raw: T) -> T {
        match self.family {
            // Fixed unit width; sigma_raw intentionally unused.
            InterpFamily::Bilinear => triangle_profile(x, T::zero(), T::one()),
            InterpFamily::Triangle => {
                triangle_profile(x, sigma_raw, T::from_f64_const(self.sigma0))
            }
            InterpFamily::Gauss => gauss_profile(x, sigma_raw, T::from_f64_const(self.sigma0)),
        }
    }

    /// `(d/dx, d/d sigma_raw)` of [`Self::eval`] at `(x, sigma_raw)`.
    #[inline]
    pub fn grad<T: Scalar>(&self, x: T, sigma_raw: T) -> (T, T) {
        match self.family {
            InterpFamily::Bilinear => {
                let (dx, _) = triangle_grad(x, T::zero(), T::one());
                (dx, T::zero())
            }
            InterpFamily::Triangle => triangle_grad(x, sigma_raw, T::from_f64_const(self.sigma0)),
            InterpFamily::Gauss => gauss_grad(x, sigma_raw, T::from_f64_const(self.sigma0)),
        }
    }
}

/// `sign(v)` with `sign(0) = 0`.
#[inline]
fn sign0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn triangle_profile<T: Scalar>(x: T, sigma_raw: T, sigma0: T) -> T {
    let width = sigma0 + sigma_raw.abs();
    (width - x.abs()).max(T::zero())
}

#[inline]
fn triangle_grad<T: Scalar>(x: T, sigma_raw: T, sigma0: T) -> (T, T) {
    let width = sigma0 + sigma_raw.abs();
    if width - x.abs() <= T::zero() {
        // Outside the support, including the boundary kink.
        return (T::zero(), T::zero());
    }
    // Inside: d/dx = -sign(x) (0 at the peak), d/dsigma = sign(sigma_raw).
    (-sign0(x), sign0(sigma_raw))
}

#[inline]
fn gauss_profile<T: Scalar>(x: T, sigma_raw: T, sigma0: T) -> T {
    let width = sigma0 + sigma_raw.abs();
    let two = T::from_f64_const(2.0);
    (-(x * x) / (two * width * width)).exp()
}

#[inline]
fn gauss_grad<T: Scalar>(x: T, sigma_raw: T, sigma0: T) -> (T, T) {
    let width = sigma0 + sigma_raw.abs();
    let two = T::from_f64_const(2.0);
    let f = (-(x * x) / (two * width * width)).exp();
    let dx = f * (-x / (width * width));
    let dwidth = f * (x * x) / (width * width * width);
    (dx, dwidth * sign0(sigma_raw))
}

/// Triangle profile with `sigma0 = 1`.
pub fn triangle_eval<T: Scalar>(x: T, sigma_raw: T) -> T {
    triangle_profile(x, sigma_raw, T::from_f64_const(TRIANGLE_SIGMA0))
}

/// Gaussian profile with `sigma0 = 0.27`.
pub fn gauss_eval<T: Scalar>(x: T, sigma_raw: T) -> T {
    gauss_profile(x, sigma_raw, T::from_f64_const(GAUSS_SIGMA0))
}

/// `(d/dx, d/d sigma_raw)` for the given kind.
pub fn interp_grad<T: Scalar>(kind: &InterpolationKind, x: T, sigma_raw: T) -> (T, T) {
    kind.grad(x, sigma_raw)
}
