//! Closed-form constants and kernel evaluations for the recurrent symmetric
//! (relativistic) alpha-stable process on the line.
//!
//! The process is parameterized by the stability index `alpha`, the mass
//! `m >= 0` (zero for the standard stable case) and an intensity multiplier
//! `kappa`. Its jump mechanism is the Levy-system kernel
//!
//! ```text
//! N(x, dy) = 2 kappa C(1,-alpha) psi(m^{1/alpha} |x-y|) / |x-y|^{1+alpha} dy
//! ```
//!
//! where `C(1,-alpha) = alpha Gamma((1+alpha)/2) / (2^{1-alpha} sqrt(pi)
//! Gamma(1-alpha/2))` and `psi(r) = I(r)/I(0)` with
//! `I(r) = int_0^inf s^{(1+alpha)/2-1} exp(-s/4 - r^2/s) ds`. With the
//! default `kappa = 1` the characteristic exponent at `m = 0` is
//! `2 |u|^alpha`; every downstream consumer (form assembly, channel
//! densities, the jump simulator) uses this same kernel, which is what makes
//! the cross-pipeline identity checks meaningful.

use crate::error::{Error, Result};
use crate::interp::MonotoneCubic;
use crate::quad;
use crate::special::gamma;

/// Jump-truncation statistics at cutoff `epsilon`: the rate of jumps larger
/// than the cutoff, the variance of the discarded small jumps, and the
/// beta-moment controlling the small-jump contribution to jump-sum
/// functionals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationStats {
    pub epsilon: f64,
    /// `int_{|z| > eps} nu(z) dz`
    pub tail_rate: f64,
    /// `int_{|z| <= eps} z^2 nu(z) dz`
    pub small_jump_variance: f64,
    /// `int_{|z| <= eps} |z|^beta nu(z) dz`
    pub beta_moment: f64,
}

/// Stability/mass/intensity parameters of the driving process, plus the
/// immutable radial cache used by per-jump kernel evaluations when `m > 0`.
#[derive(Debug, Clone)]
pub struct ProcessSpec {
    alpha: f64,
    mass: f64,
    kappa: f64,
    norm_const: f64,
    /// log psi on a sinh-graded radial grid; only built for `mass > 0`.
    psi_cache: Option<MonotoneCubic>,
}

/// Upper end of the radial psi cache; beyond it the two-term Bessel
/// asymptotic is used (values there are ~1e-26 of psi(0)).
const PSI_CACHE_RMAX: f64 = 60.0;
const PSI_CACHE_NODES: usize = 6000;

impl ProcessSpec {
    /// Standard constructor with the default intensity multiplier 1, under
    /// which the jump kernel is exactly `2 C(1,-alpha) psi / r^{1+alpha}`.
    pub fn new(alpha: f64, mass: f64) -> Result<Self> {
        Self::with_intensity_multiplier(alpha, mass, 1.0)
    }

    pub fn with_intensity_multiplier(alpha: f64, mass: f64, kappa: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::InvalidSpec(format!(
                "alpha must lie in (0, 2), got {alpha}"
            )));
        }
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(Error::InvalidSpec(format!("mass must be >= 0, got {mass}")));
        }
        if mass == 0.0 && alpha < 1.0 {
            return Err(Error::InvalidSpec(format!(
                "massless process is transient for alpha < 1 (got alpha = {alpha})"
            )));
        }
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "intensity multiplier must be positive, got {kappa}"
            )));
        }
        let norm_const = normalization_constant_unchecked(alpha);
        let mut spec = Self {
            alpha,
            mass,
            kappa,
            norm_const,
            psi_cache: None,
        };
        if mass > 0.0 {
            spec.psi_cache = Some(spec.build_psi_cache()?);
        }
        Ok(spec)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn intensity_multiplier(&self) -> f64 {
        self.kappa
    }

    /// Space dimension; the whole toolkit is one-dimensional.
    pub fn dim(&self) -> usize {
        1
    }

    /// `m^{1/alpha}`, the radial scaling of the tempering function.
    pub fn mass_scale(&self) -> f64 {
        if self.mass == 0.0 {
            0.0
        } else {
            self.mass.powf(1.0 / self.alpha)
        }
    }

    /// The constant `C(1,-alpha)` from the Gamma-function expression.
    pub fn normalization_constant(&self) -> f64 {
        self.norm_const
    }

    /// `(1+alpha)/2`, the index of the tempering integral.
    fn nu(&self) -> f64 {
        0.5 * (1.0 + self.alpha)
    }

    /// `I(r) = int_0^inf s^{nu-1} e^{-s/4 - r^2/s} ds` by adaptive
    /// quadrature after the substitution `s = 4 v^{1/nu}` which removes the
    /// endpoint singularity.
    pub fn radial_integral(&self, r: f64) -> Result<f64> {
        if r < 0.0 {
            return Err(Error::Domain(format!("radial integral needs r >= 0, got {r}")));
        }
        let nu = self.nu();
        let c = 0.25 * r * r;
        // s = 4u, then u = v^p with p = 4/nu:
        // I = 4^nu p int_0^inf v^3 e^{-v^p - c v^{-p}} dv,
        // and the v^3 prefactor keeps the integrand C^3-flat at the origin.
        let p = 4.0 / nu;
        let integrand = |v: f64| {
            if v <= 0.0 {
                0.0
            } else {
                let u = v.powf(p);
                v * v * v * (-u - c / u).exp()
            }
        };
        let v_max = (45.0 + 3.0 * r).powf(nu / 4.0);
        let scale = (-r).exp() * gamma(nu) * nu; // rough magnitude of the v-integral
        let tol = (1e-12 * scale).max(1e-300);
        let integral = quad::integrate(integrand, 0.0, v_max, tol)?;
        Ok(integral * 4f64.powf(nu) * p)
    }

    /// `psi(r) = I(r)/I(0)` by adaptive quadrature: in (0, 1], equal to 1 at
    /// r = 0, monotone non-increasing.
    pub fn psi(&self, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(1.0);
        }
        let i0 = gamma(self.nu()) * 4f64.powf(self.nu());
        Ok((self.radial_integral(r)? / i0).min(1.0))
    }

    fn build_psi_cache(&self) -> Result<MonotoneCubic> {
        let n = PSI_CACHE_NODES;
        let gamma_grade = 8.0f64;
        let denom = gamma_grade.sinh();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for k in 0..n {
            let t = k as f64 / (n - 1) as f64;
            let r = PSI_CACHE_RMAX * (gamma_grade * t).sinh() / denom;
            xs.push(r);
            ys.push(self.psi(r)?.ln());
        }
        Ok(MonotoneCubic::new(xs, ys))
    }

    /// Fast psi for per-jump use: exact 1 for the massless case, cached
    /// log-psi otherwise (budgeted error 1e-8), two-term Bessel asymptotic
    /// beyond the cache range.
    pub fn psi_fast(&self, r: f64) -> f64 {
        match &self.psi_cache {
            None => 1.0,
            Some(cache) => {
                if r <= 0.0 {
                    1.0
                } else if r <= PSI_CACHE_RMAX {
                    cache.eval(r).exp()
                } else {
                    // psi(r) ~ 2 (2r)^nu sqrt(pi/(2r)) e^{-r} (1 + (4nu^2-1)/(8r)) / I(0)
                    let nu = self.nu();
                    let i0 = gamma(nu) * 4f64.powf(nu);
                    let lead = 2.0 * (2.0 * r).powf(nu) * (std::f64::consts::PI / (2.0 * r)).sqrt();
                    lead * (-r).exp() * (1.0 + (4.0 * nu * nu - 1.0) / (8.0 * r)) / i0
                }
            }
        }
    }

    /// `kappa C(1,-alpha) psi(m^{1/alpha}|x-y|) / |x-y|^{1+alpha}`;
    /// symmetric and strictly positive for x != y.
    pub fn jump_intensity(&self, x: f64, y: f64) -> Result<f64> {
        if x == y {
            return Err(Error::Domain(
                "jump intensity is singular on the diagonal".into(),
            ));
        }
        Ok(self.jump_intensity_unchecked(x, y))
    }

    #[inline]
    fn jump_intensity_unchecked(&self, x: f64, y: f64) -> f64 {
        let r = (x - y).abs();
        self.kappa * self.norm_const * self.psi_fast(self.mass_scale() * r) / r.powf(1.0 + self.alpha)
    }

    /// The Levy-system kernel density `N(x, dy)/dy = 2 * jump_intensity`.
    /// This is the jump rate of the simulated process and the kernel behind
    /// every channel density and quadratic form in the crate.
    pub fn levy_kernel(&self, x: f64, y: f64) -> Result<f64> {
        Ok(2.0 * self.jump_intensity(x, y)?)
    }

    /// Levy density `nu(z) = levy_kernel(0, z)` of the jump size, z != 0.
    #[inline]
    pub fn levy_density(&self, z: f64) -> f64 {
        debug_assert!(z != 0.0);
        2.0 * self.jump_intensity_unchecked(0.0, z)
    }

    /// Compensated kernel `R_K` steering the Kato-class window integrals.
    pub fn compensated_kernel(&self, x: f64, y: f64) -> Result<f64> {
        if x == y {
            return Err(Error::Domain("compensated kernel is singular on the diagonal".into()));
        }
        let r = (x - y).abs();
        let alpha = self.alpha;
        Ok(if alpha > 1.0 {
            // alpha > d = 1
            r.powf(alpha - 1.0)
        } else if alpha == 1.0 {
            // d = alpha = 1
            (1.0 / r).ln()
        } else {
            // d > alpha (only reachable with m > 0)
            r.powf(alpha - 1.0)
        })
    }

    /// One-sided tail rate `int_R^inf nu(z) dz`; doubles to the total rate
    /// of jumps above the cutoff.
    pub fn one_sided_tail_rate(&self, r_cut: f64) -> Result<f64> {
        if r_cut <= 0.0 {
            return Err(Error::Domain(format!("tail cutoff must be positive, got {r_cut}")));
        }
        let a = self.alpha;
        let front = 2.0 * self.kappa * self.norm_const;
        if self.mass == 0.0 {
            return Ok(front * r_cut.powf(-a) / a);
        }
        let ms = self.mass_scale();
        let z_max = r_cut.max(80.0 / ms + 10.0 * r_cut);
        let f = |z: f64| self.psi_fast(ms * z) * z.powf(-1.0 - a);
        Ok(front * quad::integrate_shells(f, r_cut, z_max, r_cut, 1e-12 * front * r_cut.powf(-a))?)
    }

    /// `int_{|z| <= eps} z^2 nu(z) dz`, the variance of the jumps below the
    /// cutoff (also the weight source of the diagonal-band correction in
    /// the form assembly).
    pub fn small_jump_variance(&self, epsilon: f64) -> Result<f64> {
        if epsilon <= 0.0 {
            return Err(Error::Domain(format!(
                "truncation cutoff must be positive, got {epsilon}"
            )));
        }
        let a = self.alpha;
        let front = 2.0 * self.kappa * self.norm_const;
        if self.mass == 0.0 {
            return Ok(2.0 * front * epsilon.powf(2.0 - a) / (2.0 - a));
        }
        let ms = self.mass_scale();
        let z0 = epsilon * 1e-12;
        let head = front * z0.powf(2.0 - a) / (2.0 - a);
        let f = |z: f64| self.psi_fast(ms * z) * z.powf(1.0 - a);
        let body = front * quad::integrate_shells(f, z0, epsilon, z0, 1e-13 * epsilon.powf(2.0 - a))?;
        Ok(2.0 * (head + body))
    }

    /// Truncation statistics of the Levy density at cutoff `epsilon`, with
    /// the beta-moment taken at exponent `beta > alpha`.
    pub fn jump_truncation_stats(&self, epsilon: f64, beta: f64) -> Result<TruncationStats> {
        if epsilon <= 0.0 {
            return Err(Error::Domain(format!(
                "truncation cutoff must be positive, got {epsilon}"
            )));
        }
        if beta <= self.alpha {
            return Err(Error::Certificate(format!(
                "beta moment needs beta > alpha ({beta} <= {})",
                self.alpha
            )));
        }
        let a = self.alpha;
        let front = 2.0 * self.kappa * self.norm_const;
        let (tail_rate, small_jump_variance, beta_moment) = if self.mass == 0.0 {
            (
                2.0 * front * epsilon.powf(-a) / a,
                self.small_jump_variance(epsilon)?,
                2.0 * front * epsilon.powf(beta - a) / (beta - a),
            )
        } else {
            let ms = self.mass_scale();
            let tail = 2.0 * self.one_sided_tail_rate(epsilon)?;
            // beta-moment on (0, eps]: start the shells just above zero and
            // bound the remainder with psi <= 1.
            let z0 = epsilon * 1e-12;
            let head = front * z0.powf(beta - a) / (beta - a);
            let f = |z: f64| self.psi_fast(ms * z) * z.powf(beta - 1.0 - a);
            let body =
                front * quad::integrate_shells(f, z0, epsilon, z0, 1e-13 * epsilon.powf(beta - a))?;
            (tail, self.small_jump_variance(epsilon)?, 2.0 * (head + body))
        };
        Ok(TruncationStats {
            epsilon,
            tail_rate,
            small_jump_variance,
            beta_moment,
        })
    }
}

fn normalization_constant_unchecked(alpha: f64) -> f64 {
    alpha * gamma(0.5 * (1.0 + alpha))
        / (2f64.powf(1.0 - alpha) * std::f64::consts::PI.sqrt() * gamma(1.0 - 0.5 * alpha))
}
