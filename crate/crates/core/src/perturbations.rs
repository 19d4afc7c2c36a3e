//! Local and non-local perturbations: signed measures `mu = mu+ - mu-` with
//! bounded compactly supported densities, symmetric jump perturbations
//! `F = F+ - F-` with a diagonal decay certificate, the Li decomposition
//! `G+ = (e^{F+} - 1) e^{-F-}`, `G- = 1 - e^{-F-}`, channel densities
//! `NH(x) = int H(x,y) N(x,dy)`, Revuz densities, and Kato-class window
//! diagnostics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::ProcessSpec;
use crate::quad;

/// Smooth compactly supported bump `h * exp(1 - 1/(1 - t^2))`,
/// `t = (x - center)/width`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

impl Bump {
    pub fn new(center: f64, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0) || !(height >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "bump needs width > 0 and height >= 0, got width {width}, height {height}"
            )));
        }
        Ok(Self { center, width, height })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.center) / self.width;
        if t.abs() >= 1.0 {
            0.0
        } else {
            self.height * (1.0 - 1.0 / (1.0 - t * t)).exp()
        }
    }

    pub fn support(&self) -> (f64, f64) {
        (self.center - self.width, self.center + self.width)
    }

    pub fn support_radius(&self) -> f64 {
        self.center.abs() + self.width
    }

    /// Numeric Lipschitz bound (dense scan; the profile is smooth).
    pub fn lipschitz(&self) -> f64 {
        let n = 2001;
        let mut lip: f64 = 0.0;
        let mut prev = self.eval(self.support().0);
        for k in 1..n {
            let x = self.support().0 + 2.0 * self.width * k as f64 / (n - 1) as f64;
            let v = self.eval(x);
            lip = lip.max(((v - prev) / (2.0 * self.width / (n - 1) as f64)).abs());
            prev = v;
        }
        1.05 * lip
    }
}

/// Signed local measure `mu = mu+ - mu-` given by sums of bumps.
#[derive(Debug, Clone, Default)]
pub struct LocalMeasure {
    plus: Vec<Bump>,
    minus: Vec<Bump>,
}

impl LocalMeasure {
    pub fn new(plus: Vec<Bump>, minus: Vec<Bump>) -> Self {
        Self { plus, minus }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn density_plus(&self, x: f64) -> f64 {
        self.plus.iter().map(|b| b.eval(x)).sum()
    }

    pub fn density_minus(&self, x: f64) -> f64 {
        self.minus.iter().map(|b| b.eval(x)).sum()
    }

    pub fn support_radius(&self) -> f64 {
        self.plus
            .iter()
            .chain(&self.minus)
            .map(Bump::support_radius)
            .fold(0.0, f64::max)
    }

    pub fn bumps_plus(&self) -> &[Bump] {
        &self.plus
    }

    pub fn bumps_minus(&self) -> &[Bump] {
        &self.minus
    }

    pub fn sup_plus(&self) -> f64 {
        self.plus.iter().map(|b| b.height).sum()
    }

    pub fn sup_minus(&self) -> f64 {
        self.minus.iter().map(|b| b.height).sum()
    }

    pub fn lipschitz(&self) -> f64 {
        self.plus.iter().chain(&self.minus).map(Bump::lipschitz).sum()
    }

    /// Scale the positive part in place (used by criticality calibration
    /// and the supercritical gauge control).
    pub fn scale_plus(&self, c: f64) -> Self {
        let plus = self
            .plus
            .iter()
            .map(|b| Bump { height: b.height * c, ..*b })
            .collect();
        Self { plus, minus: self.minus.clone() }
    }
}

/// Symmetric kernel on the plane with a diagonal decay certificate
/// `|H(x,y)| <= L |x-y|^beta` for `|x-y| <= 1` and joint compact support
/// (`H(x,y) = 0` unless both `|x|, |y| <=` the support radius).
pub trait PairKernel: Sync {
    fn eval(&self, x: f64, y: f64) -> f64;
    /// `(L, beta)` of the diagonal certificate.
    fn certificate(&self) -> (f64, f64);
    fn support_radius(&self) -> f64;
}

/// Built-in non-local perturbation family
/// `F(x,y) = a+ chi+(x) chi+(y) rho(x,y) - a- chi-(x) chi-(y) rho(x,y)`
/// with `rho = min(|x-y|, 1)^beta` and bumps `chi+`, `chi-` of disjoint
/// support, so the positive and negative parts are pointwise disjoint by
/// construction.
#[derive(Debug, Clone)]
pub struct NonlocalPerturbation {
    amp_plus: f64,
    amp_minus: f64,
    beta: f64,
    chi_plus: Bump,
    chi_minus: Bump,
}

impl NonlocalPerturbation {
    pub fn new(
        amp_plus: f64,
        amp_minus: f64,
        beta: f64,
        chi_plus: Bump,
        chi_minus: Bump,
    ) -> Result<Self> {
        if !(amp_plus >= 0.0 && amp_minus >= 0.0) {
            return Err(Error::InvalidSpec("amplitudes must be >= 0".into()));
        }
        if !(beta > 0.0) {
            return Err(Error::Certificate(format!("decay exponent must be positive, got {beta}")));
        }
        if amp_plus > 0.0 && amp_minus > 0.0 {
            let (al, ar) = chi_plus.support();
            let (bl, br) = chi_minus.support();
            if ar > bl && br > al {
                return Err(Error::InvalidSpec(
                    "positive and negative bumps must have disjoint supports".into(),
                ));
            }
        }
        Ok(Self { amp_plus, amp_minus, beta, chi_plus, chi_minus })
    }

    pub fn zero(beta: f64) -> Self {
        Self {
            amp_plus: 0.0,
            amp_minus: 0.0,
            beta,
            chi_plus: Bump { center: 0.0, width: 1.0, height: 0.0 },
            chi_minus: Bump { center: 0.0, width: 1.0, height: 0.0 },
        }
    }

    pub fn is_zero(&self) -> bool {
        self.amp_plus == 0.0 && self.amp_minus == 0.0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn amp_plus(&self) -> f64 {
        self.amp_plus
    }

    pub fn amp_minus(&self) -> f64 {
        self.amp_minus
    }

    pub fn chi_plus(&self) -> &Bump {
        &self.chi_plus
    }

    pub fn chi_minus(&self) -> &Bump {
        &self.chi_minus
    }

    fn profile(&self, x: f64, y: f64) -> f64 {
        (x - y).abs().min(1.0).powf(self.beta)
    }

    pub fn f_plus(&self, x: f64, y: f64) -> f64 {
        if self.amp_plus == 0.0 {
            return 0.0;
        }
        self.amp_plus * self.chi_plus.eval(x) * self.chi_plus.eval(y) * self.profile(x, y)
    }

    pub fn f_minus(&self, x: f64, y: f64) -> f64 {
        if self.amp_minus == 0.0 {
            return 0.0;
        }
        self.amp_minus * self.chi_minus.eval(x) * self.chi_minus.eval(y) * self.profile(x, y)
    }

    pub fn f(&self, x: f64, y: f64) -> f64 {
        self.f_plus(x, y) - self.f_minus(x, y)
    }

    /// Upper bound for `sup |F|`.
    pub fn bound(&self) -> f64 {
        let part = |amp: f64, b: &Bump| {
            amp * b.height * b.height * (2.0 * b.width).min(1.0).powf(self.beta)
        };
        part(self.amp_plus, &self.chi_plus).max(part(self.amp_minus, &self.chi_minus))
    }

    /// Diagonal certificate `(L, beta)`.
    pub fn certificate(&self) -> (f64, f64) {
        let l = (self.amp_plus * self.chi_plus.height.powi(2))
            .max(self.amp_minus * self.chi_minus.height.powi(2));
        (l, self.beta)
    }

    pub fn support_radius(&self) -> f64 {
        let mut s: f64 = 0.0;
        if self.amp_plus > 0.0 {
            s = s.max(self.chi_plus.support_radius());
        }
        if self.amp_minus > 0.0 {
            s = s.max(self.chi_minus.support_radius());
        }
        s
    }

    /// Positive part as a certified kernel.
    pub fn plus_kernel(&self) -> FPlusKernel<'_> {
        FPlusKernel(self)
    }

    pub fn minus_kernel(&self) -> FMinusKernel<'_> {
        FMinusKernel(self)
    }

    /// Spot check of the certificate on random near-diagonal pairs.
    pub fn verify_certificate(&self, samples: usize, seed: u64) -> bool {
        use rand::{Rng, SeedableRng};
        let (l, beta) = self.certificate();
        let s = self.support_radius().max(1.0);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let x = rng.random_range(-s..s);
            let z = rng.random_range(-1.0..1.0);
            let y = x + z;
            if self.f(x, y).abs() > l * z.abs().powf(beta) * (1.0 + 1e-12) + 1e-300 {
                return false;
            }
        }
        true
    }
}

pub struct FPlusKernel<'a>(&'a NonlocalPerturbation);

impl PairKernel for FPlusKernel<'_> {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.f_plus(x, y)
    }
    fn certificate(&self) -> (f64, f64) {
        self.0.certificate()
    }
    fn support_radius(&self) -> f64 {
        self.0.support_radius()
    }
}

pub struct FMinusKernel<'a>(&'a NonlocalPerturbation);

impl PairKernel for FMinusKernel<'_> {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.f_minus(x, y)
    }
    fn certificate(&self) -> (f64, f64) {
        self.0.certificate()
    }
    fn support_radius(&self) -> f64 {
        self.0.support_radius()
    }
}

/// Arbitrary certified kernel, mostly for tests and diagnostics.
pub struct FnKernel<F: Fn(f64, f64) -> f64 + Sync> {
    pub f: F,
    pub certificate: (f64, f64),
    pub support_radius: f64,
}

impl<F: Fn(f64, f64) -> f64 + Sync> PairKernel for FnKernel<F> {
    fn eval(&self, x: f64, y: f64) -> f64 {
        (self.f)(x, y)
    }
    fn certificate(&self) -> (f64, f64) {
        self.certificate
    }
    fn support_radius(&self) -> f64 {
        self.support_radius
    }
}

/// Li decomposition of `e^F - 1` with its comparability constant.
#[derive(Debug, Clone)]
pub struct DecomposedPerturbation {
    f: NonlocalPerturbation,
    c_g: f64,
}

impl DecomposedPerturbation {
    pub fn g_plus(&self, x: f64, y: f64) -> f64 {
        ((self.f.f_plus(x, y)).exp_m1()) * (-self.f.f_minus(x, y)).exp()
    }

    pub fn g_minus(&self, x: f64, y: f64) -> f64 {
        -(-self.f.f_minus(x, y)).exp_m1()
    }

    pub fn g(&self, x: f64, y: f64) -> f64 {
        self.f.f(x, y).exp_m1()
    }

    pub fn comparability(&self) -> f64 {
        self.c_g
    }

    pub fn perturbation(&self) -> &NonlocalPerturbation {
        &self.f
    }

    pub fn gplus_kernel(&self) -> GPlusKernel<'_> {
        GPlusKernel(self)
    }

    pub fn gminus_kernel(&self) -> GMinusKernel<'_> {
        GMinusKernel(self)
    }
}

pub struct GPlusKernel<'a>(&'a DecomposedPerturbation);

impl PairKernel for GPlusKernel<'_> {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.g_plus(x, y)
    }
    fn certificate(&self) -> (f64, f64) {
        let (l, beta) = self.0.f.certificate();
        (self.0.c_g * l, beta)
    }
    fn support_radius(&self) -> f64 {
        self.0.f.support_radius()
    }
}

pub struct GMinusKernel<'a>(&'a DecomposedPerturbation);

impl PairKernel for GMinusKernel<'_> {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.g_minus(x, y)
    }
    fn certificate(&self) -> (f64, f64) {
        self.0.f.certificate()
    }
    fn support_radius(&self) -> f64 {
        self.0.f.support_radius()
    }
}

/// Pointwise evaluators for `G+`, `G-`; the identity
/// `G+ - G- = e^F - 1` holds exactly.
pub fn li_decompose(f: &NonlocalPerturbation) -> DecomposedPerturbation {
    DecomposedPerturbation {
        c_g: comparability_constant(f.bound()),
        f: f.clone(),
    }
}

/// `C_G = max(e^M, M / (1 - e^{-M}))`, a valid two-sided comparability
/// constant between `G+-` and `F+-` (from monotonicity of `(e^t - 1)/t`
/// and `(1 - e^{-t})/t` on `[0, M]`); equals 1 at `M = 0`.
pub fn comparability_constant(sup_f: f64) -> f64 {
    if sup_f == 0.0 {
        return 1.0;
    }
    sup_f.exp().max(sup_f / -(-sup_f).exp_m1())
}

/// Channel density `NH(x) = int H(x,y) N(x,dy)` of a certified kernel by
/// split quadrature: the near-diagonal band `|y - x| <= delta` is bounded
/// analytically through the certificate (and dropped below the error
/// budget), the rest integrated over geometric shells. Total error kept
/// below 1e-8 absolute.
pub fn channel_density(h: &dyn PairKernel, x: f64, spec: &ProcessSpec) -> Result<f64> {
    let (l_cert, beta) = h.certificate();
    if beta <= spec.alpha() {
        return Err(Error::Certificate(format!(
            "channel density needs beta > alpha ({beta} <= {})",
            spec.alpha()
        )));
    }
    let s = h.support_radius();
    if s == 0.0 || l_cert == 0.0 {
        return Ok(0.0);
    }
    if x.abs() > s && (x.abs() - s) > 1.0 {
        // the certificate only covers |x - y| <= 1; further out the kernel
        // vanishes anyway because of the joint support restriction
        return Ok(0.0);
    }
    let front = 2.0 * spec.intensity_multiplier() * spec.normalization_constant();
    // band bound: int_{|z|<=delta} L z^beta nu(z) dz <= 2 front L delta^{beta-alpha}/(beta-alpha)
    let band_budget = 2.5e-9;
    let bexp = beta - spec.alpha();
    let delta = (band_budget * bexp / (2.0 * front * l_cert))
        .powf(1.0 / bexp)
        .min(0.125 * s);
    let z_max = x.abs() + s;
    if z_max <= delta {
        return Ok(0.0);
    }
    let integrand = |z: f64| {
        let mut v = 0.0;
        let yl = x - z;
        let yr = x + z;
        let hl = h.eval(x, yl);
        let hr = h.eval(x, yr);
        if hl != 0.0 {
            v += hl * spec.levy_density(z);
        }
        if hr != 0.0 {
            v += hr * spec.levy_density(z);
        }
        v
    };
    quad::integrate_shells(integrand, delta, z_max, delta, 2e-9)
}

/// Channel density sampled on the grid: the Revuz density vector of the
/// pure-jump functional generated by `H`.
pub fn revuz_density(h: &dyn PairKernel, grid: &Grid, spec: &ProcessSpec) -> Result<Vec<f64>> {
    let nodes = grid.nodes();
    nodes
        .par_iter()
        .map(|&x| channel_density(h, x, spec))
        .collect()
}

/// Compensator density of the sub-cutoff jump perturbation:
/// `W_eps(x) = int_{0 < |y-x| <= eps} (e^{F(x,y)} - 1) N(x, dy)`.
/// Along a simulated path (whose jumps below the cutoff were Gaussianized)
/// the Riemann sum of `W_eps` is the exact exponential compensator of the
/// omitted `F`-jump sums, leaving only a second-order remainder in the
/// published bias.
pub fn band_compensator_density(
    dec: &DecomposedPerturbation,
    x: f64,
    epsilon: f64,
    spec: &ProcessSpec,
) -> Result<f64> {
    let f = dec.perturbation();
    let (l_cert, beta) = f.certificate();
    if beta <= spec.alpha() {
        return Err(Error::Certificate(format!(
            "band compensator needs beta > alpha ({beta} <= {})",
            spec.alpha()
        )));
    }
    let s = f.support_radius();
    if s == 0.0 || l_cert == 0.0 || x.abs() > s + epsilon {
        return Ok(0.0);
    }
    // |e^F - 1| <= C_G L |z|^beta on the band
    let front = 2.0 * spec.intensity_multiplier() * spec.normalization_constant();
    let cl = dec.comparability() * l_cert;
    let bexp = beta - spec.alpha();
    let band_budget = 1e-11;
    let delta = (band_budget * bexp / (2.0 * front * cl))
        .powf(1.0 / bexp)
        .min(0.125 * epsilon);
    let integrand = |z: f64| {
        (dec.g(x, x + z) + dec.g(x, x - z)) * spec.levy_density(z)
    };
    quad::integrate_shells(integrand, delta, epsilon, delta, 1e-11)
}

/// Table of the band compensator over the perturbation support.
pub fn band_compensator_table(
    dec: &DecomposedPerturbation,
    epsilon: f64,
    spec: &ProcessSpec,
    points: usize,
) -> Result<crate::interp::MonotoneCubic> {
    let s = dec.perturbation().support_radius() + epsilon;
    let xs: Vec<f64> = (0..points)
        .map(|k| -s + 2.0 * s * k as f64 / (points - 1) as f64)
        .collect();
    let ys = xs
        .par_iter()
        .map(|&x| band_compensator_density(dec, x, epsilon, spec))
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::interp::MonotoneCubic::new(xs, ys))
}

/// Dense interpolation table of `NH` over the kernel support (plus the
/// certificate margin), for per-step sampling along paths.
pub fn channel_density_table(
    h: &dyn PairKernel,
    spec: &ProcessSpec,
    points: usize,
) -> Result<crate::interp::MonotoneCubic> {
    let s = h.support_radius() + 1.0;
    let xs: Vec<f64> = (0..points)
        .map(|k| -s + 2.0 * s * k as f64 / (points - 1) as f64)
        .collect();
    let ys = xs
        .par_iter()
        .map(|&x| channel_density(h, x, spec))
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::interp::MonotoneCubic::new(xs, ys))
}

/// `rho+- = mu+- + xi_{G+-}` as density vectors on the grid
/// (quadrature-accurate version, used by the path functionals).
pub fn assemble_rho(
    mu: &LocalMeasure,
    dec: &DecomposedPerturbation,
    grid: &Grid,
    spec: &ProcessSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let xi_gp = revuz_density(&dec.gplus_kernel(), grid, spec)?;
    let xi_gm = revuz_density(&dec.gminus_kernel(), grid, spec)?;
    let rho_plus = grid
        .nodes()
        .iter()
        .zip(&xi_gp)
        .map(|(&x, &xi)| mu.density_plus(x) + xi)
        .collect();
    let rho_minus = grid
        .nodes()
        .iter()
        .zip(&xi_gm)
        .map(|(&x, &xi)| mu.density_minus(x) + xi)
        .collect();
    Ok((rho_plus, rho_minus))
}

/// Kato-class window statistic at radius `r` plus, for `alpha > 1`, the
/// finite-mass statistic `sup_x int_{|x-y| <= 1} nu(dy)`.
#[derive(Debug, Clone, Copy)]
pub struct KatoModulus {
    pub modulus: f64,
    pub remark_statistic: Option<f64>,
}

/// `max_x int_{|x-y| < r} |R_K(x,y)| nu(dy)` for a density vector on the
/// grid; the singular self-cell is integrated analytically.
pub fn kato_modulus(nu: &[f64], r: f64, grid: &Grid, spec: &ProcessSpec) -> Result<KatoModulus> {
    if nu.len() != grid.len() {
        return Err(Error::Precondition("density vector does not match the grid".into()));
    }
    let h = grid.spacing();
    if r < 4.0 * h {
        return Err(Error::Resolution(format!(
            "window r = {r} must be at least 4 grid spacings ({})",
            4.0 * h
        )));
    }
    let alpha = spec.alpha();
    let half = 0.5 * h;
    // int_{|z| < h/2} |R_K(z)| dz
    let self_cell = if alpha == 1.0 {
        2.0 * half * (1.0 - half.ln())
    } else {
        2.0 * half.powf(alpha) / alpha
    };
    let n = grid.len();
    let window = (r / h).floor() as usize;
    let mut modulus: f64 = 0.0;
    for i in 0..n {
        let mut acc = nu[i] * self_cell;
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        for j in lo..=hi {
            if j == i {
                continue;
            }
            let d = h * (i as isize - j as isize).unsigned_abs() as f64;
            if d >= r {
                continue;
            }
            let rk = if alpha == 1.0 { (1.0 / d).ln() } else { d.powf(alpha - 1.0) };
            acc += rk.abs() * nu[j] * h;
        }
        modulus = modulus.max(acc);
    }
    let remark_statistic = if alpha > 1.0 {
        let window1 = (1.0 / h).floor() as usize;
        let mut stat: f64 = 0.0;
        for i in 0..n {
            let lo = i.saturating_sub(window1);
            let hi = (i + window1).min(n - 1);
            let mass: f64 = (lo..=hi).map(|j| nu[j] * h).sum();
            stat = stat.max(mass);
        }
        Some(stat)
    } else {
        None
    };
    Ok(KatoModulus { modulus, remark_statistic })
}
