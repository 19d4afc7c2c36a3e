use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::ProcessSpec;
use crate::perturbations::{li_decompose, DecomposedPerturbation, LocalMeasure, NonlocalPerturbation};

/// Pair-weight table of the base form. Weights depend only on the node
/// distance, so only the profile is stored:
/// `profile[k] = kappa C h psi(m^{1/alpha} k h) int_{cell_k} |y|^{-1-alpha} dy`
/// (exact per-cell integration, psi frozen at the cell midpoint). The
/// diagonal band `|z| <= h` lost to the self-cell re-enters as a
/// nearest-neighbour correction weight matched to the analytic integral of
/// `z^2 nu(z)` over the band, and jumps landing beyond the box edge make up
/// the exterior-killing rates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    profile: Vec<f64>,
    correction: f64,
    exterior: Vec<f64>,
    spacing: f64,
}

impl WeightTable {
    /// `w_{ij}` including the nearest-neighbour correction.
    #[inline]
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        let k = i.abs_diff(j);
        debug_assert!(k > 0);
        self.profile[k] + if k == 1 { self.correction } else { 0.0 }
    }

    /// Pair mass `w_hat(i,j) = 2 w_{ij} ~ N(x_i, x_j) h^2`.
    #[inline]
    pub fn pair_mass(&self, i: usize, j: usize) -> f64 {
        2.0 * self.pair(i, j)
    }

    /// Raw per-cell profile value at node distance `k` (no correction).
    pub fn profile(&self, k: usize) -> f64 {
        self.profile[k]
    }

    /// The nearest-neighbour correction weight.
    pub fn correction(&self) -> f64 {
        self.correction
    }

    /// Exterior killing rate at node `i` (jumps beyond the box edge).
    pub fn exterior_rate(&self, i: usize) -> f64 {
        self.exterior[i]
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub(super) fn from_parts(
        profile: Vec<f64>,
        correction: f64,
        exterior: Vec<f64>,
        spacing: f64,
    ) -> Self {
        Self { profile, correction, exterior, spacing }
    }
}

/// Assemble the pair-weight table for a grid.
pub fn assemble_weights(grid: &Grid, spec: &ProcessSpec) -> Result<WeightTable> {
    let n = grid.len();
    let h = grid.spacing();
    let alpha = spec.alpha();
    let front = spec.intensity_multiplier() * spec.normalization_constant();
    let ms = spec.mass_scale();
    let mut profile = vec![0.0; n];
    for k in 1..n {
        let d = k as f64 * h;
        // int over the cell of |y|^{-1-alpha}: ((d-h/2)^-a - (d+h/2)^-a)/a
        let cell = ((d - 0.5 * h).powf(-alpha) - (d + 0.5 * h).powf(-alpha)) / alpha;
        profile[k] = front * h * spec.psi_fast(ms * d) * cell;
    }
    // quadratic-increment matching of the dropped band |z| <= h:
    // energy sum_i c (u_{i+1}-u_i)^2 with c = sigma_h^2/(2h), i.e. a pair
    // weight sigma_h^2/(4h) on nearest neighbours
    let correction = spec.small_jump_variance(h)? / (4.0 * h);
    let b = grid.outer_bound();
    let exterior: Vec<f64> = (0..n)
        .map(|i| {
            let x = grid.node(i);
            Ok(spec.one_sided_tail_rate(b - x)? + spec.one_sided_tail_rate(b + x)?)
        })
        .collect::<Result<_>>()?;
    Ok(WeightTable { profile, correction, exterior, spacing: h })
}

/// Grid plus every assembled operator of the perturbed process.
#[derive(Debug, Clone)]
pub struct FormSystem {
    spec: ProcessSpec,
    grid: Grid,
    mu: LocalMeasure,
    dec: DecomposedPerturbation,
    weights: WeightTable,
    a_base: DMatrix<f64>,
    a_minus: DMatrix<f64>,
    a_y: DMatrix<f64>,
    /// Diagonal of the `rho+` mass operator (`rho+_i h`).
    b_rho: Vec<f64>,
    /// Discrete densities `rho+- = mu+- + xi_{G+-}` (row-sum Revuz version).
    rho_plus: Vec<f64>,
    rho_minus: Vec<f64>,
}

impl FormSystem {
    /// Assemble every operator from the primitive inputs. Preconditions:
    /// perturbation supports inside the half-box, spacing resolving the
    /// decay certificate (`h^{beta-alpha} <= 0.1`).
    pub fn assemble(
        spec: &ProcessSpec,
        grid: &Grid,
        mu: &LocalMeasure,
        f: &NonlocalPerturbation,
    ) -> Result<Self> {
        let h = grid.spacing();
        let (_, beta) = f.certificate();
        if !f.is_zero() && h.powf(beta - spec.alpha()) > 0.1 + 1e-12 {
            return Err(Error::Resolution(format!(
                "spacing h = {h} does not resolve the certificate: h^(beta-alpha) = {} > 0.1",
                h.powf(beta - spec.alpha())
            )));
        }
        Self::assemble_relaxed(spec, grid, mu, f)
    }

    /// Assembly without the spacing gate, for Richardson companion solves
    /// on deliberately coarser grids. The support precondition still holds.
    pub(crate) fn assemble_relaxed(
        spec: &ProcessSpec,
        grid: &Grid,
        mu: &LocalMeasure,
        f: &NonlocalPerturbation,
    ) -> Result<Self> {
        let half = 0.5 * grid.half_width();
        if mu.support_radius() > half || f.support_radius() > half {
            return Err(Error::Precondition(format!(
                "perturbation supports must fit inside half the box (L/2 = {half})"
            )));
        }
        let h = grid.spacing();
        let weights = assemble_weights(grid, spec)?;
        let dec = li_decompose(f);
        let n = grid.len();
        let nodes = grid.nodes();

        // pair factors and row-sum Revuz densities
        let mut a_base = DMatrix::zeros(n, n);
        let mut a_minus = DMatrix::zeros(n, n);
        let mut a_y = DMatrix::zeros(n, n);
        let mut xi_gp = vec![0.0; n];
        let mut xi_gm = vec![0.0; n];
        let s_f = f.support_radius();
        for i in 0..n {
            let xi = nodes[i];
            let mut diag_base = weights.exterior_rate(i) * h;
            let mut diag_minus = diag_base;
            let mut diag_y = diag_base;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = nodes[j];
                let w_hat = weights.pair_mass(i, j);
                let inside = xi.abs() <= s_f && xj.abs() <= s_f;
                let (em, gp, gm) = if inside {
                    (
                        (-f.f_minus(xi, xj)).exp(),
                        dec.g_plus(xi, xj),
                        dec.g_minus(xi, xj),
                    )
                } else {
                    (1.0, 0.0, 0.0)
                };
                a_base[(i, j)] = -w_hat;
                a_minus[(i, j)] = -em * w_hat;
                a_y[(i, j)] = -(em + gp) * w_hat;
                diag_base += w_hat;
                diag_minus += em * w_hat;
                diag_y += (em + gp) * w_hat;
                xi_gp[i] += gp * w_hat;
                xi_gm[i] += gm * w_hat;
            }
            a_base[(i, i)] = diag_base;
            a_minus[(i, i)] = diag_minus;
            a_y[(i, i)] = diag_y;
        }
        for v in xi_gp.iter_mut().chain(xi_gm.iter_mut()) {
            *v /= h;
        }

        let rho_plus: Vec<f64> = (0..n).map(|i| mu.density_plus(nodes[i]) + xi_gp[i]).collect();
        let rho_minus: Vec<f64> = (0..n).map(|i| mu.density_minus(nodes[i]) + xi_gm[i]).collect();
        for i in 0..n {
            a_minus[(i, i)] += rho_minus[i] * h;
            a_y[(i, i)] += rho_minus[i] * h;
        }
        let b_rho: Vec<f64> = rho_plus.iter().map(|&r| r * h).collect();

        Ok(Self {
            spec: spec.clone(),
            grid: *grid,
            mu: mu.clone(),
            dec,
            weights,
            a_base,
            a_minus,
            a_y,
            b_rho,
            rho_plus,
            rho_minus,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn from_parts(
        spec: ProcessSpec,
        grid: Grid,
        mu: LocalMeasure,
        dec: DecomposedPerturbation,
        weights: WeightTable,
        a_base: DMatrix<f64>,
        a_minus: DMatrix<f64>,
        a_y: DMatrix<f64>,
        b_rho: Vec<f64>,
        rho_plus: Vec<f64>,
        rho_minus: Vec<f64>,
    ) -> Self {
        Self { spec, grid, mu, dec, weights, a_base, a_minus, a_y, b_rho, rho_plus, rho_minus }
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn local_measure(&self) -> &LocalMeasure {
        &self.mu
    }

    pub fn decomposition(&self) -> &DecomposedPerturbation {
        &self.dec
    }

    pub fn perturbation(&self) -> &NonlocalPerturbation {
        self.dec.perturbation()
    }

    pub fn weights(&self) -> &WeightTable {
        &self.weights
    }

    /// Base form of the truncated process (exterior killing included).
    pub fn a_base(&self) -> &DMatrix<f64> {
        &self.a_base
    }

    /// Killed form: `F-`-damped increments plus the `rho-` diagonal.
    pub fn a_minus(&self) -> &DMatrix<f64> {
        &self.a_minus
    }

    /// Creation-symmetrized non-negative form.
    pub fn a_y(&self) -> &DMatrix<f64> {
        &self.a_y
    }

    /// Diagonal of the `rho+` mass operator.
    pub fn b_rho(&self) -> &[f64] {
        &self.b_rho
    }

    pub fn rho_plus(&self) -> &[f64] {
        &self.rho_plus
    }

    pub fn rho_minus(&self) -> &[f64] {
        &self.rho_minus
    }

    /// Schrodinger form via the symmetrized route: `A_Y - B_rho`.
    pub fn a_schr(&self) -> DMatrix<f64> {
        let mut a = self.a_y.clone();
        for i in 0..self.grid.len() {
            a[(i, i)] -= self.b_rho[i];
        }
        a
    }

    /// Schrodinger form via the literal coupling route:
    /// `A_base - [u(x) u(y) (e^F - 1) mass] - diag(mu h)`.
    pub fn a_schr_coupling_route(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let h = self.grid.spacing();
        let nodes = self.grid.nodes();
        let mut a = self.a_base.clone();
        let f = self.dec.perturbation();
        let s_f = f.support_radius();
        for i in 0..n {
            for j in 0..n {
                if j == i {
                    continue;
                }
                if nodes[i].abs() <= s_f && nodes[j].abs() <= s_f {
                    let g = self.dec.g(nodes[i], nodes[j]);
                    if g != 0.0 {
                        a[(i, j)] -= g * self.weights.pair_mass(i, j);
                    }
                }
            }
            let m = self.mu.density_plus(nodes[i]) - self.mu.density_minus(nodes[i]);
            a[(i, i)] -= m * h;
        }
        a
    }

    /// Quadratic form value `u^T A u`.
    pub fn energy(a: &DMatrix<f64>, u: &[f64]) -> f64 {
        let n = u.len();
        let mut total = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += a[(i, j)] * u[j];
            }
            total += u[i] * row;
        }
        total
    }

    /// Largest relative asymmetry of an operator (should be rounding-level).
    pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..a.nrows() {
            for j in (i + 1)..a.ncols() {
                worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
                scale = scale.max(a[(i, j)].abs());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbations::Bump;

    fn spec() -> ProcessSpec {
        ProcessSpec::new(1.2, 0.0).unwrap()
    }

    fn small_grid() -> Grid {
        Grid::new(5.0, 401).unwrap() // h = 0.025, h^0.8 ~ 0.052
    }

    fn test_mu() -> LocalMeasure {
        LocalMeasure::new(
            vec![Bump::new(0.0, 1.0, 1.0).unwrap()],
            vec![Bump::new(1.5, 0.8, 0.6).unwrap()],
        )
    }

    fn test_f() -> NonlocalPerturbation {
        NonlocalPerturbation::new(
            0.8,
            0.5,
            2.0,
            Bump::new(-1.2, 0.8, 1.0).unwrap(),
            Bump::new(1.2, 0.8, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn random_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn weights_symmetric_and_match_midpoint_far_out() {
        let grid = small_grid();
        let s = spec();
        let w = assemble_weights(&grid, &s).unwrap();
        let h = grid.spacing();
        let c = s.intensity_multiplier() * s.normalization_constant();
        for &k in &[20usize, 50, 100, 300] {
            let d = k as f64 * h;
            let midpoint = c * h * h / d.powf(1.0 + s.alpha());
            let rel = (w.profile(k) - midpoint).abs() / midpoint;
            assert!(rel < 0.01, "midpoint mismatch at k = {k}: rel {rel}");
        }
        // symmetry is structural: pair(i,j) only sees |i-j|
        assert_eq!(w.pair(3, 10), w.pair(10, 3));
    }

    #[test]
    fn correction_energy_vanishes_at_the_expected_rate() {
        // fixed smooth u, correction energy ~ h^{2-alpha}
        let s = spec();
        let u_fn = |x: f64| (-x * x).exp();
        let mut energies = Vec::new();
        for &n in &[200usize, 400, 800] {
            let grid = Grid::new(5.0, n).unwrap();
            let w = assemble_weights(&grid, &s).unwrap();
            let nodes = grid.nodes();
            let mut e = 0.0;
            for i in 0..n - 1 {
                let du = u_fn(nodes[i + 1]) - u_fn(nodes[i]);
                e += 2.0 * w.correction() * du * du;
            }
            energies.push(e);
        }
        let rate1 = (energies[0] / energies[1]).log2();
        let rate2 = (energies[1] / energies[2]).log2();
        let expect = 2.0 - s.alpha();
        assert!((rate1 - expect).abs() < 0.15, "rate {rate1} vs {expect}");
        assert!((rate2 - expect).abs() < 0.15, "rate {rate2} vs {expect}");
    }

    #[test]
    fn operators_symmetric_and_identities_exact() {
        let grid = small_grid();
        let s = spec();
        let sys = FormSystem::assemble(&s, &grid, &test_mu(), &test_f()).unwrap();
        assert!(FormSystem::asymmetry(sys.a_base()) <= 1e-12);
        assert!(FormSystem::asymmetry(sys.a_minus()) <= 1e-12);
        assert!(FormSystem::asymmetry(sys.a_y()) <= 1e-12);

        let schr_b = sys.a_schr();
        let schr_a = sys.a_schr_coupling_route();
        // A_schr = A_Y - B_rho holds by construction; the two assembly
        // routes must agree on random vectors to rounding
        for u in random_vectors(grid.len(), 20, 31) {
            let ea = FormSystem::energy(&schr_a, &u);
            let eb = FormSystem::energy(&schr_b, &u);
            let ey = FormSystem::energy(sys.a_y(), &u);
            let ebrho: f64 = u.iter().zip(sys.b_rho()).map(|(&ui, &bi)| ui * ui * bi).sum();
            let scale = ey.abs().max(1.0);
            assert!((ea - eb).abs() <= 1e-12 * scale, "routes differ: {ea} vs {eb}");
            assert!(((ey - ebrho) - eb).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn zero_perturbations_collapse_to_base() {
        let grid = small_grid();
        let s = spec();
        let f0 = NonlocalPerturbation::zero(2.0);
        let sys = FormSystem::assemble(&s, &grid, &LocalMeasure::zero(), &f0).unwrap();
        assert_eq!(sys.a_minus(), sys.a_base());
        assert_eq!(sys.a_y(), sys.a_base());
        assert_eq!(sys.a_schr(), *sys.a_base());
        assert!(sys.b_rho().iter().all(|&b| b == 0.0));

        // local-only case: A_schr = A_base - diag(mu h) exactly
        let sys = FormSystem::assemble(&s, &grid, &test_mu(), &f0).unwrap();
        let schr = sys.a_schr();
        let h = grid.spacing();
        for (i, x) in grid.nodes().iter().enumerate() {
            let mu_i = sys.local_measure().density_plus(*x) - sys.local_measure().density_minus(*x);
            let expect = sys.a_base()[(i, i)] - mu_i * h;
            assert!((schr[(i, i)] - expect).abs() <= 1e-14 * expect.abs().max(1.0));
        }
        let routes = sys.a_schr_coupling_route();
        for u in random_vectors(grid.len(), 5, 77) {
            let ea = FormSystem::energy(&routes, &u);
            let eb = FormSystem::energy(&schr, &u);
            assert!((ea - eb).abs() <= 1e-12 * ea.abs().max(1.0));
        }
    }

    #[test]
    fn killed_form_jump_part_bounded_by_base() {
        let grid = small_grid();
        let s = spec();
        let f = test_f();
        let sys = FormSystem::assemble(&s, &grid, &LocalMeasure::zero(), &f).unwrap();
        let m = f.bound();
        let h = grid.spacing();
        // strip the rho- diagonal to isolate the jump part of A_minus
        let mut jump = sys.a_minus().clone();
        for i in 0..grid.len() {
            jump[(i, i)] -= sys.rho_minus()[i] * h;
        }
        for u in random_vectors(grid.len(), 10, 3) {
            let base = FormSystem::energy(sys.a_base(), &u);
            let killed = FormSystem::energy(&jump, &u);
            assert!(killed <= base * (1.0 + 1e-12));
            assert!(killed >= (-m).exp() * base * (1.0 - 1e-12));
        }
    }

    #[test]
    fn added_nonnegative_diagonal_raises_energy() {
        let grid = small_grid();
        let s = spec();
        let f0 = NonlocalPerturbation::zero(2.0);
        let sys = FormSystem::assemble(&s, &grid, &test_mu(), &f0).unwrap();
        for u in random_vectors(grid.len(), 5, 9) {
            let base = FormSystem::energy(sys.a_base(), &u);
            let killed = FormSystem::energy(sys.a_minus(), &u);
            assert!(killed >= base - 1e-12 * base.abs().max(1.0));
        }
    }

    #[test]
    fn support_precondition_enforced() {
        let grid = Grid::new(2.0, 101).unwrap();
        let s = spec();
        let mu = test_mu(); // support radius 2.3 > L/2 = 1
        let f0 = NonlocalPerturbation::zero(2.0);
        assert!(matches!(
            FormSystem::assemble(&s, &grid, &mu, &f0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn resolution_precondition_enforced() {
        let grid = Grid::new(5.0, 41).unwrap(); // h = 0.25, h^0.8 = 0.33
        let s = spec();
        assert!(matches!(
            FormSystem::assemble(&s, &grid, &LocalMeasure::zero(), &test_f()),
            Err(Error::Resolution(_))
        ));
    }
}
