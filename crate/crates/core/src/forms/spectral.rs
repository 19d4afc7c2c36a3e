use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::perturbations::PairKernel;

use super::assemble::{FormSystem, WeightTable};

/// Discrete Green operator: a cached Cholesky factorization of a positive
/// definite form, applied in the measure-to-function convention
/// `u = A^{-1} (f h)`, so `u(x_i)` approximates `int R(x_i, y) f(y) dy`.
pub struct GreenOperator {
    chol: Cholesky<f64, Dyn>,
    spacing: f64,
    n: usize,
}

impl GreenOperator {
    pub fn new(a: &DMatrix<f64>, spacing: f64) -> Result<Self> {
        let n = a.nrows();
        let chol = a.clone().cholesky().ok_or_else(|| {
            Error::Solver(format!(
                "operator is not positive definite (n = {n}, diagonal min {:.3e})",
                (0..n).map(|i| a[(i, i)]).fold(f64::INFINITY, f64::min)
            ))
        })?;
        Ok(Self { chol, spacing, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `A^{-1} rhs` without the measure scaling.
    pub fn solve_raw(&self, rhs: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(rhs);
        self.chol.solve(&v).data.into()
    }

    /// Green potential of a density: solves `A u = f h`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let v = DVector::from_iterator(self.n, f.iter().map(|&x| x * self.spacing));
        self.chol.solve(&v).data.into()
    }

    /// Column `A^{-1} e_j` (the discrete Green kernel against the node).
    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.n];
        e[j] = 1.0;
        self.solve_raw(&e)
    }

    /// Sup of the Green potential of a density.
    pub fn potential_sup(&self, f: &[f64]) -> f64 {
        self.apply(f).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Principal eigenpair of the pencil `(A_Y, B_rho)`.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub lambda: f64,
    pub h: Vec<f64>,
    /// `||A h - lambda B h|| / ||h||`
    pub residual: f64,
    /// `h^T B h` after the final normalization (should be 1).
    pub normalization: f64,
    pub iterations: usize,
}

const EIG_STAGNATION: f64 = 1e-10;
const EIG_RESIDUAL: f64 = 1e-9;
const EIG_MAX_ITER: usize = 500;

/// Inverse-power iteration on the pencil `(A, diag(b))`: repeated `A`-solves
/// of `B`-weighted iterates from the deterministic all-ones start. The
/// `B`-null components of the iterate are the energy-minimizing harmonic
/// extensions produced by the solve itself. Converges on Rayleigh-quotient
/// stagnation plus a residual gate; the sign is fixed so `sum h_i > 0` and
/// `h` is strictly positive on the (connected) grid.
pub fn principal_eigenpair(a: &DMatrix<f64>, b: &[f64], warm_start: Option<&[f64]>) -> Result<GroundState> {
    let n = a.nrows();
    if b.iter().all(|&x| x == 0.0) {
        return Err(Error::Precondition(
            "rho+ mass operator vanishes: the variational problem is empty".into(),
        ));
    }
    if b.iter().any(|&x| x < 0.0) {
        return Err(Error::Precondition("mass diagonal must be non-negative".into()));
    }
    let green = GreenOperator::new(a, 1.0)?;
    let b_norm = |v: &[f64]| -> f64 {
        v.iter().zip(b).map(|(&x, &m)| x * x * m).sum::<f64>().sqrt()
    };
    let mut v: Vec<f64> = match warm_start {
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let s = b_norm(&v);
    if s == 0.0 {
        return Err(Error::Precondition("start vector has no mass component".into()));
    }
    v.iter_mut().for_each(|x| *x /= s);

    let matvec = |u: &[f64]| -> Vec<f64> {
        let uv = DVector::from_column_slice(u);
        let r = a * uv;
        r.data.into()
    };

    let mut lambda_prev = f64::INFINITY;
    let mut lambda = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=EIG_MAX_ITER {
        iterations = it;
        let rhs: Vec<f64> = v.iter().zip(b).map(|(&x, &m)| x * m).collect();
        let y = green.solve_raw(&rhs);
        // A y = B v, so y^T A y = y^T B v
        let num: f64 = y.iter().zip(&rhs).map(|(&yi, &ri)| yi * ri).sum();
        let q = b_norm(&y);
        if !(q > 0.0) {
            return Err(Error::Eigen("iterate lost its mass component".into()));
        }
        lambda = num / (q * q);
        v = y;
        v.iter_mut().for_each(|x| *x /= q);

        let av = matvec(&v);
        let vnorm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
        residual = av
            .iter()
            .zip(&v)
            .zip(b)
            .map(|((&ai, &vi), &m)| (ai - lambda * m * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / vnorm;
        if (lambda - lambda_prev).abs() <= EIG_STAGNATION * lambda.abs().max(1.0)
            && residual <= EIG_RESIDUAL
        {
            break;
        }
        lambda_prev = lambda;
        if it == EIG_MAX_ITER {
            return Err(Error::Eigen(format!(
                "no stagnation after {EIG_MAX_ITER} iterations (lambda = {lambda}, residual = {residual:.3e})"
            )));
        }
    }
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let s = b_norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    if !v.iter().all(|&x| x > 0.0) {
        return Err(Error::Eigen(
            "ground state is not strictly positive on the grid".into(),
        ));
    }
    let normalization = v.iter().zip(b).map(|(&x, &m)| x * x * m).sum::<f64>();
    Ok(GroundState {
        lambda,
        h: v,
        residual,
        normalization,
        iterations,
    })
}

/// Principal value of the variational problem restricted to the index set
/// `d`, normalized by `lambda`:
/// `theta(D) = min { u^T A u / (lambda u^T B u) : supp u in D }`.
/// Returns `+inf` when the restricted mass vanishes.
pub fn domain_principal_value(
    d: &[usize],
    a: &DMatrix<f64>,
    b: &[f64],
    lambda: f64,
) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Domain("empty index set".into()));
    }
    let mass: f64 = d.iter().map(|&i| b[i]).sum();
    if mass == 0.0 {
        return Ok(f64::INFINITY);
    }
    let m = d.len();
    let mut a_d = DMatrix::zeros(m, m);
    for (r, &i) in d.iter().enumerate() {
        for (c, &j) in d.iter().enumerate() {
            a_d[(r, c)] = a[(i, j)];
        }
    }
    let b_d: Vec<f64> = d.iter().map(|&i| b[i]).collect();
    let gs = principal_eigenpair(&a_d, &b_d, None)?;
    Ok(gs.lambda / lambda)
}

/// Green-tightness tail statistic
/// `max_x int_{|y| >= a} R(x, y) nu(y) dy` for a density vector.
pub fn green_tight_tail(green: &GreenOperator, nu: &[f64], a: f64, grid: &Grid) -> f64 {
    let tail: Vec<f64> = (0..grid.len())
        .map(|i| if grid.node(i).abs() >= a { nu[i] } else { 0.0 })
        .collect();
    if tail.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    green.potential_sup(&tail)
}

/// Empirical constant for the Green-function domination `R^Y <= K R^-`:
/// max entrywise ratio over probe columns, skipping entries where both
/// kernels are below 1e-14. Finite and strictly positive; equal to 1 when
/// the creation jump part vanishes.
pub fn greens_domination(
    green_minus: &GreenOperator,
    green_y: &GreenOperator,
    probes: &[usize],
) -> Result<f64> {
    let mut k_hat: f64 = 0.0;
    for &j in probes {
        let ry = green_y.column(j);
        let rm = green_minus.column(j);
        for (y, m) in ry.iter().zip(&rm) {
            if y.abs() < 1e-14 && m.abs() < 1e-14 {
                continue;
            }
            if *m <= 0.0 {
                return Err(Error::Solver(
                    "killed Green column lost positivity".into(),
                ));
            }
            k_hat = k_hat.max(y / m);
        }
    }
    if !k_hat.is_finite() || k_hat <= 0.0 {
        return Err(Error::Solver(format!("domination ratio degenerate: {k_hat}")));
    }
    Ok(k_hat)
}

/// 3G-type diagnostic for the tightness class of a non-negative kernel:
/// `sup_{(x,w)} sum_{(i,j) not in K x K} R(x, x_i) H(x_i, x_j) mass_{ij}
/// R(x_j, w) / R(x, w)` over a coarse probe subsample (at most 8 x 8
/// pairs). Diagnostic only.
pub fn a_infinity_diagnostic(
    h: &dyn PairKernel,
    k_set: &[usize],
    green_minus: &GreenOperator,
    weights: &WeightTable,
    grid: &Grid,
) -> Result<f64> {
    let n = grid.len();
    let mut in_k = vec![false; n];
    for &i in k_set {
        in_k[i] = true;
    }
    let s = h.support_radius();
    let support: Vec<usize> = (0..n).filter(|&i| grid.node(i).abs() <= s).collect();
    if support.is_empty() {
        return Ok(0.0);
    }
    let probes: Vec<usize> = (1..=8).map(|k| k * n / 9).collect();
    let columns: Vec<Vec<f64>> = probes.iter().map(|&j| green_minus.column(j)).collect();
    let mut worst: f64 = 0.0;
    for (pi, &ix) in probes.iter().enumerate() {
        for (pj, &iw) in probes.iter().enumerate() {
            if ix == iw {
                continue;
            }
            let rx = &columns[pi];
            let rw = &columns[pj];
            let denom = rx[iw];
            if denom <= 0.0 {
                continue;
            }
            let mut num = 0.0;
            for &i in &support {
                let xi = grid.node(i);
                for &j in &support {
                    if i == j || (in_k[i] && in_k[j]) {
                        continue;
                    }
                    let hij = h.eval(xi, grid.node(j));
                    if hij != 0.0 {
                        num += rx[i] * hij * weights.pair_mass(i, j) * rw[j];
                    }
                }
            }
            worst = worst.max(num / denom);
        }
    }
    Ok(worst)
}

/// Admissible localization ball around `z`: the largest dyadic radius with
/// `lambda sup_x R^Y(1_B rho+)(x) < 1`, with the measured statistic.
#[derive(Debug, Clone, Copy)]
pub struct AdmissibleBall {
    pub center: f64,
    pub radius: f64,
    /// `lambda sup R^Y(1_B rho+)` at the returned radius (must be < 1).
    pub statistic: f64,
}

pub fn assumption_a_radius(
    z: f64,
    lambda: f64,
    green_y: &GreenOperator,
    rho_plus: &[f64],
    grid: &Grid,
) -> Result<AdmissibleBall> {
    if z.abs() >= grid.half_width() {
        return Err(Error::Domain(format!("ball center {z} outside the grid interior")));
    }
    let mut r = 0.5 * grid.half_width();
    let r_min = 4.0 * grid.spacing();
    while r >= r_min {
        let masked: Vec<f64> = (0..grid.len())
            .map(|i| {
                if (grid.node(i) - z).abs() < r {
                    rho_plus[i]
                } else {
                    0.0
                }
            })
            .collect();
        let statistic = if masked.iter().all(|&x| x == 0.0) {
            0.0
        } else {
            lambda * green_y.potential_sup(&masked)
        };
        if statistic < 1.0 {
            return Ok(AdmissibleBall { center: z, radius: r, statistic });
        }
        r *= 0.5;
    }
    Err(Error::AssumptionA { z, r_min })
}

impl FormSystem {
    /// Green operator of the killed form (the discrete `R^-`).
    pub fn green_minus(&self) -> Result<GreenOperator> {
        GreenOperator::new(self.a_minus(), self.grid().spacing())
    }

    /// Green operator of the creation-symmetrized form (the discrete `R^Y`).
    pub fn green_y(&self) -> Result<GreenOperator> {
        GreenOperator::new(self.a_y(), self.grid().spacing())
    }

    /// Ground state of the pencil `(A_Y, B_rho)`.
    pub fn ground_state(&self) -> Result<GroundState> {
        principal_eigenpair(self.a_y(), self.b_rho(), None)
    }

    /// `sup_x R^-(rho+)(x)`, the bound entering `lambda >= 1/sup`.
    pub fn killed_potential_sup(&self) -> Result<f64> {
        Ok(self.green_minus()?.potential_sup(self.rho_plus()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::FormSystem;
    use crate::kernels::ProcessSpec;
    use crate::perturbations::{Bump, LocalMeasure, NonlocalPerturbation};

    fn spec() -> ProcessSpec {
        ProcessSpec::new(1.2, 0.0).unwrap()
    }

    fn system(l: f64, n: usize) -> FormSystem {
        let grid = Grid::new(l, n).unwrap();
        let mu = LocalMeasure::new(
            vec![Bump::new(0.0, 1.0, 1.0).unwrap()],
            vec![Bump::new(1.5, 0.8, 0.6).unwrap()],
        );
        let f = NonlocalPerturbation::new(
            0.8,
            0.5,
            2.0,
            Bump::new(-1.2, 0.8, 1.0).unwrap(),
            Bump::new(1.2, 0.8, 1.0).unwrap(),
        )
        .unwrap();
        FormSystem::assemble(&spec(), &grid, &mu, &f).unwrap()
    }

    #[test]
    fn green_solve_and_positivity() {
        let sys = system(5.0, 201);
        let green = sys.green_minus().unwrap();
        let grid = sys.grid();
        let f: Vec<f64> = grid.nodes().iter().map(|x| (-x * x).exp()).collect();
        let u = green.apply(&f);
        // A u = f h to solver tolerance
        let au = {
            let uv = nalgebra::DVector::from_column_slice(&u);
            sys.a_minus() * uv
        };
        for i in 0..grid.len() {
            assert!((au[i] - f[i] * grid.spacing()).abs() < 1e-10);
        }
        // off-diagonal sign pattern of A_minus forces inverse positivity
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                if i != j {
                    assert!(sys.a_minus()[(i, j)] <= 0.0);
                }
            }
        }
        assert!(u.iter().all(|&v| v >= 0.0));
        let sup = sys.killed_potential_sup().unwrap();
        assert!(sup.is_finite() && sup > 0.0);
    }

    #[test]
    fn ground_state_facts() {
        let sys = system(5.0, 201);
        let gs = sys.ground_state().unwrap();
        assert!(gs.lambda > 0.0);
        assert!(gs.residual <= 1e-9, "residual {}", gs.residual);
        assert!((gs.normalization - 1.0).abs() <= 1e-10);
        assert!(gs.h.iter().all(|&v| v > 0.0));
        // lambda >= 1 / sup R^-(rho+), exactly at the discrete level
        let sup = sys.killed_potential_sup().unwrap();
        assert!(
            gs.lambda * sup >= 1.0 - 1e-8,
            "lower bound fails: lambda {} sup {}",
            gs.lambda,
            sup
        );
    }

    #[test]
    fn rayleigh_homogeneity_under_mass_scaling() {
        let sys = system(5.0, 201);
        let gs1 = sys.ground_state().unwrap();
        let b2: Vec<f64> = sys.b_rho().iter().map(|&b| 3.0 * b).collect();
        let gs2 = principal_eigenpair(sys.a_y(), &b2, None).unwrap();
        assert!(
            (gs2.lambda - gs1.lambda / 3.0).abs() <= 1e-9 * gs1.lambda,
            "homogeneity: {} vs {}",
            gs2.lambda,
            gs1.lambda / 3.0
        );
    }

    #[test]
    fn lambda_monotone_in_box() {
        // same spacing, nested boxes
        let l1 = system(5.0, 201).ground_state().unwrap().lambda;
        let l2 = system(10.0, 401).ground_state().unwrap().lambda;
        let l3 = system(20.0, 801).ground_state().unwrap().lambda;
        assert!(l1 >= l2 - 1e-12 && l2 >= l3 - 1e-12, "{l1} {l2} {l3}");
    }

    #[test]
    fn empty_mass_is_a_precondition_error() {
        let sys = {
            let grid = Grid::new(5.0, 101).unwrap();
            let f0 = NonlocalPerturbation::zero(2.0);
            FormSystem::assemble(&spec(), &grid, &LocalMeasure::zero(), &f0).unwrap()
        };
        assert!(matches!(
            sys.ground_state(),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn theta_of_full_grid_is_one_and_monotone() {
        let sys = system(5.0, 201);
        let gs = sys.ground_state().unwrap();
        let all: Vec<usize> = (0..sys.grid().len()).collect();
        let theta_full = domain_principal_value(&all, sys.a_y(), sys.b_rho(), gs.lambda).unwrap();
        assert!((theta_full - 1.0).abs() <= 1e-8, "theta(full) = {theta_full}");

        let d_big = sys.grid().ball_indices(0.0, 3.5);
        let d_small = sys.grid().ball_indices(0.0, 2.0);
        let t_big = domain_principal_value(&d_big, sys.a_y(), sys.b_rho(), gs.lambda).unwrap();
        let t_small = domain_principal_value(&d_small, sys.a_y(), sys.b_rho(), gs.lambda).unwrap();
        assert!(t_small >= t_big - 1e-10);
        assert!(t_big > 1.0, "strictly bigger than one on proper subdomains: {t_big}");

        // mass-free subdomain reports +inf
        let d_empty = sys.grid().ball_indices(4.5, 0.3);
        let t = domain_principal_value(&d_empty, sys.a_y(), sys.b_rho(), gs.lambda).unwrap();
        assert!(t.is_infinite());

        assert!(domain_principal_value(&[], sys.a_y(), sys.b_rho(), gs.lambda).is_err());
    }

    #[test]
    fn tail_statistic_shrinks() {
        let sys = system(5.0, 201);
        let green = sys.green_minus().unwrap();
        let nu: Vec<f64> = sys.rho_plus().to_vec();
        let t1 = green_tight_tail(&green, &nu, 1.0, sys.grid());
        let t2 = green_tight_tail(&green, &nu, 2.0, sys.grid());
        let t5 = green_tight_tail(&green, &nu, 5.0, sys.grid());
        assert!(t1 >= t2 && t2 >= t5);
        assert_eq!(t5, 0.0); // support truncation
    }

    #[test]
    fn domination_ratio() {
        let sys = system(5.0, 201);
        let gm = sys.green_minus().unwrap();
        let gy = sys.green_y().unwrap();
        let n = sys.grid().len();
        let k = greens_domination(&gm, &gy, &[n / 4, n / 2, 3 * n / 4]).unwrap();
        assert!(k.is_finite() && k > 0.0);

        // no creation jump part and mass from mu+ only: A_Y = A_minus
        let grid = Grid::new(5.0, 101).unwrap();
        let f0 = NonlocalPerturbation::zero(2.0);
        let mu = LocalMeasure::new(vec![Bump::new(0.0, 1.0, 1.0).unwrap()], vec![]);
        let sys0 = FormSystem::assemble(&spec(), &grid, &mu, &f0).unwrap();
        let k0 = greens_domination(
            &sys0.green_minus().unwrap(),
            &sys0.green_y().unwrap(),
            &[25, 50, 75],
        )
        .unwrap();
        assert!((k0 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn a_infinity_monotone_in_k_set() {
        let sys = system(5.0, 201);
        let green = sys.green_minus().unwrap();
        let f = sys.perturbation().clone();
        let empty: Vec<usize> = vec![];
        let small = sys.grid().ball_indices(0.0, 1.0);
        let big = sys.grid().ball_indices(0.0, 3.0);
        let v0 = a_infinity_diagnostic(&f.plus_kernel(), &empty, &green, sys.weights(), sys.grid()).unwrap();
        let v1 = a_infinity_diagnostic(&f.plus_kernel(), &small, &green, sys.weights(), sys.grid()).unwrap();
        let v2 = a_infinity_diagnostic(&f.plus_kernel(), &big, &green, sys.weights(), sys.grid()).unwrap();
        assert!(v0 >= v1 && v1 >= v2, "{v0} {v1} {v2}");

        let zero = NonlocalPerturbation::zero(2.0);
        let vz = a_infinity_diagnostic(&zero.plus_kernel(), &empty, &green, sys.weights(), sys.grid()).unwrap();
        assert_eq!(vz, 0.0);
    }

    #[test]
    fn admissible_ball_reports_margin() {
        let sys = system(5.0, 201);
        let gs = sys.ground_state().unwrap();
        let gy = sys.green_y().unwrap();
        let ball = assumption_a_radius(0.0, gs.lambda, &gy, sys.rho_plus(), sys.grid()).unwrap();
        assert!(ball.radius >= 4.0 * sys.grid().spacing());
        assert!(ball.statistic < 1.0);

        // statistic shrinks with the radius
        let masked = |r: f64| -> f64 {
            let v: Vec<f64> = (0..sys.grid().len())
                .map(|i| {
                    if sys.grid().node(i).abs() < r {
                        sys.rho_plus()[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            gs.lambda * gy.potential_sup(&v)
        };
        assert!(masked(0.5) <= masked(1.0) && masked(1.0) <= masked(2.0));

        // away from the mass support any radius up to the distance works
        let far = assumption_a_radius(4.0, gs.lambda, &gy, sys.rho_plus(), sys.grid());
        assert!(far.is_ok());
    }
}
