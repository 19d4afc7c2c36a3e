//! Discretized quadratic forms on the truncation grid.
//!
//! All forms share one pair-mass table `w_hat(i,j) ~ N(x_i, x_j) h^2` (the
//! Levy-system kernel mass between cells) plus an exterior-killing diagonal,
//! so the exact operator identities between the base form, the killed form,
//! the Schrodinger form and the creation-symmetrized form hold to rounding:
//!
//! * `A_schr = A_Y - B_rho`
//! * the literal coupling route and the symmetrized increment route for
//!   `A_schr` agree on every vector,
//! * `F == 0` collapses `A_schr` to `A_base - diag(mu h)`.
//!
//! The discrete Revuz densities used inside the operators are the row sums
//! of the weighted pair table (which is what makes the identities exact);
//! the quadrature-accurate channel densities live in `perturbations` and
//! feed the path functionals.

mod assemble;
mod cache;
mod spectral;

pub use assemble::{assemble_weights, FormSystem, WeightTable};
pub use spectral::{
    a_infinity_diagnostic, assumption_a_radius, domain_principal_value, greens_domination,
    green_tight_tail, principal_eigenpair, AdmissibleBall, GreenOperator, GroundState,
};
