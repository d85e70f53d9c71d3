//! Free-energy densities `f(p, z)`, the discrete energy functional, its
//! variational derivative and the nonlinear operator of the weak formulation.
//!
//! The discrete energy evaluates the density on both half cells adjacent to
//! every face:
//!
//! ```text
//! E(u) = Σ_i Δx · ½ [ f(g_{i-½}, u_i) + f(g_{i+½}, u_i) ]
//! ```
//!
//! where `g` are the face gradients (zero on the two boundary faces). For
//! `f = ½|p|²` this is exactly `½ Σ_faces Δx g²`, whose variational derivative
//! is minus the three-point second difference.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::GridField;
use crate::value_space::{CaseTag, EntropyMobilityPair, ValueSpace};
use crate::{Error, Result};

/// Step used for finite-difference Hessians of user densities.
pub const FD_HESSIAN_STEP: f64 = 1e-5;

/// Smooth density `f: ℝⁿ × S → ℝ`.
pub trait DensityFunction: Send + Sync {
    fn components(&self) -> usize;

    fn value(&self, p: &[f64], z: &[f64]) -> f64;

    /// Writes `∇_p f` and `∇_z f`.
    fn gradient(&self, p: &[f64], z: &[f64], grad_p: &mut [f64], grad_z: &mut [f64]);

    /// `∇²_{(p,z)} f` in block order `(pp, pz; zp, zz)`.
    ///
    /// The default takes central differences of [`gradient`](Self::gradient) with
    /// step [`FD_HESSIAN_STEP`], accurate to roughly `1e-9` relative.
    fn hessian(&self, p: &[f64], z: &[f64]) -> DMatrix<f64> {
        let n = self.components();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        let mut y: Vec<f64> = p.iter().chain(z).copied().collect();
        let (mut gp_plus, mut gz_plus) = (vec![0.0; n], vec![0.0; n]);
        let (mut gp_minus, mut gz_minus) = (vec![0.0; n], vec![0.0; n]);
        for col in 0..2 * n {
            let orig = y[col];
            y[col] = orig + FD_HESSIAN_STEP;
            self.gradient(&y[..n], &y[n..], &mut gp_plus, &mut gz_plus);
            y[col] = orig - FD_HESSIAN_STEP;
            self.gradient(&y[..n], &y[n..], &mut gp_minus, &mut gz_minus);
            y[col] = orig;
            for row in 0..n {
                h[(row, col)] = (gp_plus[row] - gp_minus[row]) / (2.0 * FD_HESSIAN_STEP);
                h[(n + row, col)] = (gz_plus[row] - gz_minus[row]) / (2.0 * FD_HESSIAN_STEP);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

/// Subtracts the affine part at `(0, z̄)` so that `f(0,z̄) = 0` and both first
/// derivatives vanish there. Second derivatives are untouched.
pub struct Normalized<G> {
    raw: G,
    reference: Vec<f64>,
    offset: f64,
    slope_p: Vec<f64>,
    slope_z: Vec<f64>,
}

pub fn normalize_density<G: DensityFunction>(raw: G, reference: &[f64]) -> Normalized<G> {
    let n = raw.components();
    let zero = vec![0.0; n];
    let offset = raw.value(&zero, reference);
    let (mut slope_p, mut slope_z) = (vec![0.0; n], vec![0.0; n]);
    raw.gradient(&zero, reference, &mut slope_p, &mut slope_z);
    Normalized {
        raw,
        reference: reference.to_vec(),
        offset,
        slope_p,
        slope_z,
    }
}

impl<G: DensityFunction> DensityFunction for Normalized<G> {
    fn components(&self) -> usize {
        self.raw.components()
    }

    fn value(&self, p: &[f64], z: &[f64]) -> f64 {
        let mut affine = self.offset;
        for j in 0..p.len() {
            affine += p[j] * self.slope_p[j] + (z[j] - self.reference[j]) * self.slope_z[j];
        }
        self.raw.value(p, z) - affine
    }

    fn gradient(&self, p: &[f64], z: &[f64], grad_p: &mut [f64], grad_z: &mut [f64]) {
        self.raw.gradient(p, z, grad_p, grad_z);
        for j in 0..p.len() {
            grad_p[j] -= self.slope_p[j];
            grad_z[j] -= self.slope_z[j];
        }
    }

    fn hessian(&self, p: &[f64], z: &[f64]) -> DMatrix<f64> {
        self.raw.hessian(p, z)
    }
}

/// `f(p, z) = ½ yᵀ Q y` with `y = (p, z - z̄)`.
#[derive(Debug, Clone)]
pub struct QuadraticDensity {
    q: DMatrix<f64>,
    reference: Vec<f64>,
}

impl QuadraticDensity {
    pub fn new(q: DMatrix<f64>, reference: &[f64]) -> Result<Self> {
        let n = reference.len();
        if q.nrows() != 2 * n || q.ncols() != 2 * n {
            return Err(Error::InvalidDensity(format!(
                "coefficient matrix must be {0}x{0}",
                2 * n
            )));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidDensity("coefficient matrix is not symmetric".into()));
        }
        Ok(Self {
            q,
            reference: reference.to_vec(),
        })
    }

    fn shifted(&self, p: &[f64], z: &[f64]) -> DVector<f64> {
        let n = p.len();
        DVector::from_fn(2 * n, |i, _| if i < n { p[i] } else { z[i - n] - self.reference[i - n] })
    }
}

impl DensityFunction for QuadraticDensity {
    fn components(&self) -> usize {
        self.reference.len()
    }

    fn value(&self, p: &[f64], z: &[f64]) -> f64 {
        let y = self.shifted(p, z);
        0.5 * y.dot(&(&self.q * &y))
    }

    fn gradient(&self, p: &[f64], z: &[f64], grad_p: &mut [f64], grad_z: &mut [f64]) {
        let n = p.len();
        let g = &self.q * self.shifted(p, z);
        grad_p.copy_from_slice(&g.as_slice()[..n]);
        grad_z.copy_from_slice(&g.as_slice()[n..]);
    }

    fn hessian(&self, _p: &[f64], _z: &[f64]) -> DMatrix<f64> {
        self.q.clone()
    }
}

/// Separable polynomial potential `Ψ(z) = Σ_j Σ_k c_{jk} (z_j - z̄_j)^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    reference: Vec<f64>,
    coefficients: Vec<Vec<f64>>,
}

impl Potential {
    pub fn new(reference: &[f64], coefficients: Vec<Vec<f64>>) -> Result<Self> {
        if coefficients.len() != reference.len() {
            return Err(Error::InvalidDensity(format!(
                "{} coefficient rows for {} components",
                coefficients.len(),
                reference.len()
            )));
        }
        Ok(Self {
            reference: reference.to_vec(),
            coefficients,
        })
    }

    /// `Ψ(z) = Σ_j w_j (z_j - z̄_j)²`.
    pub fn quadratic(reference: &[f64], weights: &[f64]) -> Result<Self> {
        Self::new(reference, weights.iter().map(|&w| vec![0.0, 0.0, w]).collect())
    }

    /// Value, first and second derivative of the `j`-th polynomial.
    fn eval(&self, j: usize, zj: f64) -> (f64, f64, f64) {
        let t = zj - self.reference[j];
        let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for &c in self.coefficients[j].iter().rev() {
            d2 = d2 * t + 2.0 * d1;
            d1 = d1 * t + v;
            v = v * t + c;
        }
        (v, d1, d2)
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        (0..z.len()).map(|j| self.eval(j, z[j]).0).sum()
    }

    pub fn gradient(&self, z: &[f64], out: &mut [f64]) {
        for j in 0..z.len() {
            out[j] = self.eval(j, z[j]).1;
        }
    }

    /// Diagonal of the (diagonal) Hessian.
    pub fn hessian_diagonal(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len()).map(|j| self.eval(j, z[j]).2).collect()
    }
}

/// Parameters of `f(p,z) = ½ (ε + a(z)) pᵀΓp + Ψ(z)` with `a(z) = Σ_k e^{μ_k z_k}`.
///
/// `a_weights = None` means `a ≡ 0`, the plain Cahn–Hilliard density.
#[derive(Debug, Clone)]
pub struct CahnHilliardParams {
    pub gamma: DMatrix<f64>,
    pub psi: Potential,
    pub epsilon: f64,
    pub a_weights: Option<Vec<f64>>,
}

impl CahnHilliardParams {
    /// Single-component `½ p² + (z - z̄)²`.
    pub fn reference_1d(reference: f64) -> Self {
        Self {
            gamma: DMatrix::from_element(1, 1, 1.0),
            psi: Potential::quadratic(&[reference], &[1.0]).expect("one component"),
            epsilon: 1.0,
            a_weights: None,
        }
    }
}

#[derive(Debug, Clone)]
struct CahnHilliardRaw {
    params: CahnHilliardParams,
}

impl CahnHilliardRaw {
    fn weight(&self, z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = z.len();
        match &self.params.a_weights {
            None => (0.0, vec![0.0; n], vec![0.0; n]),
            Some(mu) => {
                let mut a = 0.0;
                let mut da = vec![0.0; n];
                let mut d2a = vec![0.0; n];
                for k in 0..n {
                    let e = (mu[k] * z[k]).exp();
                    a += e;
                    da[k] = mu[k] * e;
                    d2a[k] = mu[k] * mu[k] * e;
                }
                (a, da, d2a)
            }
        }
    }
}

impl DensityFunction for CahnHilliardRaw {
    fn components(&self) -> usize {
        self.params.gamma.nrows()
    }

    fn value(&self, p: &[f64], z: &[f64]) -> f64 {
        let pv = DVector::from_column_slice(p);
        let q = pv.dot(&(&self.params.gamma * &pv));
        let (a, _, _) = self.weight(z);
        0.5 * (self.params.epsilon + a) * q + self.params.psi.value(z)
    }

    fn gradient(&self, p: &[f64], z: &[f64], grad_p: &mut [f64], grad_z: &mut [f64]) {
        let pv = DVector::from_column_slice(p);
        let gp = &self.params.gamma * &pv;
        let q = pv.dot(&gp);
        let (a, da, _) = self.weight(z);
        self.params.psi.gradient(z, grad_z);
        for j in 0..p.len() {
            grad_p[j] = (self.params.epsilon + a) * gp[j];
            grad_z[j] += 0.5 * q * da[j];
        }
    }

    fn hessian(&self, p: &[f64], z: &[f64]) -> DMatrix<f64> {
        let n = p.len();
        let pv = DVector::from_column_slice(p);
        let gp = &self.params.gamma * &pv;
        let q = pv.dot(&gp);
        let (a, da, d2a) = self.weight(z);
        let psi2 = self.params.psi.hessian_diagonal(z);
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                h[(r, c)] = (self.params.epsilon + a) * self.params.gamma[(r, c)];
                h[(r, n + c)] = gp[r] * da[c];
                h[(n + c, r)] = gp[r] * da[c];
            }
            h[(n + r, n + r)] = 0.5 * q * d2a[r] + psi2[r];
        }
        h
    }
}

/// A normalized density together with its value space and coercivity constants.
#[derive(Clone)]
pub struct EnergyDensity {
    function: Arc<dyn DensityFunction>,
    space: ValueSpace,
    coercivity_lower: f64,
    coercivity_upper: f64,
}

impl std::fmt::Debug for EnergyDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnergyDensity")
            .field("components", &self.components())
            .field("coercivity_lower", &self.coercivity_lower)
            .field("coercivity_upper", &self.coercivity_upper)
            .finish()
    }
}

/// Sample count for the coercivity estimate of [`EnergyDensity::new`].
pub const DEFAULT_COERCIVITY_SAMPLES: usize = 2000;
const COERCIVITY_SEED: u64 = 0x5eed_c0e5;

impl EnergyDensity {
    /// Wraps an already normalized density and samples its coercivity constants.
    pub fn new(function: Arc<dyn DensityFunction>, space: &ValueSpace) -> Result<Self> {
        if function.components() != space.components() {
            return Err(Error::Dimension(format!(
                "density has {} components, value space {}",
                function.components(),
                space.components()
            )));
        }
        let (lower, upper) =
            estimate_coercivity(function.as_ref(), space, DEFAULT_COERCIVITY_SAMPLES, COERCIVITY_SEED)?;
        Ok(Self {
            function,
            space: space.clone(),
            coercivity_lower: lower,
            coercivity_upper: upper,
        })
    }

    pub fn with_constants(function: Arc<dyn DensityFunction>, space: &ValueSpace, lower: f64, upper: f64) -> Self {
        Self {
            function,
            space: space.clone(),
            coercivity_lower: lower,
            coercivity_upper: upper,
        }
    }

    pub fn components(&self) -> usize {
        self.function.components()
    }

    pub fn space(&self) -> &ValueSpace {
        &self.space
    }

    pub fn coercivity_lower(&self) -> f64 {
        self.coercivity_lower
    }

    pub fn coercivity_upper(&self) -> f64 {
        self.coercivity_upper
    }

    pub fn function(&self) -> &dyn DensityFunction {
        self.function.as_ref()
    }

    pub fn function_arc(&self) -> Arc<dyn DensityFunction> {
        Arc::clone(&self.function)
    }

    pub fn value(&self, p: &[f64], z: &[f64]) -> f64 {
        self.function.value(p, z)
    }

    pub fn grad_p(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        let n = p.len();
        let (mut gp, mut gz) = (vec![0.0; n], vec![0.0; n]);
        self.function.gradient(p, z, &mut gp, &mut gz);
        gp
    }

    pub fn grad_z(&self, p: &[f64], z: &[f64]) -> Vec<f64> {
        let n = p.len();
        let (mut gp, mut gz) = (vec![0.0; n], vec![0.0; n]);
        self.function.gradient(p, z, &mut gp, &mut gz);
        gz
    }

    pub fn hessian(&self, p: &[f64], z: &[f64]) -> DMatrix<f64> {
        self.function.hessian(p, z)
    }
}

/// Builds the (generalized) Cahn–Hilliard density, normalized at the reference state.
pub fn make_cahn_hilliard(params: CahnHilliardParams, space: &ValueSpace) -> Result<EnergyDensity> {
    let n = space.components();
    let gamma = &params.gamma;
    if gamma.nrows() != n || gamma.ncols() != n {
        return Err(Error::InvalidDensity(format!("Γ must be {n}x{n}")));
    }
    if (gamma - gamma.transpose()).amax() > 1e-12 * (1.0 + gamma.amax()) {
        return Err(Error::InvalidDensity("Γ is not symmetric".into()));
    }
    let lambda_min = SymmetricEigen::new(gamma.clone()).eigenvalues.min();
    if !(lambda_min > 0.0) {
        return Err(Error::InvalidDensity(format!("Γ is not positive definite (λ_min = {lambda_min})")));
    }
    if !(params.epsilon >= 0.0) {
        return Err(Error::InvalidDensity("ε must be non-negative".into()));
    }
    if let Some(mu) = &params.a_weights {
        if mu.len() != n {
            return Err(Error::InvalidDensity(format!("{} exponential weights for {n} components", mu.len())));
        }
    }
    if params.psi.coefficients.len() != n {
        return Err(Error::InvalidDensity("Ψ has the wrong number of components".into()));
    }
    // uniform convexity of Ψ on S, sampled
    const PSI_SAMPLES: usize = 1024;
    for s in 0..PSI_SAMPLES {
        let t = (s as f64 + 0.5) / PSI_SAMPLES as f64;
        for j in 0..n {
            let zj = space.lower()[j] + t * (space.upper()[j] - space.lower()[j]);
            let (_, _, d2) = params.psi.eval(j, zj);
            if !(d2 > 0.0) {
                return Err(Error::InvalidDensity(format!(
                    "Ψ is not uniformly convex: ∂²Ψ = {d2} at z_{j} = {zj}"
                )));
            }
        }
    }
    let raw = CahnHilliardRaw { params };
    let normalized = normalize_density(raw, space.reference());
    EnergyDensity::new(Arc::new(normalized), space)
}

/// Samples `(C_f, C̄_f)`: `p` uniform in the ball of radius 10, `z` uniform in `S`.
///
/// Case B uses the extreme eigenvalues of the full Hessian. Case A uses, for the
/// lower constant, the smallest eigenvalue of the Schur complement
/// `H_pp - H_pz H_zz⁺ H_zp`, i.e. the best `C` with `(π,ζ)ᵀH(π,ζ) ≥ C|π|²`.
/// The lower constant is clamped below at `1e-12`.
pub fn estimate_coercivity(
    density: &dyn DensityFunction,
    space: &ValueSpace,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 samples, got {samples}")));
    }
    let n = density.components();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lower, mut upper) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut valid = 0;
    let mut p = vec![0.0; n];
    let mut z = vec![0.0; n];
    for _ in 0..samples {
        // uniform in the ball: normal direction, radius 10·U^{1/n}
        let mut norm = 0.0;
        for v in p.iter_mut() {
            let (a, b): (f64, f64) = (rng.gen::<f64>().max(1e-300), rng.gen());
            *v = (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos();
            norm += *v * *v;
        }
        let radius = 10.0 * rng.gen::<f64>().powf(1.0 / n as f64) / norm.sqrt().max(1e-300);
        for v in p.iter_mut() {
            *v *= radius;
        }
        for j in 0..n {
            z[j] = rng.gen_range(space.lower()[j]..=space.upper()[j]);
        }
        let h = density.hessian(&p, &z);
        if h.iter().any(|v| !v.is_finite()) {
            continue;
        }
        valid += 1;
        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        upper = upper.max(eig.max());
        let low = match space.case() {
            CaseTag::B => eig.min(),
            CaseTag::A => schur_lower_bound(&h, n),
        };
        lower = lower.min(low);
    }
    if valid < samples {
        return Err(Error::DegenerateSampling {
            valid,
            requested: samples,
        });
    }
    Ok((lower.max(1e-12), upper))
}

fn schur_lower_bound(h: &DMatrix<f64>, n: usize) -> f64 {
    let hpp = h.view((0, 0), (n, n)).into_owned();
    let hpz = h.view((0, n), (n, n)).into_owned();
    let hzz = h.view((n, n), (n, n)).into_owned();
    let eig = SymmetricEigen::new(hzz);
    let scale = eig.eigenvalues.amax().max(1e-300);
    // pseudo-inverse of H_zz; a p-z coupling outside its range makes the form unbounded below
    let mut pinv = DMatrix::zeros(n, n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        if lam > 1e-12 * scale {
            pinv += (v * v.transpose()) / lam;
        } else if lam < -1e-12 * scale || (&hpz * v).amax() > 1e-10 * (1.0 + hpz.amax()) {
            return f64::NEG_INFINITY;
        }
    }
    let schur = &hpp - &hpz * pinv * hpz.transpose();
    SymmetricEigen::new(schur).eigenvalues.min()
}

fn check_field(density: &EnergyDensity, u: &GridField) -> Result<()> {
    u.validate_in(&density.space)
}

/// Half-cell contribution `½Δx [f(g, a) + f(g, b)]` of one interior face.
pub(crate) fn face_term_value(density: &dyn DensityFunction, dx: f64, a: &[f64], b: &[f64], g: &mut [f64]) -> f64 {
    for j in 0..a.len() {
        g[j] = (b[j] - a[j]) / dx;
    }
    0.5 * dx * (density.value(g, a) + density.value(g, b))
}

/// Gradient and Hessian of the face term with respect to `(a, b) ∈ ℝ^{2n}`.
pub(crate) fn face_term_derivatives(
    density: &dyn DensityFunction,
    dx: f64,
    a: &[f64],
    b: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = a.len();
    let g: Vec<f64> = (0..n).map(|j| (b[j] - a[j]) / dx).collect();
    let mut grad = DVector::zeros(2 * n);
    let mut hess = DMatrix::zeros(2 * n, 2 * n);
    let mut value = 0.0;
    let (mut gp, mut gz) = (vec![0.0; n], vec![0.0; n]);
    for (side, z) in [(0usize, a), (1usize, b)] {
        value += 0.5 * dx * density.value(&g, z);
        density.gradient(&g, z, &mut gp, &mut gz);
        // map (a,b) -> (p,z) = (g, side value)
        let mut lmap = DMatrix::zeros(2 * n, 2 * n);
        for j in 0..n {
            lmap[(j, j)] = -1.0 / dx;
            lmap[(j, n + j)] = 1.0 / dx;
            lmap[(n + j, side * n + j)] = 1.0;
        }
        let local_grad = DVector::from_iterator(2 * n, gp.iter().chain(gz.iter()).copied());
        grad += lmap.transpose() * local_grad * (0.5 * dx);
        let h = density.hessian(&g, z);
        hess += lmap.transpose() * h * &lmap * (0.5 * dx);
    }
    (value, grad, hess)
}

/// Boundary half-cell contribution `½Δx f(0, a)` and its derivatives in `a`.
pub(crate) fn boundary_term_derivatives(
    density: &dyn DensityFunction,
    dx: f64,
    a: &[f64],
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = a.len();
    let zero = vec![0.0; n];
    let (mut gp, mut gz) = (vec![0.0; n], vec![0.0; n]);
    density.gradient(&zero, a, &mut gp, &mut gz);
    let h = density.hessian(&zero, a);
    let value = 0.5 * dx * density.value(&zero, a);
    let grad = DVector::from_column_slice(&gz) * (0.5 * dx);
    let hess = h.view((n, n), (n, n)).into_owned() * (0.5 * dx);
    (value, grad, hess)
}

pub(crate) fn energy_unchecked(density: &dyn DensityFunction, u: &GridField) -> f64 {
    let grid = u.grid();
    let (cells, dx) = (grid.cells(), grid.spacing());
    let n = u.components();
    let zero = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut left = u.state_at(0);
    let mut total = 0.5 * dx * density.value(&zero, &left);
    for f in 1..cells {
        let right = u.state_at(f);
        total += face_term_value(density, dx, &left, &right, &mut g);
        left = right;
    }
    total + 0.5 * dx * density.value(&zero, &left)
}

/// Discrete free energy `E(u)`.
pub fn discrete_energy(density: &EnergyDensity, u: &GridField) -> Result<f64> {
    check_field(density, u)?;
    Ok(energy_unchecked(density.function(), u))
}

/// Variational derivative `Z = ∇_z f − D*(∇_p f)` of the discrete energy.
///
/// `Z` is the L²-gradient: `dE/du_{j,i} = Δx · Z_{j,i}`.
pub fn energy_gradient(density: &EnergyDensity, u: &GridField) -> Result<GridField> {
    check_field(density, u)?;
    Ok(variational_derivative(density.function(), u))
}

pub(crate) fn variational_derivative(density: &dyn DensityFunction, u: &GridField) -> GridField {
    let grid = u.grid();
    let (cells, faces, dx) = (grid.cells(), grid.faces(), grid.spacing());
    let n = u.components();
    let mut z_part = vec![0.0; n * cells];
    let mut flux = vec![0.0; n * faces];
    let (mut gp, mut gz) = (vec![0.0; n], vec![0.0; n]);
    let zero = vec![0.0; n];
    // boundary half cells
    for &i in &[0, cells - 1] {
        let s = u.state_at(i);
        density.gradient(&zero, &s, &mut gp, &mut gz);
        for j in 0..n {
            z_part[j * cells + i] += 0.5 * gz[j];
        }
    }
    let mut g = vec![0.0; n];
    for f in 1..cells {
        let a = u.state_at(f - 1);
        let b = u.state_at(f);
        for j in 0..n {
            g[j] = (b[j] - a[j]) / dx;
        }
        for (cell, z) in [(f - 1, &a), (f, &b)] {
            density.gradient(&g, z, &mut gp, &mut gz);
            for j in 0..n {
                z_part[j * cells + cell] += 0.5 * gz[j];
                flux[j * faces + f] += 0.5 * gp[j];
            }
        }
    }
    let div = crate::grid::divergence(grid, n, &flux);
    let values = z_part.iter().zip(&div).map(|(a, d)| a - d).collect();
    GridField::new(grid, n, values).expect("shape is consistent")
}

/// Face mobility `m_j((u_{f-1} + u_f)/2)` for interior faces, zero on the boundary.
pub(crate) fn face_mobilities(pairs: &[EntropyMobilityPair], u: &GridField) -> Vec<f64> {
    let grid = u.grid();
    let (cells, faces) = (grid.cells(), grid.faces());
    let mut out = vec![0.0; u.components() * faces];
    for (j, pair) in pairs.iter().enumerate() {
        let c = u.component(j);
        for f in 1..cells {
            out[j * faces + f] = pair.mobility(0.5 * (c[f - 1] + c[f]));
        }
    }
    out
}

/// Discrete `𝔑(u)[ρ] = Σ Δx · div(M(u) Dρ) · Z(u)`.
pub fn nonlinear_operator(
    density: &EnergyDensity,
    pairs: &[EntropyMobilityPair],
    u: &GridField,
    rho: &GridField,
) -> Result<f64> {
    check_field(density, u)?;
    if rho.grid() != u.grid() || rho.components() != u.components() {
        return Err(Error::GridMismatch);
    }
    if pairs.len() != u.components() {
        return Err(Error::Dimension(format!("{} pairs for {} components", pairs.len(), u.components())));
    }
    let cells = u.grid().cells();
    for j in 0..rho.components() {
        let r = rho.component(j);
        if r[0] != 0.0 || r[cells - 1] != 0.0 {
            return Err(Error::SupportTouchesBoundary);
        }
    }
    let z = variational_derivative(density.function(), u);
    let mob = face_mobilities(pairs, u);
    let mut flux = crate::grid::face_gradient(rho);
    for (w, m) in flux.iter_mut().zip(&mob) {
        *w *= m;
    }
    let div = crate::grid::divergence(u.grid(), u.components(), &flux);
    let dx = u.grid().spacing();
    Ok(dx * div.iter().zip(z.values()).map(|(a, b)| a * b).sum::<f64>())
}

/// `(½C_f‖·‖², ½C̄_f‖·‖²)` bracketing `E(u)`: the gradient seminorm in case A,
/// the full `H¹` norm of `u − z̄` in case B.
pub fn energy_bounds(density: &EnergyDensity, u: &GridField) -> Result<(f64, f64)> {
    check_field(density, u)?;
    let space = &density.space;
    let h1sq = crate::grid::h1_norm(u, space)?.powi(2);
    let lower_norm = match space.case() {
        CaseTag::A => crate::grid::gradient_norm(u).powi(2),
        CaseTag::B => h1sq,
    };
    Ok((
        0.5 * density.coercivity_lower * lower_norm,
        0.5 * density.coercivity_upper * h1sq,
    ))
}
