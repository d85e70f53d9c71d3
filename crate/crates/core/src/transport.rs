//! Dynamic transport distance with nonlinear mobility.
//!
//! A path carries densities at inner-time nodes `k = 0..=K` and momenta on
//! faces at inner-time midpoints. The discrete continuity equation
//!
//! ```text
//! (ρ^{k+1}_i − ρ^k_i)/Δs + (w^k_{i+1} − w^k_i)/Δx = 0
//! ```
//!
//! holds exactly when both are written through the time-integrated face flux
//! `G^k_f = Δs Σ_{l<k} w^l_f` (the mass moved across face `f` up to level `k`):
//! `ρ^k = ρ^0 − D G^k` and `w^k = (G^{k+1} − G^k)/Δs`. The default solver
//! minimizes in these flux variables with a damped Newton method; a
//! proximal splitting method built on [`perspective_prox`] is available as an
//! alternative.

use serde::{Deserialize, Serialize};

use crate::banded::{BandedMatrix, ScaledCholesky};
use crate::free_energy::{boundary_term_derivatives, energy_unchecked, face_term_derivatives, DensityFunction};
use crate::grid::{Grid1D, GridField};
use crate::value_space::EntropyMobilityPair;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPath {
    grid: Grid1D,
    components: usize,
    inner_steps: usize,
    densities: Vec<f64>,
    momenta: Vec<f64>,
}

impl TransportPath {
    /// `densities` is `(K+1) × n × N`, `momenta` is `K × n × (N+1)`, both
    /// row-major in that order. Boundary momenta must be zero.
    pub fn new(grid: Grid1D, components: usize, inner_steps: usize, densities: Vec<f64>, momenta: Vec<f64>) -> Result<Self> {
        let (cells, faces) = (grid.cells(), grid.faces());
        if inner_steps == 0 || components == 0 {
            return Err(Error::Dimension("a path needs at least one inner step and one component".into()));
        }
        if densities.len() != (inner_steps + 1) * components * cells {
            return Err(Error::Dimension(format!("densities have length {}", densities.len())));
        }
        if momenta.len() != inner_steps * components * faces {
            return Err(Error::Dimension(format!("momenta have length {}", momenta.len())));
        }
        for row in momenta.chunks(faces) {
            if row[0] != 0.0 || row[faces - 1] != 0.0 {
                return Err(Error::InvalidArgument("boundary momenta must vanish".into()));
            }
        }
        Ok(Self {
            grid,
            components,
            inner_steps,
            densities,
            momenta,
        })
    }

    /// The path that stays at `u` with zero momentum.
    pub fn constant(u: &GridField, inner_steps: usize) -> Self {
        let inner_steps = inner_steps.max(1);
        let grid = u.grid();
        let n = u.components();
        let densities = u.values().repeat(inner_steps + 1);
        Self {
            grid,
            components: n,
            inner_steps,
            densities,
            momenta: vec![0.0; inner_steps * n * grid.faces()],
        }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }

    pub fn inner_step_size(&self) -> f64 {
        1.0 / self.inner_steps as f64
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn momenta(&self) -> &[f64] {
        &self.momenta
    }

    pub fn density_values(&self, k: usize, j: usize) -> &[f64] {
        let cells = self.grid.cells();
        let start = (k * self.components + j) * cells;
        &self.densities[start..start + cells]
    }

    pub fn momentum_values(&self, k: usize, j: usize) -> &[f64] {
        let faces = self.grid.faces();
        let start = (k * self.components + j) * faces;
        &self.momenta[start..start + faces]
    }

    /// Density at inner-time node `k` as a field.
    pub fn density(&self, k: usize) -> GridField {
        let len = self.components * self.grid.cells();
        GridField::new(self.grid, self.components, self.densities[k * len..(k + 1) * len].to_vec())
            .expect("shape is consistent")
    }
}

/// `φ(w, m)`: `w²/m` for `m > 0`, `0` for `w = 0`, `+∞` otherwise.
pub fn perspective(w: f64, m: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else if m > 0.0 {
        w * w / m
    } else {
        f64::INFINITY
    }
}

fn check_pairs(pairs: &[EntropyMobilityPair], components: usize) -> Result<()> {
    if pairs.len() != components {
        return Err(Error::Dimension(format!("{} pairs for {components} components", pairs.len())));
    }
    Ok(())
}

/// Per-inner-step contributions `Σ_{j,f} Δs Δx φ(w, m(ū))`.
pub fn action_per_step(path: &TransportPath, pairs: &[EntropyMobilityPair]) -> Result<Vec<f64>> {
    check_pairs(pairs, path.components)?;
    let cells = path.grid.cells();
    let weight = path.inner_step_size() * path.grid.spacing();
    Ok((0..path.inner_steps)
        .map(|k| {
            let mut total = 0.0;
            for (j, pair) in pairs.iter().enumerate() {
                let (a, b) = (path.density_values(k, j), path.density_values(k + 1, j));
                let w = path.momentum_values(k, j);
                for f in 1..cells {
                    let ubar = 0.25 * (a[f - 1] + a[f] + b[f - 1] + b[f]);
                    total += perspective(w[f], pair.mobility(ubar));
                }
            }
            weight * total
        })
        .collect())
}

/// Discrete kinetic action; `+∞` if some flux crosses a face of zero mobility.
pub fn action(path: &TransportPath, pairs: &[EntropyMobilityPair]) -> Result<f64> {
    Ok(action_per_step(path, pairs)?.iter().sum())
}

/// Largest violation of the discrete continuity equation.
pub fn continuity_residual(path: &TransportPath) -> f64 {
    let cells = path.grid.cells();
    let (ds, dx) = (path.inner_step_size(), path.grid.spacing());
    let mut worst: f64 = 0.0;
    for k in 0..path.inner_steps {
        for j in 0..path.components {
            let (a, b) = (path.density_values(k, j), path.density_values(k + 1, j));
            let w = path.momentum_values(k, j);
            for i in 0..cells {
                let r = (b[i] - a[i]) / ds + (w[i + 1] - w[i]) / dx;
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

/// Proximal map of `σ φ(w, m(ρ))`: the minimizer of
/// `σ φ(w', m(ρ')) + ½(w' − w)² + ½(ρ' − ρ)²` over `ρ' ∈ [S^ℓ, S^r]`.
///
/// Eliminating `w' = w m/(m + 2σ)` leaves the convex scalar problem
/// `σw²/(m(ρ') + 2σ) + ½(ρ' − ρ)²`, whose derivative is monotone; its root is
/// found by safeguarded Newton to `1e-12`.
pub fn perspective_prox(w: f64, rho_context: f64, sigma: f64, pair: &EntropyMobilityPair) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("prox step {sigma} must be positive")));
    }
    let (lo, hi) = (pair.lower(), pair.upper());
    let sw2 = sigma * w * w;
    let slope = |r: f64| {
        let d = pair.mobility(r) + 2.0 * sigma;
        -sw2 * pair.mobility_derivative(r) / (d * d) + (r - rho_context)
    };
    let curvature = |r: f64| {
        let m = pair.mobility(r);
        let (m1, m2) = (pair.mobility_derivative(r), pair.mobility_second_derivative(r));
        let d = m + 2.0 * sigma;
        1.0 - sw2 * (m2 * d - 2.0 * m1 * m1) / (d * d * d)
    };
    let (g_lo, g_hi) = (slope(lo), slope(hi));
    if !g_lo.is_finite() || !g_hi.is_finite() {
        return Err(Error::Bracket);
    }
    let rho = if g_lo >= 0.0 {
        lo
    } else if g_hi <= 0.0 {
        hi
    } else {
        let (mut a, mut b) = (lo, hi);
        let mut r = rho_context.clamp(lo, hi);
        let mut converged = false;
        for _ in 0..200 {
            let g = slope(r);
            if g == 0.0 {
                converged = true;
                break;
            }
            if g < 0.0 {
                a = r;
            } else {
                b = r;
            }
            if b - a <= 1e-12 {
                r = 0.5 * (a + b);
                converged = true;
                break;
            }
            let step = r - g / curvature(r);
            r = if step > a && step < b { step } else { 0.5 * (a + b) };
            if (r - step).abs() == 0.0 && (g / curvature(r)).abs() <= 1e-13 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Bracket);
        }
        r
    };
    let m = pair.mobility(rho);
    Ok((w * m / (m + 2.0 * sigma), rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Damped Newton in time-integrated flux variables.
    #[default]
    Newton,
    /// Alternating-direction proximal splitting with the pointwise perspective prox.
    PrimalDual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub method: SolverMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 200_000,
            method: SolverMethod::Newton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: SolverMethod,
    pub iterations: usize,
    /// Newton decrement, or the larger of primal and dual residual for the splitting method.
    pub residual: f64,
    pub constraint_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct DistanceResult {
    pub value: f64,
    pub path: TransportPath,
    pub report: SolveReport,
}

/// Affine function of the flux variables with at most eight terms.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearForm {
    idx: [usize; 8],
    coef: [f64; 8],
    len: usize,
    constant: f64,
}

impl LinearForm {
    fn constant(c: f64) -> Self {
        Self {
            idx: [0; 8],
            coef: [0.0; 8],
            len: 0,
            constant: c,
        }
    }

    fn push(&mut self, idx: usize, coef: f64) {
        for t in 0..self.len {
            if self.idx[t] == idx {
                self.coef[t] += coef;
                return;
            }
        }
        self.idx[self.len] = idx;
        self.coef[self.len] = coef;
        self.len += 1;
    }

    fn add_scaled(&mut self, other: &LinearForm, s: f64) {
        self.constant += s * other.constant;
        for t in 0..other.len {
            self.push(other.idx[t], s * other.coef[t]);
        }
    }

    fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx[..self.len].iter().copied().zip(self.coef[..self.len].iter().copied())
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.terms().fold(self.constant, |acc, (i, c)| acc + c * x[i])
    }
}

/// Adds `Σ_a grad_a c_a` to `g` and `Σ_ab hess(a,b) c_a c_bᵀ` to the lower band of `h`.
fn accumulate(g: &mut [f64], h: &mut BandedMatrix, forms: &[LinearForm], grad: &[f64], hess: impl Fn(usize, usize) -> f64) {
    for (a, fa) in forms.iter().enumerate() {
        for (i, c) in fa.terms() {
            g[i] += grad[a] * c;
        }
        for (b, fb) in forms.iter().enumerate() {
            let hab = hess(a, b);
            if hab == 0.0 {
                continue;
            }
            for (i, ci) in fa.terms() {
                for (k, ck) in fb.terms() {
                    if i >= k {
                        h.add_lower(i, k, hab * ci * ck);
                    }
                }
            }
        }
    }
}

/// The discrete minimization problem over paths in flux variables `G^k_f`,
/// free for interior faces and levels `1..=free_levels`.
///
/// Variable `(f, j, k)` sits at `((f−1)·n + j)·free_levels + (k−1)`, so the
/// Hessian is banded.
pub(crate) struct PathProblem<'a> {
    grid: Grid1D,
    components: usize,
    inner_steps: usize,
    free_levels: usize,
    start: Vec<f64>,
    /// Fixed final density and its flux, for distance problems.
    end: Option<(Vec<f64>, Vec<f64>)>,
    weight: f64,
    energy: Option<&'a dyn DensityFunction>,
    pairs: &'a [EntropyMobilityPair],
}

impl<'a> PathProblem<'a> {
    pub fn distance(u0: &GridField, u1: &GridField, pairs: &'a [EntropyMobilityPair], inner_steps: usize) -> Result<Self> {
        if u0.grid() != u1.grid() || u0.components() != u1.components() {
            return Err(Error::GridMismatch);
        }
        check_pairs(pairs, u0.components())?;
        if inner_steps == 0 {
            return Err(Error::InvalidArgument("need at least one inner step".into()));
        }
        check_in_pairs(u0, pairs)?;
        check_in_pairs(u1, pairs)?;
        let grid = u0.grid();
        let (cells, faces, dx) = (grid.cells(), grid.faces(), grid.spacing());
        let n = u0.components();
        let mut flux = vec![0.0; n * faces];
        for j in 0..n {
            let (a, b) = (u0.component(j), u1.component(j));
            let mut acc = 0.0;
            for f in 1..faces {
                acc += dx * (a[f - 1] - b[f - 1]);
                if f < cells {
                    flux[j * faces + f] = acc;
                }
            }
            let (ma, mb) = (dx * a.iter().sum::<f64>(), dx * b.iter().sum::<f64>());
            if (ma - mb).abs() > 1e-8 * ma.abs().max(1.0) {
                return Err(Error::MassMismatch {
                    component: j,
                    left: ma,
                    right: mb,
                });
            }
        }
        Ok(Self {
            grid,
            components: n,
            inner_steps,
            free_levels: inner_steps - 1,
            start: u0.values().to_vec(),
            end: Some((u1.values().to_vec(), flux)),
            weight: 1.0,
            energy: None,
            pairs,
        })
    }

    pub fn jko(
        u_prev: &GridField,
        energy: &'a dyn DensityFunction,
        pairs: &'a [EntropyMobilityPair],
        tau: f64,
        inner_steps: usize,
    ) -> Result<Self> {
        check_pairs(pairs, u_prev.components())?;
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("time step {tau} must be positive")));
        }
        if inner_steps == 0 {
            return Err(Error::InvalidArgument("need at least one inner step".into()));
        }
        Ok(Self {
            grid: u_prev.grid(),
            components: u_prev.components(),
            inner_steps,
            free_levels: inner_steps,
            start: u_prev.values().to_vec(),
            end: None,
            weight: 0.5 / tau,
            energy: Some(energy),
            pairs,
        })
    }

    pub fn dim(&self) -> usize {
        (self.grid.cells() - 1) * self.components * self.free_levels
    }

    fn bandwidth(&self) -> usize {
        let (n, lv) = (self.components, self.free_levels);
        (2 * n * lv + 1).max((3 * n).saturating_sub(1) * lv)
    }

    fn var(&self, f: usize, j: usize, k: usize) -> usize {
        ((f - 1) * self.components + j) * self.free_levels + (k - 1)
    }

    fn is_free(&self, k: usize) -> bool {
        k >= 1 && k <= self.free_levels
    }

    fn fixed_flux(&self, k: usize, j: usize, f: usize) -> f64 {
        match (&self.end, k == self.inner_steps) {
            (Some((_, flux)), true) => flux[j * self.grid.faces() + f],
            _ => 0.0,
        }
    }

    fn flux_form(&self, k: usize, j: usize, f: usize) -> LinearForm {
        if f == 0 || f == self.grid.cells() {
            LinearForm::constant(0.0)
        } else if self.is_free(k) {
            let mut form = LinearForm::constant(0.0);
            form.push(self.var(f, j, k), 1.0);
            form
        } else {
            LinearForm::constant(self.fixed_flux(k, j, f))
        }
    }

    fn density_form(&self, k: usize, j: usize, i: usize) -> LinearForm {
        let cells = self.grid.cells();
        match (&self.end, k) {
            (_, 0) => LinearForm::constant(self.start[j * cells + i]),
            (Some((end, _)), k) if k == self.inner_steps => LinearForm::constant(end[j * cells + i]),
            _ => {
                let inv_dx = 1.0 / self.grid.spacing();
                let mut form = LinearForm::constant(self.start[j * cells + i]);
                form.add_scaled(&self.flux_form(k, j, i), inv_dx);
                form.add_scaled(&self.flux_form(k, j, i + 1), -inv_dx);
                form
            }
        }
    }

    fn flux(&self, x: &[f64], k: usize, j: usize, f: usize) -> f64 {
        if f == 0 || f == self.grid.cells() {
            0.0
        } else if self.is_free(k) {
            x[self.var(f, j, k)]
        } else {
            self.fixed_flux(k, j, f)
        }
    }

    /// All level densities, `(K+1) × n × N`.
    fn densities(&self, x: &[f64]) -> Vec<f64> {
        let cells = self.grid.cells();
        let n = self.components;
        let inv_dx = 1.0 / self.grid.spacing();
        let mut out = Vec::with_capacity((self.inner_steps + 1) * n * cells);
        for k in 0..=self.inner_steps {
            match (&self.end, k) {
                (_, 0) => out.extend_from_slice(&self.start),
                (Some((end, _)), k) if k == self.inner_steps => out.extend_from_slice(end),
                _ => {
                    for j in 0..n {
                        for i in 0..cells {
                            let moved = self.flux(x, k, j, i) - self.flux(x, k, j, i + 1);
                            out.push(self.start[j * cells + i] + inv_dx * moved);
                        }
                    }
                }
            }
        }
        out
    }

    fn momenta(&self, x: &[f64]) -> Vec<f64> {
        let faces = self.grid.faces();
        let inv_ds = self.inner_steps as f64;
        let mut out = vec![0.0; self.inner_steps * self.components * faces];
        for k in 0..self.inner_steps {
            for j in 0..self.components {
                for f in 1..faces - 1 {
                    out[(k * self.components + j) * faces + f] = inv_ds * (self.flux(x, k + 1, j, f) - self.flux(x, k, j, f));
                }
            }
        }
        out
    }

    pub fn path(&self, x: &[f64]) -> TransportPath {
        TransportPath::new(self.grid, self.components, self.inner_steps, self.densities(x), self.momenta(x))
            .expect("shape is consistent")
    }

    /// `weight · action + E(ρ^K)`; `+∞` if a free density leaves the open cuboid.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let (cells, n) = (self.grid.cells(), self.components);
        let rho = self.densities(x);
        for k in 1..=self.free_levels {
            for (j, pair) in self.pairs.iter().enumerate() {
                let row = &rho[(k * n + j) * cells..(k * n + j + 1) * cells];
                if row.iter().any(|&v| !(v > pair.lower() && v < pair.upper())) {
                    return f64::INFINITY;
                }
            }
        }
        let path = TransportPath {
            grid: self.grid,
            components: n,
            inner_steps: self.inner_steps,
            densities: rho,
            momenta: self.momenta(x),
        };
        let kinetic: f64 = action_per_step(&path, self.pairs).expect("pairs checked").iter().sum();
        let mut total = self.weight * kinetic;
        if let Some(energy) = self.energy {
            total += energy_unchecked(energy, &path.density(self.inner_steps));
        }
        total
    }

    /// Number of barrier terms weighted by `Δx` (the duality gap factor).
    fn barrier_terms(&self) -> f64 {
        2.0 * (self.free_levels * self.components * self.grid.cells()) as f64 * self.grid.spacing()
    }

    /// `Σ Δx [−ln((ρ−a)/d) − ln((b−ρ)/d)]` over free densities.
    fn barrier(&self, x: &[f64]) -> f64 {
        let (cells, n, dx) = (self.grid.cells(), self.components, self.grid.spacing());
        let rho = self.densities(x);
        let mut total = 0.0;
        for k in 1..=self.free_levels {
            for (j, pair) in self.pairs.iter().enumerate() {
                let (a, b) = (pair.lower(), pair.upper());
                let d = b - a;
                for &v in &rho[(k * n + j) * cells..(k * n + j + 1) * cells] {
                    total -= dx * (((v - a) / d).ln() + ((b - v) / d).ln());
                }
            }
        }
        total
    }

    fn barrier_derivatives(&self, x: &[f64], mu: f64, g: &mut [f64], h: &mut BandedMatrix) {
        let dx = self.grid.spacing();
        for k in 1..=self.free_levels {
            for (j, pair) in self.pairs.iter().enumerate() {
                let (a, b) = (pair.lower(), pair.upper());
                for i in 0..self.grid.cells() {
                    let form = self.density_form(k, j, i);
                    let v = form.eval(x);
                    let (l, r) = (1.0 / (v - a), 1.0 / (b - v));
                    let grad = [mu * dx * (r - l)];
                    let hess = mu * dx * (l * l + r * r);
                    accumulate(g, h, &[form], &grad, |_, _| hess);
                }
            }
        }
    }

    /// `(w, ū)` forms of every interior face term with its component.
    fn kinetic_terms(&self) -> Vec<(usize, LinearForm, LinearForm)> {
        let cells = self.grid.cells();
        let inv_ds = self.inner_steps as f64;
        let mut out = Vec::with_capacity(self.inner_steps * self.components * (cells - 1));
        for k in 0..self.inner_steps {
            for j in 0..self.components {
                for f in 1..cells {
                    let mut w = LinearForm::constant(0.0);
                    w.add_scaled(&self.flux_form(k + 1, j, f), inv_ds);
                    w.add_scaled(&self.flux_form(k, j, f), -inv_ds);
                    let mut u = LinearForm::constant(0.0);
                    for level in [k, k + 1] {
                        u.add_scaled(&self.density_form(level, j, f - 1), 0.25);
                        u.add_scaled(&self.density_form(level, j, f), 0.25);
                    }
                    out.push((j, w, u));
                }
            }
        }
        out
    }

    /// Gradient and banded Hessian of [`objective`](Self::objective).
    pub fn derivatives(&self, x: &[f64]) -> (Vec<f64>, BandedMatrix) {
        let dim = self.dim();
        let mut g = vec![0.0; dim];
        let mut h = BandedMatrix::zeros(dim, self.bandwidth());
        let c = self.weight * self.grid.spacing() / self.inner_steps as f64;
        for (j, wf, uf) in self.kinetic_terms() {
            let (w, u) = (wf.eval(x), uf.eval(x));
            let pair = &self.pairs[j];
            let m = pair.mobility(u);
            if !(m > 0.0) {
                continue;
            }
            let (m1, m2) = (pair.mobility_derivative(u), pair.mobility_second_derivative(u));
            let grad = [2.0 * c * w / m, -c * w * w * m1 / (m * m)];
            let hww = 2.0 * c / m;
            let hwu = -2.0 * c * w * m1 / (m * m);
            let huu = c * w * w * (2.0 * m1 * m1 / (m * m * m) - m2 / (m * m));
            accumulate(&mut g, &mut h, &[wf, uf], &grad, |a, b| match (a, b) {
                (0, 0) => hww,
                (1, 1) => huu,
                _ => hwu,
            });
        }
        if let Some(energy) = self.energy {
            self.energy_derivatives(energy, x, &mut g, &mut h);
        }
        (g, h)
    }

    fn energy_derivatives(&self, energy: &dyn DensityFunction, x: &[f64], g: &mut [f64], h: &mut BandedMatrix) {
        let (cells, n, dx) = (self.grid.cells(), self.components, self.grid.spacing());
        let k = self.inner_steps;
        let cell_forms = |i: usize| -> Vec<LinearForm> { (0..n).map(|j| self.density_form(k, j, i)).collect() };
        let values = |forms: &[LinearForm]| -> Vec<f64> { forms.iter().map(|f| f.eval(x)).collect() };
        for i in [0, cells - 1] {
            let forms = cell_forms(i);
            let (_, grad, hess) = boundary_term_derivatives(energy, dx, &values(&forms));
            accumulate(g, h, &forms, grad.as_slice(), |a, b| hess[(a, b)]);
        }
        for f in 1..cells {
            let mut forms = cell_forms(f - 1);
            let right = cell_forms(f);
            let (a, b) = (values(&forms), values(&right));
            forms.extend(right);
            let (_, grad, hess) = face_term_derivatives(energy, dx, &a, &b);
            accumulate(g, h, &forms, grad.as_slice(), |a, b| hess[(a, b)]);
        }
    }

    /// Linear interpolation between the endpoints (distance) or zero flux (JKO).
    pub fn initial_point(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if self.end.is_some() {
            for f in 1..self.grid.cells() {
                for j in 0..self.components {
                    let total = self.fixed_flux(self.inner_steps, j, f);
                    for k in 1..=self.free_levels {
                        x[self.var(f, j, k)] = total * k as f64 / self.inner_steps as f64;
                    }
                }
            }
        }
        x
    }
}

fn check_in_pairs(u: &GridField, pairs: &[EntropyMobilityPair]) -> Result<()> {
    for (j, pair) in pairs.iter().enumerate() {
        for (i, &v) in u.component(j).iter().enumerate() {
            if !(v >= pair.lower() && v <= pair.upper()) {
                return Err(Error::OutsideValueSpace {
                    component: j,
                    cell: i,
                    value: v,
                    lower: pair.lower(),
                    upper: pair.upper(),
                });
            }
        }
    }
    Ok(())
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const PLAIN_NEWTON_CAP: usize = 30;
const BARRIER_START: f64 = 1e-3;
const BARRIER_REDUCTION: f64 = 0.1;
/// Below one ulp of the objective, a decrement that shrinks by less than this
/// factor per iteration is roundoff and ends the run as converged.
const STALL_RATIO: f64 = 1e-2;

struct NewtonRun {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    decrement: f64,
    converged: bool,
}

/// Damped Newton on `objective + mu·barrier` until the squared decrement drops
/// below `tol²(1+|J|)` or stagnates at roundoff level, the line search stalls, or `cap` iterations pass.
fn newton_run(problem: &PathProblem, mut x: Vec<f64>, mu: f64, tol: f64, cap: usize) -> Result<NewtonRun> {
    let eval = |x: &[f64]| problem.objective(x) + if mu > 0.0 { mu * problem.barrier(x) } else { 0.0 };
    let mut value = eval(&x);
    let mut decrement = f64::INFINITY;
    for iteration in 0..cap {
        let (mut g, mut h) = problem.derivatives(&x);
        if mu > 0.0 {
            problem.barrier_derivatives(&x, mu, &mut g, &mut h);
        }
        let chol = ScaledCholesky::new(&h).ok_or(Error::NotConverged {
            iterations: iteration,
            best_value: value,
            residual: decrement,
        })?;
        let d: Vec<f64> = chol.solve(&g).iter().map(|v| -v).collect();
        let previous = decrement;
        decrement = -g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        let stalled = decrement <= f64::EPSILON * (1.0 + value.abs()) && decrement > STALL_RATIO * previous;
        if !(decrement > tol * tol * (1.0 + value.abs())) || stalled {
            return Ok(NewtonRun { x, value, iterations: iteration, decrement: decrement.max(0.0), converged: true });
        }
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = x.clone();
        for _ in 0..MAX_HALVINGS {
            for ((xt, xi), di) in trial.iter_mut().zip(&x).zip(&d) {
                *xt = xi + t * di;
            }
            let candidate = eval(&trial);
            if candidate <= value - ARMIJO * t * decrement {
                value = candidate;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // roundoff floor: the decrement is already at the level of the objective's precision
            let converged = decrement <= tol * (1.0 + value.abs());
            return Ok(NewtonRun { x, value, iterations: iteration, decrement, converged });
        }
        std::mem::swap(&mut x, &mut trial);
    }
    Ok(NewtonRun { x, value, iterations: cap, decrement, converged: false })
}

/// Damped Newton from a point of finite objective. Returns the minimizer, its
/// objective value and the iteration count and final decrement.
///
/// When plain Newton stalls against the constraint `ρ ∈ S` (the minimizer has
/// densities on `∂S`), the run continues as a log-barrier path-following
/// method with the barrier weight driven down until the duality gap bound is
/// below the tolerance.
pub(crate) fn newton_minimize(problem: &PathProblem, x: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, f64, usize, f64)> {
    let value = problem.objective(&x);
    if !value.is_finite() {
        return Err(Error::InvalidArgument("initial path has infinite objective".into()));
    }
    if problem.dim() == 0 {
        return Ok((x, value, 0, 0.0));
    }
    let tol = opts.tolerance;
    let plain = newton_run(problem, x, 0.0, tol, opts.max_iterations.min(PLAIN_NEWTON_CAP))?;
    if plain.converged {
        return Ok((plain.x, plain.value, plain.iterations, plain.decrement.sqrt()));
    }
    let mut used = plain.iterations;
    let scale = 1.0 + plain.value.abs();
    let terms = problem.barrier_terms();
    let target = 1e-2 * tol * scale / terms;
    let mut mu = BARRIER_START * scale / terms;
    let mut x = plain.x;
    loop {
        let last = mu <= target;
        let stage_tol = if last { tol } else { tol.sqrt() };
        let run = newton_run(problem, x, mu, stage_tol, opts.max_iterations.saturating_sub(used))?;
        used += run.iterations;
        x = run.x;
        if !run.converged {
            return Err(Error::NotConverged {
                iterations: used,
                best_value: problem.objective(&x),
                residual: run.decrement.sqrt(),
            });
        }
        if last {
            return Ok((x.clone(), problem.objective(&x), used, run.decrement.sqrt()));
        }
        mu = (mu * BARRIER_REDUCTION).max(target);
    }
}

/// Proximal splitting for the distance problem: consensus `y = P x + q` between
/// the path (flux variables) and per-face `(w, ū)` copies, with the kinetic
/// term handled by [`perspective_prox`] on the copies.
fn splitting_minimize(problem: &PathProblem, opts: &SolverOptions) -> Result<(Vec<f64>, f64, usize, f64)> {
    let dim = problem.dim();
    let c = problem.grid.spacing() / problem.inner_steps as f64;
    let terms = problem.kinetic_terms();
    let mut x = problem.initial_point();
    if dim == 0 {
        return Ok((x.clone(), problem.objective(&x), 0, 0.0));
    }
    let mut normal = BandedMatrix::zeros(dim, problem.bandwidth());
    let mut scratch = vec![0.0; dim];
    for (_, wf, uf) in &terms {
        accumulate(&mut scratch, &mut normal, &[*wf, *uf], &[0.0, 0.0], |a, b| if a == b { 1.0 } else { 0.0 });
    }
    let chol = ScaledCholesky::new(&normal).ok_or(Error::NotConverged {
        iterations: 0,
        best_value: f64::INFINITY,
        residual: f64::INFINITY,
    })?;
    let eval = |x: &[f64]| -> Vec<[f64; 2]> { terms.iter().map(|(_, wf, uf)| [wf.eval(x), uf.eval(x)]).collect() };
    let transpose = |v: &[[f64; 2]]| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for ((_, wf, uf), vv) in terms.iter().zip(v) {
            for (i, coef) in wf.terms() {
                out[i] += coef * vv[0];
            }
            for (i, coef) in uf.terms() {
                out[i] += coef * vv[1];
            }
        }
        out
    };
    let constants: Vec<[f64; 2]> = terms.iter().map(|(_, wf, uf)| [wf.constant, uf.constant]).collect();
    let mut y = eval(&x);
    let mut dual = vec![[0.0; 2]; terms.len()];
    let mut rho = 1.0;
    let objective = |y: &[[f64; 2]]| -> f64 {
        terms
            .iter()
            .zip(y)
            .map(|((j, _, _), yy)| c * perspective(yy[0], problem.pairs[*j].mobility(yy[1])))
            .sum()
    };
    let tol = opts.tolerance;
    let mut residual = f64::INFINITY;
    for iteration in 1..=opts.max_iterations {
        // x-update: least squares fit of P x to y − dual − q
        let target: Vec<[f64; 2]> = y
            .iter()
            .zip(&dual)
            .zip(&constants)
            .map(|((yy, dd), qq)| [yy[0] - dd[0] - qq[0], yy[1] - dd[1] - qq[1]])
            .collect();
        x = chol.solve(&transpose(&target));
        let px = eval(&x);
        let previous = y.clone();
        for (t, (j, _, _)) in terms.iter().enumerate() {
            let v = [px[t][0] + dual[t][0], px[t][1] + dual[t][1]];
            let (w, u) = perspective_prox(v[0], v[1], c / rho, &problem.pairs[*j])?;
            y[t] = [w, u];
        }
        let mut primal: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for t in 0..terms.len() {
            for s in 0..2 {
                let r = px[t][s] - y[t][s];
                dual[t][s] += r;
                primal = primal.max(r.abs());
                scale = scale.max(y[t][s].abs());
            }
        }
        let change: Vec<[f64; 2]> = y.iter().zip(&previous).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
        let dual_residual = rho * transpose(&change).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dual_scale = rho * transpose(&dual).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        residual = primal.max(dual_residual);
        if primal <= tol * (1.0 + scale) && dual_residual <= tol * (1.0 + dual_scale) {
            return Ok((x, objective(&y), iteration, residual));
        }
        if iteration % 20 == 0 {
            let factor = if primal > 10.0 * dual_residual {
                2.0
            } else if dual_residual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                for d in dual.iter_mut() {
                    d[0] /= factor;
                    d[1] /= factor;
                }
            }
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iterations,
        best_value: objective(&y).sqrt(),
        residual,
    })
}

/// Transport distance between two fields of equal componentwise mass.
///
/// The Newton method starts from the linear interpolation; if that path has
/// infinite action (endpoints touching `∂S` in the same cells), the splitting
/// method is used instead.
pub fn distance(
    u0: &GridField,
    u1: &GridField,
    pairs: &[EntropyMobilityPair],
    inner_steps: usize,
    opts: &SolverOptions,
) -> Result<DistanceResult> {
    let problem = PathProblem::distance(u0, u1, pairs, inner_steps)?;
    let x0 = problem.initial_point();
    let use_newton = opts.method == SolverMethod::Newton && problem.objective(&x0).is_finite();
    let (x, value, iterations, residual, method) = if use_newton {
        let (x, value, it, res) = newton_minimize(&problem, x0, opts)?;
        (x, value, it, res, SolverMethod::Newton)
    } else {
        let (x, value, it, res) = splitting_minimize(&problem, opts)?;
        (x, value, it, res, SolverMethod::PrimalDual)
    };
    let path = problem.path(&x);
    let report = SolveReport {
        method,
        iterations,
        residual,
        constraint_residual: continuity_residual(&path),
        converged: true,
    };
    Ok(DistanceResult {
        value: value.max(0.0).sqrt(),
        path,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value_space::ValueSpace;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_pairs() -> Vec<EntropyMobilityPair> {
        vec![EntropyMobilityPair::logarithmic(0.0, 1.0).unwrap()]
    }

    fn bump(grid: Grid1D, center: f64, height: f64) -> GridField {
        GridField::from_fn(grid, 1, |_, x| 0.3 + height * (-(x - center).powi(2) * 4.0).exp())
    }

    /// Adds a zero-mass correction so both fields share the mass of `a`.
    fn match_mass(a: &GridField, b: &GridField) -> GridField {
        let dx = a.grid().spacing();
        let (ma, mb) = (dx * a.values().iter().sum::<f64>(), dx * b.values().iter().sum::<f64>());
        let shift = (ma - mb) / (dx * a.values().len() as f64);
        GridField::new(a.grid(), 1, b.values().iter().map(|v| v + shift).collect()).unwrap()
    }

    #[test]
    fn action_examples() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let pairs = unit_pairs();
        let u = GridField::constant(grid, &[0.4]);
        let path = TransportPath::constant(&u, 3);
        assert_eq!(action(&path, &pairs).unwrap(), 0.0);
        assert_eq!(continuity_residual(&path), 0.0);

        let zero = GridField::constant(grid, &[0.0]);
        let mut momenta = vec![0.0; grid.faces()];
        momenta[3] = 0.1;
        let degenerate = TransportPath::new(grid, 1, 1, zero.values().repeat(2), momenta).unwrap();
        assert_eq!(action(&degenerate, &pairs).unwrap(), f64::INFINITY);

        let mut bad = vec![0.0; grid.faces()];
        bad[0] = 1.0;
        assert!(TransportPath::new(grid, 1, 1, zero.values().repeat(2), bad).is_err());
    }

    #[test]
    fn action_matches_explicit_sum() {
        let grid = Grid1D::tiny(1.0, 4).unwrap();
        let (dx, ds) = (0.5, 0.5);
        let pairs = unit_pairs();
        let rho0 = [0.2, 0.4, 0.6, 0.3];
        let w0 = [0.0, 0.1, -0.05, 0.02, 0.0];
        let w1 = [0.0, -0.03, 0.04, 0.01, 0.0];
        // build feasible densities from continuity
        let step = |rho: &[f64; 4], w: &[f64; 5]| -> [f64; 4] {
            let mut out = [0.0; 4];
            for i in 0..4 {
                out[i] = rho[i] - ds * (w[i + 1] - w[i]) / dx;
            }
            out
        };
        let rho1 = step(&rho0, &w0);
        let rho2 = step(&rho1, &w1);
        let densities = [rho0, rho1, rho2].concat();
        let path = TransportPath::new(grid, 1, 2, densities, [w0, w1].concat()).unwrap();
        assert!(continuity_residual(&path) < 1e-14);
        let m = |s: f64| s * (1.0 - s);
        let mut expected = 0.0;
        for (k, (a, b, w)) in [(rho0, rho1, w0), (rho1, rho2, w1)].iter().enumerate() {
            let _ = k;
            for f in 1..4 {
                let ubar = (a[f - 1] + a[f] + b[f - 1] + b[f]) / 4.0;
                expected += ds * dx * w[f] * w[f] / m(ubar);
            }
        }
        assert_relative_eq!(action(&path, &pairs).unwrap(), expected, max_relative = 1e-14);
        let masses: Vec<f64> = (0..3).map(|k| path.density_values(k, 0).iter().sum::<f64>()).collect();
        assert_relative_eq!(masses[0], masses[2], epsilon = 1e-14);
    }

    #[test]
    fn continuity_residual_detects_perturbation() {
        let grid = Grid1D::new(1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = GridField::constant(grid, &[0.5]);
        let path = TransportPath::constant(&u, 2);
        let mut momenta = path.momenta().to_vec();
        for f in 1..grid.cells() {
            momenta[f] = rng.gen_range(-1.0..1.0);
        }
        let perturbed = TransportPath::new(grid, 1, 2, path.densities().to_vec(), momenta.clone()).unwrap();
        let dx = grid.spacing();
        let expected = (0..grid.cells()).map(|i| ((momenta[i + 1] - momenta[i]) / dx).abs()).fold(0.0, f64::max);
        assert!(expected > 0.0);
        assert_relative_eq!(continuity_residual(&perturbed), expected, max_relative = 1e-14);
    }

    fn prox_objective(w: f64, rho: f64, sigma: f64, wp: f64, rp: f64) -> f64 {
        let m = rp * (1.0 - rp);
        sigma * perspective(wp, m) + 0.5 * (wp - w).powi(2) + 0.5 * (rp - rho).powi(2)
    }

    #[test]
    fn prox_examples() {
        let pair = &unit_pairs()[0];
        assert_eq!(perspective_prox(0.0, 0.37, 1.0, pair).unwrap(), (0.0, 0.37));
        let (w, r) = perspective_prox(0.3, 0.5, 1e-12, pair).unwrap();
        assert!((w - 0.3).abs() < 1e-9 && (r - 0.5).abs() < 1e-9);
        assert!(perspective_prox(0.3, 0.5, 0.0, pair).is_err());

        let (w, r) = perspective_prox(0.3, 0.5, 1.0, pair).unwrap();
        let best = prox_objective(0.3, 0.5, 1.0, w, r);
        // dense grid search, then local refinement around the best cell
        let (mut bw, mut br, mut bv) = (0.0, 0.0, f64::INFINITY);
        for a in 0..=400 {
            for b in 1..400 {
                let (wp, rp) = (0.3 * a as f64 / 400.0, b as f64 / 400.0);
                let v = prox_objective(0.3, 0.5, 1.0, wp, rp);
                if v < bv {
                    (bw, br, bv) = (wp, rp, v);
                }
            }
        }
        let mut h = 2e-3;
        for _ in 0..40 {
            h *= 0.7;
            for a in -20..=20 {
                for b in -20..=20 {
                    let (wp, rp) = (bw + h * a as f64 / 20.0, br + h * b as f64 / 20.0);
                    let v = prox_objective(0.3, 0.5, 1.0, wp, rp);
                    if v < bv {
                        (bw, br, bv) = (wp, rp, v);
                    }
                }
            }
        }
        assert!((w - bw).abs() < 1e-6 && (r - br).abs() < 1e-6, "({w},{r}) vs ({bw},{br})");
        assert!(best <= bv + 1e-12);
    }

    #[test]
    fn prox_is_optimal_on_random_inputs() {
        let pair = EntropyMobilityPair::logarithmic(-1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let (w, rho, sigma) = (rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..3.0), 10f64.powf(rng.gen_range(-4.0..1.0)));
            let (wp, rp) = perspective_prox(w, rho, sigma, &pair).unwrap();
            assert!((-1.0..=2.0).contains(&rp));
            let obj = |a: f64, b: f64| sigma * perspective(a, pair.mobility(b)) + 0.5 * (a - w).powi(2) + 0.5 * (b - rho).powi(2);
            let v = obj(wp, rp);
            for _ in 0..20 {
                let (a, b) = (wp + rng.gen_range(-1e-3..1e-3), (rp + rng.gen_range(-1e-3..1e-3)).clamp(-1.0, 2.0));
                assert!(obj(a, b) >= v - 1e-12, "w={w} rho={rho} sigma={sigma}: ({wp},{rp}) {v} vs ({a},{b}) {}", obj(a, b));
            }
        }
    }

    #[test]
    fn distance_to_self_is_zero() {
        let grid = Grid1D::new(2.0, 16).unwrap();
        let u = bump(grid, 0.0, 0.3);
        let d = distance(&u, &u, &unit_pairs(), 4, &SolverOptions::default()).unwrap();
        assert_eq!(d.value, 0.0);
        assert_eq!(d.path, TransportPath::constant(&u, 4));
    }

    #[test]
    fn distance_rejects_mass_mismatch() {
        let grid = Grid1D::new(2.0, 16).unwrap();
        let a = bump(grid, 0.0, 0.3);
        let b = bump(grid, 0.0, 0.2);
        assert!(matches!(
            distance(&a, &b, &unit_pairs(), 4, &SolverOptions::default()),
            Err(Error::MassMismatch { .. })
        ));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let grid = Grid1D::new(2.0, 10).unwrap();
        let pairs = unit_pairs();
        let a = bump(grid, -0.5, 0.3);
        let b = match_mass(&a, &bump(grid, 0.6, 0.25));
        let problem = PathProblem::distance(&a, &b, &pairs, 3).unwrap();
        let mut x = problem.initial_point();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in x.iter_mut() {
            *v += 1e-3 * rng.gen_range(-1.0..1.0);
        }
        check_derivatives(&problem, &x);

        let space = ValueSpace::case_b(vec![0.0], vec![1.0], vec![0.5]).unwrap();
        let energy = crate::free_energy::make_cahn_hilliard(crate::CahnHilliardParams::reference_1d(0.5), &space).unwrap();
        let jko = PathProblem::jko(&a, energy.function(), &pairs, 0.01, 2).unwrap();
        let x: Vec<f64> = (0..jko.dim()).map(|_| 1e-3 * rng.gen_range(-1.0..1.0)).collect();
        check_derivatives(&jko, &x);
    }

    fn check_derivatives(problem: &PathProblem, x: &[f64]) {
        let (g, h) = problem.derivatives(x);
        let step = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += step;
            xm[i] -= step;
            let fd = (problem.objective(&xp) - problem.objective(&xm)) / (2.0 * step);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "gradient {i}: {fd} vs {}", g[i]);
            let (gp, _) = problem.derivatives(&xp);
            let (gm, _) = problem.derivatives(&xm);
            for k in 0..x.len() {
                let fd2 = (gp[k] - gm[k]) / (2.0 * step);
                let exact = h.get(k, i);
                assert!((fd2 - exact).abs() <= 1e-4 * (1.0 + exact.abs()), "hessian ({k},{i}): {fd2} vs {exact}");
            }
        }
    }

    #[test]
    fn splitting_agrees_with_newton() {
        let grid = Grid1D::new(2.0, 12).unwrap();
        let pairs = unit_pairs();
        let a = bump(grid, -0.4, 0.3);
        let b = match_mass(&a, &bump(grid, 0.5, 0.3));
        let newton = distance(&a, &b, &pairs, 4, &SolverOptions::default()).unwrap();
        let opts = SolverOptions {
            tolerance: 1e-7,
            method: SolverMethod::PrimalDual,
            ..SolverOptions::default()
        };
        let split = distance(&a, &b, &pairs, 4, &opts).unwrap();
        assert_eq!(newton.report.method, SolverMethod::Newton);
        assert_eq!(split.report.method, SolverMethod::PrimalDual);
        assert!(newton.report.constraint_residual < 1e-10);
        assert!(split.report.constraint_residual < 1e-10);
        assert!((newton.value - split.value).abs() < 1e-4 * newton.value, "{} vs {}", newton.value, split.value);
    }

    #[test]
    fn boundary_touching_endpoints_fall_back_to_splitting() {
        let grid = Grid1D::new(2.0, 12).unwrap();
        let pairs = unit_pairs();
        let a = GridField::from_fn(grid, 1, |_, x| if x.abs() < 1.0 { 0.5 } else { 0.0 });
        let b = GridField::from_fn(grid, 1, |_, x| if (x - 0.3).abs() < 1.0 { 0.5 } else { 0.0 });
        let opts = SolverOptions {
            tolerance: 1e-6,
            ..SolverOptions::default()
        };
        let d = distance(&a, &b, &pairs, 4, &opts).unwrap();
        assert_eq!(d.report.method, SolverMethod::PrimalDual);
        assert!(d.value.is_finite() && d.value > 0.0);
    }
}
