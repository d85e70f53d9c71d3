//! Independent conic formulation of the tiny transport problems, solved by
//! clarabel. Densities and momenta are explicit variables, continuity is an
//! equality constraint and the action `Σ Δs Δx w²/(ū(1−ū))` is represented by
//! rotated second-order cones (value space `[0, 1]`, logarithmic mobility).

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

type Expr = (Vec<(usize, f64)>, f64);

struct Program {
    vars: usize,
    zero: Vec<Expr>,
    nonneg: Vec<Expr>,
    soc: Vec<[Expr; 3]>,
}

impl Program {
    fn var(&mut self) -> usize {
        self.vars += 1;
        self.vars - 1
    }

    fn solve(self, linear: Vec<(usize, f64)>, quadratic: Vec<(usize, usize, f64)>) -> f64 {
        let n = self.vars;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut b = Vec::new();
        // A x + s = b with s in the cone, so s = expr means A = −coefficients, b = constant
        let mut push = |e: &Expr| {
            let mut row = vec![0.0; n];
            for &(i, c) in &e.0 {
                row[i] -= c;
            }
            rows.push(row);
            b.push(e.1);
        };
        self.zero.iter().for_each(&mut push);
        self.nonneg.iter().for_each(&mut push);
        for cone in &self.soc {
            cone.iter().for_each(&mut push);
        }
        let mut cones = vec![
            SupportedConeT::ZeroConeT(self.zero.len()),
            SupportedConeT::NonnegativeConeT(self.nonneg.len()),
        ];
        cones.extend(self.soc.iter().map(|_| SupportedConeT::SecondOrderConeT(3)));
        let mut p = vec![vec![0.0; n]; n];
        for (i, j, v) in quadratic {
            p[i.min(j)][i.max(j)] += v;
        }
        let mut q = vec![0.0; n];
        for (i, c) in linear {
            q[i] += c;
        }
        let p = CscMatrix::from(&p);
        let a = CscMatrix::from(&rows);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-12)
            .tol_gap_rel(1e-12)
            .tol_feas(1e-12)
            .max_iter(500)
            .build()
            .unwrap();
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings).unwrap();
        solver.solve();
        assert!(
            matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved),
            "oracle status {:?}",
            solver.solution.status
        );
        solver.solution.obj_val
    }
}

fn constant(c: f64) -> Expr {
    (Vec::new(), c)
}

fn variable(i: usize) -> Expr {
    (vec![(i, 1.0)], 0.0)
}

fn combine(terms: &[(&Expr, f64)]) -> Expr {
    let mut out: Expr = (Vec::new(), 0.0);
    for (e, s) in terms {
        out.0.extend(e.0.iter().map(|&(i, c)| (i, c * s)));
        out.1 += e.1 * s;
    }
    out
}

/// Builds densities, momenta and action cones; returns the program, the
/// density expressions per level and the action objective.
fn transport(start: &[f64], end: Option<&[f64]>, dx: f64, steps: usize) -> (Program, Vec<Vec<Expr>>, Vec<(usize, f64)>) {
    let cells = start.len();
    let ds = 1.0 / steps as f64;
    let mut prog = Program { vars: 0, zero: Vec::new(), nonneg: Vec::new(), soc: Vec::new() };
    let mut rho: Vec<Vec<Expr>> = Vec::new();
    for k in 0..=steps {
        let level = match (k, end) {
            (0, _) => start.iter().map(|&v| constant(v)).collect(),
            (k, Some(e)) if k == steps => e.iter().map(|&v| constant(v)).collect(),
            _ => (0..cells)
                .map(|_| {
                    let v = prog.var();
                    prog.nonneg.push(variable(v));
                    prog.nonneg.push((vec![(v, -1.0)], 1.0));
                    variable(v)
                })
                .collect(),
        };
        rho.push(level);
    }
    let mut objective = Vec::new();
    for k in 0..steps {
        let w: Vec<Expr> = (0..=cells)
            .map(|f| if f == 0 || f == cells { constant(0.0) } else { variable(prog.var()) })
            .collect();
        for i in 0..cells {
            prog.zero.push(combine(&[
                (&rho[k + 1][i], 1.0 / ds),
                (&rho[k][i], -1.0 / ds),
                (&w[i + 1], 1.0 / dx),
                (&w[i], -1.0 / dx),
            ]));
        }
        for f in 1..cells {
            let (t, v) = (variable(prog.var()), variable(prog.var()));
            objective.push((t.0[0].0, ds * dx));
            let mean = combine(&[
                (&rho[k][f - 1], 0.25),
                (&rho[k][f], 0.25),
                (&rho[k + 1][f - 1], 0.25),
                (&rho[k + 1][f], 0.25),
            ]);
            // w² ≤ t·v
            prog.soc.push([combine(&[(&t, 1.0), (&v, 1.0)]), combine(&[(&w[f], 2.0)]), combine(&[(&t, 1.0), (&v, -1.0)])]);
            // v ≤ ū(1 − ū)
            let gap = combine(&[(&mean, 1.0), (&v, -1.0)]);
            prog.soc.push([
                combine(&[(&gap, 1.0), (&constant(1.0), 1.0)]),
                combine(&[(&mean, 2.0)]),
                combine(&[(&gap, 1.0), (&constant(1.0), -1.0)]),
            ]);
        }
    }
    (prog, rho, objective)
}

/// Squared distance between two densities of equal mass.
pub fn distance_squared(u0: &[f64], u1: &[f64], dx: f64, steps: usize) -> f64 {
    let (prog, _, objective) = transport(u0, Some(u1), dx, steps);
    prog.solve(objective, Vec::new())
}

/// Minimal value of `action/(2τ) + E(ρ^K)` for the density
/// `f = ½p² + (z − z̄)²` with face-quadrature energy.
pub fn jko_objective(u_prev: &[f64], dx: f64, steps: usize, tau: f64, reference: f64) -> f64 {
    let cells = u_prev.len();
    let (prog, rho, action) = transport(u_prev, None, dx, steps);
    let mut linear: Vec<(usize, f64)> = action.into_iter().map(|(i, c)| (i, c / (2.0 * tau))).collect();
    let end: Vec<usize> = rho[steps].iter().map(|e| e.0[0].0).collect();
    let mut quadratic = Vec::new();
    // ½xᵀPx: gradient part Σ_f ½Δx((x_f − x_{f−1})/Δx)², potential part Δx Σ (x_i − z̄)²
    for f in 1..cells {
        let (a, b) = (end[f - 1], end[f]);
        let c = 1.0 / dx;
        quadratic.extend([(a, a, c), (b, b, c), (a, b, -c)]);
    }
    for &i in &end {
        quadratic.push((i, i, 2.0 * dx));
        linear.push((i, -2.0 * dx * reference));
    }
    prog.solve(linear, quadratic) + dx * cells as f64 * reference * reference
}
