mod support {
    pub mod oracle;
}

use mmflow_core::free_energy::{make_cahn_hilliard, CahnHilliardParams};
use mmflow_core::jko::jko_step;
use mmflow_core::transport::distance;
use mmflow_core::{Grid1D, GridField, SolverMethod, SolverOptions, ValueSpace};
use support::oracle;

fn field(values: &[f64]) -> GridField {
    GridField::new(Grid1D::tiny(1.0, values.len()).unwrap(), 1, values.to_vec()).unwrap()
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn distance_matches_conic_oracle() {
    let space = ValueSpace::case_b(vec![0.0], vec![1.0], vec![0.5]).unwrap();
    let pairs = space.logarithmic_pairs();
    let cases: [([f64; 4], [f64; 4]); 3] = [
        ([0.3, 0.5, 0.6, 0.4], [0.45, 0.45, 0.45, 0.45]),
        ([0.2, 0.7, 0.5, 0.4], [0.5, 0.3, 0.4, 0.6]),
        ([0.9, 0.5, 0.1, 0.3], [0.2, 0.3, 0.5, 0.8]),
    ];
    for (a, b) in cases {
        let (u0, u1) = (field(&a), field(&b));
        let dx = u0.grid().spacing();
        let expected = oracle::distance_squared(&a, &b, dx, 2);
        assert!(expected > 1e-4);
        for method in [SolverMethod::Newton, SolverMethod::PrimalDual] {
            let opts = SolverOptions { tolerance: 1e-10, method, ..SolverOptions::default() };
            let got = distance(&u0, &u1, &pairs, 2, &opts).unwrap().value.powi(2);
            assert!(relative(got, expected) < 1e-5, "{method:?}: {got} vs {expected}");
        }
    }
}

#[test]
fn jko_objective_matches_conic_oracle() {
    let space = ValueSpace::case_b(vec![0.0], vec![1.0], vec![0.5]).unwrap();
    let density = make_cahn_hilliard(CahnHilliardParams::reference_1d(0.5), &space).unwrap();
    let pairs = space.logarithmic_pairs();
    for (values, tau) in [([0.4, 0.6, 0.55, 0.45], 0.1), ([0.2, 0.8, 0.7, 0.3], 0.05), ([0.1, 0.3, 0.6, 0.9], 1.0)] {
        let u = field(&values);
        let dx = u.grid().spacing();
        let expected = oracle::jko_objective(&values, dx, 2, tau, 0.5);
        let step = jko_step(&u, &density, &pairs, tau, 2, &SolverOptions::default()).unwrap();
        assert!(relative(step.objective, expected) < 1e-5, "{} vs {expected}", step.objective);
    }
}
