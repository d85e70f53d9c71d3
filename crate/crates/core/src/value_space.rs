//! Value cuboid, reference state and the per-component entropy/mobility pairs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid::GridField;
use crate::{Error, Result};

/// Position of the reference state inside the value cuboid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseTag {
    /// Reference state at the lower corner; masses are conserved.
    A,
    /// Reference state strictly inside the cuboid.
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
    reference: Vec<f64>,
    case: CaseTag,
}

impl ValueSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, reference: Vec<f64>, case: CaseTag) -> Result<Self> {
        let n = lower.len();
        if n == 0 || upper.len() != n || reference.len() != n {
            return Err(Error::InvalidValueSpace(format!(
                "corner/reference lengths {} / {} / {}",
                lower.len(),
                upper.len(),
                reference.len()
            )));
        }
        for j in 0..n {
            if !(lower[j] < upper[j]) {
                return Err(Error::InvalidInterval {
                    lower: lower[j],
                    upper: upper[j],
                });
            }
            match case {
                CaseTag::A if reference[j] != lower[j] => {
                    return Err(Error::InvalidValueSpace(format!(
                        "case A needs reference = lower corner (component {j})"
                    )))
                }
                CaseTag::B if !(lower[j] < reference[j] && reference[j] < upper[j]) => {
                    return Err(Error::InvalidValueSpace(format!(
                        "case B needs an interior reference state (component {j})"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            lower,
            upper,
            reference,
            case,
        })
    }

    /// Case A cuboid: the reference state is the lower corner.
    pub fn case_a(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let reference = lower.clone();
        Self::new(lower, upper, reference, CaseTag::A)
    }

    pub fn case_b(lower: Vec<f64>, upper: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        Self::new(lower, upper, reference, CaseTag::B)
    }

    pub fn components(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn case(&self) -> CaseTag {
        self.case
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.components()
            && z
                .iter()
                .enumerate()
                .all(|(j, &v)| v >= self.lower[j] && v <= self.upper[j])
    }

    /// Logarithmic entropy/mobility pairs for every component.
    pub fn logarithmic_pairs(&self) -> Vec<EntropyMobilityPair> {
        (0..self.components())
            .map(|j| {
                EntropyMobilityPair::logarithmic(self.lower[j], self.upper[j])
                    .expect("cuboid intervals are validated")
                    .with_component(j)
            })
            .collect()
    }
}

/// `s log s` with the convention `0 log 0 = 0`.
#[inline]
pub(crate) fn xlogx(s: f64) -> f64 {
    if s < 1e-300 {
        0.0
    } else {
        s * s.ln()
    }
}

/// User supplied entropy law, validated against the structural hypotheses at construction.
pub struct CustomLaw {
    entropy: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    entropy_derivative: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    mobility: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomLaw")
    }
}

#[derive(Debug, Clone)]
enum Law {
    Logarithmic,
    Custom(Arc<CustomLaw>),
}

/// Entropy density `h_j` on `[lower, upper]` with its induced mobility `m_j = 1/h_j''`.
///
/// The mobility is extended by zero outside the interval.
#[derive(Debug, Clone)]
pub struct EntropyMobilityPair {
    component: usize,
    lower: f64,
    upper: f64,
    law: Law,
}

/// Interior sample count used to validate custom laws.
const VALIDATION_SAMPLES: usize = 1024;

impl EntropyMobilityPair {
    /// `h(s) = (s-a)log(s-a) + (b-s)log(b-s) - (b-a)log(b-a)`, `m(s) = (s-a)(b-s)/(b-a)`.
    pub fn logarithmic(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidInterval { lower, upper });
        }
        Ok(Self {
            component: 0,
            lower,
            upper,
            law: Law::Logarithmic,
        })
    }

    /// Builds a pair from user supplied `(h, h', m)` and checks endpoint zeros,
    /// sign, convexity, concavity of `m` and the reciprocal identity `h''·m = 1`
    /// at 1024 interior points. `h''` is taken by central differences of `h'`,
    /// so the reciprocal identity is checked to a relative `1e-5`.
    pub fn custom<H, DH, M>(lower: f64, upper: f64, entropy: H, entropy_derivative: DH, mobility: M) -> Result<Self>
    where
        H: Fn(f64) -> f64 + Send + Sync + 'static,
        DH: Fn(f64) -> f64 + Send + Sync + 'static,
        M: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(lower < upper) {
            return Err(Error::InvalidInterval { lower, upper });
        }
        let pair = Self {
            component: 0,
            lower,
            upper,
            law: Law::Custom(Arc::new(CustomLaw {
                entropy: Box::new(entropy),
                entropy_derivative: Box::new(entropy_derivative),
                mobility: Box::new(mobility),
            })),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn with_component(mut self, component: usize) -> Self {
        self.component = component;
        self
    }

    pub fn component(&self) -> usize {
        self.component
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn is_logarithmic(&self) -> bool {
        matches!(self.law, Law::Logarithmic)
    }

    fn width(&self) -> f64 {
        self.upper - self.lower
    }

    fn validate(&self) -> Result<()> {
        let width = self.width();
        let scale_h = width.max(1e-300);
        let err = |msg: String| Err(Error::InvalidPair(msg));
        if let Law::Custom(law) = &self.law {
            // Endpoint limits, probed just inside the interval.
            let delta = 1e-9 * width;
            for (label, v) in [
                ("h(lower)", (law.entropy)(self.lower + delta)),
                ("h(upper)", (law.entropy)(self.upper - delta)),
                ("m(lower)", (law.mobility)(self.lower + delta)),
                ("m(upper)", (law.mobility)(self.upper - delta)),
            ] {
                if !(v.abs() <= 1e-6 * scale_h) {
                    return err(format!("{label} = {v} should vanish"));
                }
            }
        }
        for i in 0..VALIDATION_SAMPLES {
            let s = self.lower + width * (i as f64 + 0.5) / VALIDATION_SAMPLES as f64;
            let h = self.entropy(s);
            let m = self.mobility(s);
            if h > 1e-12 * scale_h {
                return err(format!("h({s}) = {h} is positive"));
            }
            if !(m > 0.0) {
                return err(format!("m({s}) = {m} is not positive"));
            }
            let h2 = self.entropy_second_derivative(s);
            if !(h2 > 0.0) {
                return err(format!("h''({s}) = {h2} is not positive"));
            }
            let m2 = self.mobility_second_derivative(s);
            if m2 > 1e-6 * (1.0 + m / (width * width)) {
                return err(format!("m''({s}) = {m2} violates concavity"));
            }
            if ((h2 * m) - 1.0).abs() > 1e-5 {
                return err(format!("h''·m = {} at s = {s}", h2 * m));
            }
        }
        Ok(())
    }

    /// Entropy density; endpoint values are the continuous extension (zero).
    pub fn entropy(&self, s: f64) -> f64 {
        match &self.law {
            Law::Logarithmic => {
                let d = self.width();
                let x = (s - self.lower).max(0.0);
                let y = (self.upper - s).max(0.0);
                xlogx(x) + xlogx(y) - xlogx(d)
            }
            Law::Custom(law) => {
                if s <= self.lower || s >= self.upper {
                    0.0
                } else {
                    (law.entropy)(s)
                }
            }
        }
    }

    /// `h'` on the open interval.
    pub fn entropy_derivative(&self, s: f64) -> f64 {
        match &self.law {
            Law::Logarithmic => (s - self.lower).ln() - (self.upper - s).ln(),
            Law::Custom(law) => (law.entropy_derivative)(s),
        }
    }

    /// `h''`; closed form for the logarithmic law, central differences otherwise.
    pub fn entropy_second_derivative(&self, s: f64) -> f64 {
        match &self.law {
            Law::Logarithmic => 1.0 / (s - self.lower) + 1.0 / (self.upper - s),
            Law::Custom(law) => {
                let step = self.fd_step(s);
                ((law.entropy_derivative)(s + step) - (law.entropy_derivative)(s - step)) / (2.0 * step)
            }
        }
    }

    fn fd_step(&self, s: f64) -> f64 {
        let room = (s - self.lower).min(self.upper - s);
        (1e-5 * self.width()).min(1e-3 * room).max(1e-14)
    }

    /// Mobility, extended by zero outside `[lower, upper]`.
    pub fn mobility(&self, s: f64) -> f64 {
        if !(s > self.lower && s < self.upper) {
            return 0.0;
        }
        match &self.law {
            Law::Logarithmic => (s - self.lower) * (self.upper - s) / self.width(),
            Law::Custom(law) => (law.mobility)(s),
        }
    }

    /// `m'` on the closed interval (one-sided at the endpoints), zero outside.
    pub fn mobility_derivative(&self, s: f64) -> f64 {
        if !(s >= self.lower && s <= self.upper) {
            return 0.0;
        }
        match &self.law {
            Law::Logarithmic => (self.upper + self.lower - 2.0 * s) / self.width(),
            Law::Custom(law) => {
                let edge = 1e-6 * self.width();
                if s == self.lower {
                    (law.mobility)(s + edge) / edge
                } else if s == self.upper {
                    -(law.mobility)(s - edge) / edge
                } else {
                    let step = self.fd_step(s);
                    ((law.mobility)(s + step) - (law.mobility)(s - step)) / (2.0 * step)
                }
            }
        }
    }

    pub fn mobility_second_derivative(&self, s: f64) -> f64 {
        if !(s > self.lower && s < self.upper) {
            return 0.0;
        }
        match &self.law {
            Law::Logarithmic => -2.0 / self.width(),
            Law::Custom(law) => {
                let step = self.fd_step(s).max(1e-4 * self.width()).min(0.5 * (s - self.lower).min(self.upper - s));
                ((law.mobility)(s + step) - 2.0 * (law.mobility)(s) + (law.mobility)(s - step)) / (step * step)
            }
        }
    }
}

fn check_pairs(space: &ValueSpace, pairs: &[EntropyMobilityPair]) -> Result<()> {
    if pairs.len() != space.components() {
        return Err(Error::Dimension(format!(
            "{} pairs for {} components",
            pairs.len(),
            space.components()
        )));
    }
    Ok(())
}

/// Pointwise heat entropy density: `h(z)` in case A, the Bregman form around the
/// reference state in case B.
pub fn heat_entropy_density(space: &ValueSpace, pairs: &[EntropyMobilityPair], z: &[f64]) -> Result<f64> {
    check_pairs(space, pairs)?;
    if z.len() != space.components() {
        return Err(Error::Dimension(format!("state of length {}", z.len())));
    }
    let mut total = 0.0;
    for (j, pair) in pairs.iter().enumerate() {
        let v = z[j];
        if !(v >= space.lower[j] && v <= space.upper[j]) {
            return Err(Error::OutsideValueSpace {
                component: j,
                cell: 0,
                value: v,
                lower: space.lower[j],
                upper: space.upper[j],
            });
        }
        total += component_density(space, pair, j, v);
    }
    Ok(total)
}

#[inline]
fn component_density(space: &ValueSpace, pair: &EntropyMobilityPair, j: usize, v: f64) -> f64 {
    match space.case {
        CaseTag::A => pair.entropy(v),
        CaseTag::B => {
            let zr = space.reference[j];
            pair.entropy(v) - pair.entropy(zr) - pair.entropy_derivative(zr) * (v - zr)
        }
    }
}

/// Heat entropy of a field by midpoint quadrature.
pub fn heat_entropy(space: &ValueSpace, pairs: &[EntropyMobilityPair], u: &GridField) -> Result<f64> {
    check_pairs(space, pairs)?;
    u.validate_in(space)?;
    let dx = u.grid().spacing();
    let mut total = 0.0;
    for (j, pair) in pairs.iter().enumerate() {
        for &v in u.component(j) {
            total += dx * component_density(space, pair, j, v);
        }
    }
    Ok(total)
}

/// Constant `C` with `H(u) <= C ||u - z̄||²` in case B: half the largest `h''`
/// over the value range spanned by the field and the reference state.
pub fn heat_entropy_bound_constant(space: &ValueSpace, pairs: &[EntropyMobilityPair], u: &GridField) -> Result<f64> {
    check_pairs(space, pairs)?;
    u.validate_in(space)?;
    let mut c: f64 = 0.0;
    for (j, pair) in pairs.iter().enumerate() {
        let zr = space.reference[j];
        let values = u.component(j);
        let lo = values.iter().copied().fold(zr, f64::min);
        let hi = values.iter().copied().fold(zr, f64::max);
        if lo <= space.lower[j] || hi >= space.upper[j] {
            return Ok(f64::INFINITY);
        }
        const PROBES: usize = 64;
        for i in 0..=PROBES {
            let s = lo + (hi - lo) * i as f64 / PROBES as f64;
            c = c.max(0.5 * pair.entropy_second_derivative(s));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid1D;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> EntropyMobilityPair {
        EntropyMobilityPair::logarithmic(0.0, 1.0).unwrap()
    }

    #[test]
    fn logarithmic_pair_values() {
        let p = unit();
        assert_eq!(p.mobility(0.0), 0.0);
        assert_eq!(p.mobility(1.0), 0.0);
        assert_relative_eq!(p.mobility(0.5), 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.mobility(0.25), 0.1875, epsilon = 1e-15);
        assert_relative_eq!(p.entropy(0.5), -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(p.entropy(0.25), -0.562_335_144_618_808_6, epsilon = 1e-12);
        assert_eq!(p.entropy(0.0), 0.0);
        assert_eq!(p.entropy(1.0), 0.0);
        assert!(p.entropy(1e-320).is_finite());
    }

    #[test]
    fn rejects_empty_interval() {
        assert!(matches!(
            EntropyMobilityPair::logarithmic(1.0, 1.0),
            Err(Error::InvalidInterval { .. })
        ));
        assert!(EntropyMobilityPair::logarithmic(2.0, -1.0).is_err());
    }

    #[test]
    fn reciprocal_identity_and_concavity() {
        for (a, b) in [(0.0, 1.0), (-2.0, 3.0), (0.1, 0.2)] {
            let p = EntropyMobilityPair::logarithmic(a, b).unwrap();
            for i in 1..1024 {
                let s = a + (b - a) * i as f64 / 1024.0;
                let prod = p.entropy_second_derivative(s) * p.mobility(s);
                assert!((prod - 1.0).abs() < 1e-10, "h''m = {prod}");
                assert!(p.mobility_second_derivative(s) <= 1e-10);
                assert!(p.entropy(s) <= 0.0);
            }
        }
    }

    #[test]
    fn mobility_is_zero_outside() {
        let p = unit();
        assert_eq!(p.mobility(-0.1), 0.0);
        assert_eq!(p.mobility(1.5), 0.0);
    }

    #[test]
    fn heat_density_examples() {
        let space_b = ValueSpace::case_b(vec![0.0], vec![1.0], vec![0.5]).unwrap();
        let pairs = space_b.logarithmic_pairs();
        assert_eq!(heat_entropy_density(&space_b, &pairs, &[0.5]).unwrap(), 0.0);
        let v = heat_entropy_density(&space_b, &pairs, &[0.75]).unwrap();
        assert_relative_eq!(v, 0.130_812_035_941_137_6, epsilon = 1e-9);
        let space_a = ValueSpace::case_a(vec![0.0], vec![1.0]).unwrap();
        let v = heat_entropy_density(&space_a, &pairs, &[0.5]).unwrap();
        assert_relative_eq!(v, -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(heat_entropy_density(&space_a, &pairs, &[0.0]).unwrap(), 0.0);
        assert!(heat_entropy_density(&space_a, &pairs, &[1.5]).is_err());
    }

    #[test]
    fn case_invariants_of_value_space() {
        assert!(ValueSpace::new(vec![0.0], vec![1.0], vec![0.2], CaseTag::A).is_err());
        assert!(ValueSpace::new(vec![0.0], vec![1.0], vec![0.0], CaseTag::B).is_err());
        assert!(ValueSpace::new(vec![0.0], vec![1.0], vec![1.0], CaseTag::B).is_err());
        assert!(ValueSpace::new(vec![0.0, 0.0], vec![1.0], vec![0.0, 0.0], CaseTag::A).is_err());
    }

    #[test]
    fn heat_entropy_case_b_bound() {
        let grid = Grid1D::new(4.0, 128).unwrap();
        let space = ValueSpace::case_b(vec![0.0], vec![1.0], vec![0.5]).unwrap();
        let pairs = space.logarithmic_pairs();
        let u = GridField::from_fn(grid, 1, |_, x| 0.5 + 0.1 * (-x * x).exp());
        let h = heat_entropy(&space, &pairs, &u).unwrap();
        let c = heat_entropy_bound_constant(&space, &pairs, &u).unwrap();
        let l2sq = crate::grid::l2_norm(&u, &space).unwrap().powi(2);
        assert!(h >= 0.0);
        assert!(h <= c * l2sq, "{h} > {c} * {l2sq}");
        let zero = GridField::constant(grid, space.reference());
        assert_eq!(heat_entropy(&space, &pairs, &zero).unwrap(), 0.0);
    }

    #[test]
    fn heat_entropy_sign_on_random_fields() {
        let grid = Grid1D::new(2.0, 32).unwrap();
        let space_a = ValueSpace::case_a(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let space_b = ValueSpace::case_b(vec![0.0, -1.0], vec![1.0, 1.0], vec![0.3, 0.2]).unwrap();
        let pairs = space_a.logarithmic_pairs();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let values: Vec<f64> = (0..64)
                .map(|i| if i < 32 { rng.gen_range(0.0..=1.0) } else { rng.gen_range(-1.0..=1.0) })
                .collect();
            let u = GridField::new(grid, 2, values).unwrap();
            assert!(heat_entropy(&space_a, &pairs, &u).unwrap() <= 0.0);
            assert!(heat_entropy(&space_b, &pairs, &u).unwrap() >= 0.0);
        }
    }

    #[test]
    fn half_holder_bound_of_entropy() {
        // K fitted once on a 4001² grid of pairs: sup |h(s)-h(t)|/|s-t|^0.5 ≈ 1.125 on [0,1].
        const K_HALF: f64 = 1.25;
        let p = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20_000 {
            let s: f64 = rng.gen();
            let t: f64 = rng.gen();
            let lhs = (p.entropy(s) - p.entropy(t)).abs();
            assert!(lhs <= K_HALF * (s - t).abs().sqrt() + 1e-15);
        }
    }

    #[test]
    fn custom_law_accepts_scaled_logarithmic() {
        let base = EntropyMobilityPair::logarithmic(0.0, 2.0).unwrap();
        let (b1, b2, b3) = (base.clone(), base.clone(), base);
        let custom = EntropyMobilityPair::custom(
            0.0,
            2.0,
            move |s| 2.0 * b1.entropy(s),
            move |s| 2.0 * b2.entropy_derivative(s),
            move |s| 0.5 * b3.mobility(s),
        )
        .unwrap();
        assert_relative_eq!(custom.mobility(1.0), 0.25, epsilon = 1e-15);
        assert!(custom.mobility_second_derivative(1.0) < 0.0);
    }

    #[test]
    fn custom_law_rejects_mismatched_mobility() {
        let base = EntropyMobilityPair::logarithmic(0.0, 1.0).unwrap();
        let (b1, b2) = (base.clone(), base);
        let res = EntropyMobilityPair::custom(
            0.0,
            1.0,
            move |s| b1.entropy(s),
            move |s| b2.entropy_derivative(s),
            |s| 2.0 * s * (1.0 - s),
        );
        assert!(matches!(res, Err(Error::InvalidPair(_))));
        let res = EntropyMobilityPair::custom(0.0, 1.0, |s| s * (s - 1.0), |s| 2.0 * s - 1.0, |_| 0.5);
        assert!(res.is_err());
    }
}
