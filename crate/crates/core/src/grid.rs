//! Truncated uniform grid on `[-L, L]`, cell-centred fields and the discrete
//! calculus used everywhere else.
//!
//! Faces are numbered `0..=N`; face `f` separates cells `f-1` and `f`. The two
//! boundary faces carry zero flux, which is what keeps masses invariant.

use crate::value_space::ValueSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D {
    half_length: f64,
    cells: usize,
}

impl Grid1D {
    pub fn new(half_length: f64, cells: usize) -> Result<Self> {
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(Error::InvalidArgument(format!("half length {half_length} must be positive")));
        }
        if cells < 8 {
            return Err(Error::InvalidArgument(format!("need at least 8 cells, got {cells}")));
        }
        Ok(Self { half_length, cells })
    }

    /// Like [`new`](Self::new) but accepts down to two cells, for hand-sized
    /// verification problems.
    pub fn tiny(half_length: f64, cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 cells, got {cells}")));
        }
        Self::new(half_length, cells.max(8)).map(|g| Self { cells, ..g })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn faces(&self) -> usize {
        self.cells + 1
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_length / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        -self.half_length + (i as f64 + 0.5) * self.spacing()
    }

    pub fn face(&self, f: usize) -> f64 {
        -self.half_length + f as f64 * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    pub fn face_positions(&self) -> Vec<f64> {
        (0..=self.cells).map(|f| self.face(f)).collect()
    }
}

/// Cell-centred values of an `n`-component field, stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid1D,
    components: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid1D, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 || values.len() != components * grid.cells() {
            return Err(Error::Dimension(format!(
                "{} values for {} components on {} cells",
                values.len(),
                components,
                grid.cells()
            )));
        }
        Ok(Self {
            grid,
            components,
            values,
        })
    }

    pub fn zeros(grid: Grid1D, components: usize) -> Self {
        Self {
            grid,
            components,
            values: vec![0.0; components * grid.cells()],
        }
    }

    pub fn constant(grid: Grid1D, state: &[f64]) -> Self {
        Self::from_fn(grid, state.len(), |j, _| state[j])
    }

    /// Samples `value(component, x)` at the cell centres.
    pub fn from_fn(grid: Grid1D, components: usize, value: impl Fn(usize, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(components * grid.cells());
        for j in 0..components {
            for i in 0..grid.cells() {
                values.push(value(j, grid.center(i)));
            }
        }
        Self {
            grid,
            components,
            values,
        }
    }

    pub fn grid(&self) -> Grid1D {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let n = self.grid.cells();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn component_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.grid.cells();
        &mut self.values[j * n..(j + 1) * n]
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.values[j * self.grid.cells() + i]
    }

    /// State vector at cell `i`.
    pub fn state_at(&self, i: usize) -> Vec<f64> {
        (0..self.components).map(|j| self.get(j, i)).collect()
    }

    /// Checks that every value lies in the cuboid.
    pub fn validate_in(&self, space: &ValueSpace) -> Result<()> {
        if space.components() != self.components {
            return Err(Error::Dimension(format!(
                "field has {} components, value space {}",
                self.components,
                space.components()
            )));
        }
        for j in 0..self.components {
            let (lo, hi) = (space.lower()[j], space.upper()[j]);
            for (i, &v) in self.component(j).iter().enumerate() {
                if !(v >= lo && v <= hi) {
                    return Err(Error::OutsideValueSpace {
                        component: j,
                        cell: i,
                        value: v,
                        lower: lo,
                        upper: hi,
                    });
                }
            }
        }
        Ok(())
    }

    /// True if every value lies strictly inside the cuboid.
    pub fn is_interior(&self, space: &ValueSpace) -> bool {
        space.components() == self.components
            && (0..self.components).all(|j| {
                let (lo, hi) = (space.lower()[j], space.upper()[j]);
                self.component(j).iter().all(|&v| v > lo && v < hi)
            })
    }

    /// `self - state`, componentwise.
    pub fn shifted(&self, state: &[f64]) -> GridField {
        let mut out = self.clone();
        for j in 0..self.components {
            for v in out.component_mut(j) {
                *v -= state[j];
            }
        }
        out
    }

    fn same_grid(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid || self.components != other.components {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Face-centred forward differences, `n × (N+1)`; boundary faces are zero.
pub fn face_gradient(field: &GridField) -> Vec<f64> {
    let grid = field.grid();
    let (cells, faces) = (grid.cells(), grid.faces());
    let dx = grid.spacing();
    let mut out = vec![0.0; field.components() * faces];
    for j in 0..field.components() {
        let u = field.component(j);
        let row = &mut out[j * faces..(j + 1) * faces];
        for f in 1..cells {
            row[f] = (u[f] - u[f - 1]) / dx;
        }
    }
    out
}

/// Cell-centred divergence of a face array (`n × (N+1)` in, `n × N` out).
pub fn divergence(grid: Grid1D, components: usize, face_values: &[f64]) -> Vec<f64> {
    let (cells, faces) = (grid.cells(), grid.faces());
    let dx = grid.spacing();
    let mut out = vec![0.0; components * cells];
    for j in 0..components {
        let w = &face_values[j * faces..(j + 1) * faces];
        for i in 0..cells {
            out[j * cells + i] = (w[i + 1] - w[i]) / dx;
        }
    }
    out
}

/// Three-point second difference with zero-flux ghost cells, `n × N`.
pub fn second_difference(field: &GridField) -> Vec<f64> {
    let grid = field.grid();
    let cells = grid.cells();
    let dx2 = grid.spacing() * grid.spacing();
    let mut out = vec![0.0; field.components() * cells];
    for j in 0..field.components() {
        let u = field.component(j);
        for i in 0..cells {
            let left = if i == 0 { u[0] } else { u[i - 1] };
            let right = if i + 1 == cells { u[cells - 1] } else { u[i + 1] };
            out[j * cells + i] = (left - 2.0 * u[i] + right) / dx2;
        }
    }
    out
}

/// Midpoint quadrature of cell values.
pub fn integrate(grid: Grid1D, cellwise: &[f64]) -> f64 {
    grid.spacing() * cellwise.iter().sum::<f64>()
}

fn check_space(u: &GridField, space: &ValueSpace) -> Result<()> {
    if u.components() != space.components() {
        return Err(Error::Dimension(format!(
            "field has {} components, value space {}",
            u.components(),
            space.components()
        )));
    }
    Ok(())
}

/// `∫ (u_j - z̄_j) dx` for every component.
pub fn mass_vector(u: &GridField, space: &ValueSpace) -> Result<Vec<f64>> {
    check_space(u, space)?;
    let grid = u.grid();
    Ok((0..u.components())
        .map(|j| {
            let zr = space.reference()[j];
            grid.spacing() * u.component(j).iter().map(|v| v - zr).sum::<f64>()
        })
        .collect())
}

/// `∫ x² (u_j - z̄_j) dx` for every component.
pub fn second_moment(u: &GridField, space: &ValueSpace) -> Result<Vec<f64>> {
    check_space(u, space)?;
    let grid = u.grid();
    Ok((0..u.components())
        .map(|j| {
            let zr = space.reference()[j];
            grid.spacing()
                * u.component(j)
                    .iter()
                    .enumerate()
                    .map(|(i, v)| grid.center(i).powi(2) * (v - zr))
                    .sum::<f64>()
        })
        .collect())
}

/// `‖u - z̄‖_{L²}` summed over components.
pub fn l2_norm(u: &GridField, space: &ValueSpace) -> Result<f64> {
    check_space(u, space)?;
    let d = u.shifted(space.reference());
    Ok(sum_sq(d.values(), u.grid().spacing()).sqrt())
}

/// `‖∂ₓu‖_{L²}` from face differences (the reference state drops out).
pub fn gradient_norm(u: &GridField) -> f64 {
    sum_sq(&face_gradient(u), u.grid().spacing()).sqrt()
}

/// `‖u - z̄‖_{H¹}`.
pub fn h1_norm(u: &GridField, space: &ValueSpace) -> Result<f64> {
    let l2 = l2_norm(u, space)?;
    Ok((l2 * l2 + gradient_norm(u).powi(2)).sqrt())
}

/// `‖∂²ₓ(u - z̄)‖_{L²}`.
pub fn h2_seminorm(u: &GridField, space: &ValueSpace) -> Result<f64> {
    check_space(u, space)?;
    Ok(second_seminorm(u))
}

pub(crate) fn second_seminorm(u: &GridField) -> f64 {
    sum_sq(&second_difference(u), u.grid().spacing()).sqrt()
}

fn sum_sq(values: &[f64], dx: f64) -> f64 {
    dx * values.iter().map(|v| v * v).sum::<f64>()
}

/// Pointwise difference of two fields on the same grid.
pub fn difference(a: &GridField, b: &GridField) -> Result<GridField> {
    a.same_grid(b)?;
    let values = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    GridField::new(a.grid(), a.components(), values)
}
