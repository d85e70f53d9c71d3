//! Symmetric banded matrices (lower storage) and a Cholesky solve with Jacobi
//! scaling and diagonal shifts for nearly singular systems.

#[derive(Debug, Clone)]
pub(crate) struct BandedMatrix {
    dim: usize,
    bandwidth: usize,
    // row i holds A[i][i-d] at i*(bandwidth+1)+d
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(dim: usize, bandwidth: usize) -> Self {
        let bandwidth = bandwidth.min(dim.saturating_sub(1));
        Self {
            dim,
            bandwidth,
            data: vec![0.0; dim * (bandwidth + 1)],
        }
    }

    /// Adds `v` to entry `(i, j)` with `i ≥ j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let d = i - j;
        debug_assert!(d <= self.bandwidth, "entry ({i},{j}) outside band {}", self.bandwidth);
        self.data[i * (self.bandwidth + 1) + d] += v;
    }

    #[cfg(test)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let d = i - j;
        if d > self.bandwidth {
            0.0
        } else {
            self.data[i * (self.bandwidth + 1) + d]
        }
    }

    #[cfg(test)]
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        let w = self.bandwidth + 1;
        for i in 0..self.dim {
            let row = &self.data[i * w..(i + 1) * w];
            y[i] += row[0] * x[i];
            for d in 1..=self.bandwidth.min(i) {
                let a = row[d];
                y[i] += a * x[i - d];
                y[i - d] += a * x[i];
            }
        }
        y
    }

    /// In-place `LLᵀ` factorization; `None` if a pivot is not positive.
    pub fn cholesky(mut self) -> Option<BandedCholesky> {
        let b = self.bandwidth;
        let w = b + 1;
        for i in 0..self.dim {
            let j0 = i.saturating_sub(b);
            for j in j0..=i {
                let mut s = self.data[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(b));
                for k in k0..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    self.data[i * w] = s.sqrt();
                } else {
                    self.data[i * w + (i - j)] = s / self.data[j * w];
                }
            }
        }
        Some(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BandedCholesky {
    factor: BandedMatrix,
}

impl BandedCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let (n, b, w) = (l.dim, l.bandwidth, l.bandwidth + 1);
        let mut x = rhs.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(b)..i {
                s -= l.data[i * w + (i - k)] * x[k];
            }
            x[i] = s / l.data[i * w];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + b + 1).min(n) {
                s -= l.data[k * w + (k - i)] * x[k];
            }
            x[i] = s / l.data[i * w];
        }
        x
    }
}

/// Cholesky factor of `D A D + shift·I`, where `D` scales `A` to unit diagonal.
#[derive(Debug, Clone)]
pub(crate) struct ScaledCholesky {
    factor: BandedCholesky,
    scale: Vec<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    shift: f64,
}

impl ScaledCholesky {
    /// Factors a symmetric positive semidefinite `A`. If the plain factorization
    /// fails, the scaled matrix is shifted by `1e-12, 1e-10, …` until it succeeds.
    pub fn new(a: &BandedMatrix) -> Option<Self> {
        let n = a.dim;
        let w = a.bandwidth + 1;
        let scale: Vec<f64> = (0..n)
            .map(|i| {
                let d = a.data[i * w];
                if d > 0.0 && d.is_finite() {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut scaled = a.clone();
        for i in 0..n {
            for d in 0..=a.bandwidth.min(i) {
                scaled.data[i * w + d] *= scale[i] * scale[i - d];
            }
        }
        let mut shift = 0.0;
        for attempt in 0..12 {
            let mut m = scaled.clone();
            if shift > 0.0 {
                for i in 0..n {
                    m.data[i * w] += shift;
                }
            }
            if let Some(factor) = m.cholesky() {
                return Some(Self { factor, scale, shift });
            }
            shift = 1e-12 * 100f64.powi(attempt);
        }
        None
    }

    #[cfg(test)]
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b: Vec<f64> = rhs.iter().zip(&self.scale).map(|(r, s)| r * s).collect();
        let y = self.factor.solve(&b);
        y.iter().zip(&self.scale).map(|(v, s)| v * s).collect()
    }
}
