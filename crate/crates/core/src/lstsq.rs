//! Shared-design least squares: one QR factorisation, many right-hand sides.

use nalgebra::DMatrix;

/// Columns whose QR pivot falls below this fraction of the column norm are
/// treated as linearly dependent.
const RANK_TOLERANCE: f64 = 1e-10;

pub(crate) struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LeastSquares {
    /// Factorises `design` (rows = observations). Returns the index of the
    /// first dependent column if the design is rank deficient.
    pub fn new(design: DMatrix<f64>) -> Result<Self, usize> {
        let (m, n) = design.shape();
        if m < n {
            return Err(m);
        }
        let norms: Vec<f64> = (0..n).map(|j| design.column(j).norm()).collect();
        let qr = design.qr();
        let r = qr.r();
        for (j, &norm) in norms.iter().enumerate() {
            if norm == 0.0 || r[(j, j)].abs() <= RANK_TOLERANCE * norm {
                return Err(j);
            }
        }
        Ok(LeastSquares { q: qr.q(), r })
    }

    /// Coefficients for each column of `y` (observations × series).
    pub fn solve_many(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let qty = self.q.transpose() * y;
        self.r
            .solve_upper_triangular(&qty)
            .expect("pivots checked at construction")
    }

    #[cfg(test)]
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let col = DMatrix::from_column_slice(y.len(), 1, y);
        self.solve_many(&col).column(0).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_coefficients() {
        let ts = [0.0, 1.0, 2.0, 3.0, 4.0];
        let design = DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { ts[i] });
        let ls = LeastSquares::new(design).unwrap();
        let y: Vec<f64> = ts.iter().map(|t| 3.0 - 2.0 * t).collect();
        let beta = ls.solve(&y);
        assert!((beta[0] - 3.0).abs() < 1e-12 && (beta[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_columns_are_reported() {
        let design = DMatrix::from_fn(4, 3, |i, j| match j {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        assert_eq!(LeastSquares::new(design).err(), Some(2));
        let short = DMatrix::from_element(2, 3, 1.0);
        assert!(LeastSquares::new(short).is_err());
    }
}
