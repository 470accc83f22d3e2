//! The fractional model parameter bundle θ = {α, A, B, μ, Σ}.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::gl::{FractionalOrders, GlError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("noise covariance is not symmetric (max asymmetry {0:e})")]
    SigmaNotSymmetric(f64),
    #[error("noise covariance is not positive semidefinite (min eigenvalue {0:e})")]
    SigmaNotPsd(f64),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Orders(#[from] GlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FracModel {
    orders: FractionalOrders,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl FracModel {
    pub fn new(
        orders: FractionalOrders,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        let n = orders.len();
        let check = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch {
                    what,
                    expected,
                    got,
                })
            }
        };
        check("A rows", n, a.nrows())?;
        check("A cols", n, a.ncols())?;
        check("B rows", n, b.nrows())?;
        check("mu length", n, mu.len())?;
        check("Sigma rows", n, sigma.nrows())?;
        check("Sigma cols", n, sigma.ncols())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("A"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("B"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("mu"));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("Sigma"));
        }
        let scale = sigma.amax().max(1.0);
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(ModelError::SigmaNotSymmetric(asym));
        }
        if n > 0 {
            let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
            if min_eig < -1e-9 * scale {
                return Err(ModelError::SigmaNotPsd(min_eig));
            }
        }
        Ok(Self {
            orders,
            a,
            b,
            mu,
            sigma,
        })
    }

    /// Builds a model from row-major flat buffers.
    pub fn from_flat(
        n: usize,
        p: usize,
        alphas: Vec<f64>,
        a: &[f64],
        b: &[f64],
        mu: &[f64],
        sigma: &[f64],
    ) -> Result<Self, ModelError> {
        let expect = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch {
                    what,
                    expected,
                    got,
                })
            }
        };
        expect("alphas length", n, alphas.len())?;
        expect("A entries", n * n, a.len())?;
        expect("B entries", n * p, b.len())?;
        expect("mu entries", n, mu.len())?;
        expect("Sigma entries", n * n, sigma.len())?;
        Self::new(
            FractionalOrders::new(alphas)?,
            DMatrix::from_row_slice(n, n, a),
            DMatrix::from_row_slice(n, p, b),
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(n, n, sigma),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.orders.len()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn orders(&self) -> &FractionalOrders {
        &self.orders
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn with_sigma(mut self, sigma: DMatrix<f64>) -> Result<Self, ModelError> {
        self.sigma = sigma;
        Self::new(self.orders, self.a, self.b, self.mu, self.sigma)
    }

    /// Row-major copy of a matrix.
    pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push(m[(r, c)]);
            }
        }
        out
    }

    /// Factor `L` with `L Lᵀ = Σ`, valid for singular Σ.
    pub fn noise_factor(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        if self.sigma.iter().all(|&v| v == 0.0) {
            return DMatrix::zeros(n, n);
        }
        let eig = SymmetricEigen::new(self.sigma.clone());
        let mut l = eig.eigenvectors.clone();
        for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
            let s = libm::sqrt(lambda.max(0.0));
            for r in 0..n {
                l[(r, c)] *= s;
            }
        }
        l
    }

    /// FNV-1a over the bit patterns of every parameter; identifies a model in
    /// run logs.
    pub fn checksum(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut feed = |v: u64| {
            for byte in v.to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(PRIME);
            }
        };
        feed(self.state_dim() as u64);
        feed(self.action_dim() as u64);
        let params = self
            .orders
            .as_slice()
            .iter()
            .chain(Self::row_major(&self.a).iter())
            .chain(Self::row_major(&self.b).iter())
            .chain(self.mu.iter())
            .chain(Self::row_major(&self.sigma).iter())
            .copied()
            .collect::<Vec<_>>();
        for v in params {
            feed(v.to_bits());
        }
        h
    }
}
