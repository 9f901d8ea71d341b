//! Block-tridiagonal information matrices over a chain of 3-dof states.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};

use crate::error::{Error, Result};

/// Symmetric block-tridiagonal matrix: diagonal blocks `A_kk` and the lower
/// blocks `A_{k+1,k}`. The upper blocks are their transposes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseInfo {
    diag: Vec<Matrix3<f64>>,
    lower: Vec<Matrix3<f64>>,
}

impl BlockSparseInfo {
    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![Matrix3::zeros(); n],
            lower: vec![Matrix3::zeros(); n.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self) -> &[Matrix3<f64>] {
        &self.diag
    }

    /// `lower()[k]` is the block at block-row `k+1`, block-column `k`.
    pub fn lower(&self) -> &[Matrix3<f64>] {
        &self.lower
    }

    /// Scatter-adds `m` into block `(i, j)` and, off the diagonal, `mᵀ`
    /// into `(j, i)`. Blocks outside the tridiagonal band are rejected.
    pub fn add_block(&mut self, i: usize, j: usize, m: &Matrix3<f64>) -> Result<()> {
        let n = self.len();
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange {
                index: i.max(j),
                len: n,
            });
        }
        match i as isize - j as isize {
            0 => self.diag[i] += m,
            1 => self.lower[j] += m,
            -1 => self.lower[i] += m.transpose(),
            _ => {
                return Err(Error::IndexOutOfRange {
                    index: i.max(j),
                    len: n,
                })
            }
        }
        Ok(())
    }

    /// Scatter-adds a unary factor block.
    pub fn add_unary(&mut self, k: usize, m: &Matrix3<f64>) -> Result<()> {
        self.add_block(k, k, m)
    }

    /// Scatter-adds the joint block of a factor on `(k−1, k)`, ordered as
    /// `[δξ_{k−1}; δξ_k]`.
    pub fn add_binary(&mut self, k: usize, m: &Matrix6<f64>) -> Result<()> {
        if k == 0 || k >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.len(),
            });
        }
        self.diag[k - 1] += m.fixed_view::<3, 3>(0, 0);
        self.diag[k] += m.fixed_view::<3, 3>(3, 3);
        self.lower[k - 1] += m.fixed_view::<3, 3>(3, 0);
        Ok(())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = 3 * self.len();
        let mut d = DMatrix::zeros(n, n);
        for (k, b) in self.diag.iter().enumerate() {
            d.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(b);
        }
        for (k, b) in self.lower.iter().enumerate() {
            d.fixed_view_mut::<3, 3>(3 * k + 3, 3 * k).copy_from(b);
            d.fixed_view_mut::<3, 3>(3 * k, 3 * k + 3).copy_from(&b.transpose());
        }
        d
    }

    /// Largest asymmetry inside the diagonal blocks.
    pub fn asymmetry(&self) -> f64 {
        self.diag
            .iter()
            .map(|b| (b - b.transpose()).amax())
            .fold(0.0, f64::max)
    }

    /// Block Cholesky `A = L Lᵀ` with lower-triangular diagonal blocks.
    pub fn cholesky(&self) -> Result<BlockCholesky> {
        let n = self.len();
        let mut g: Vec<Matrix3<f64>> = Vec::with_capacity(n);
        let mut f: Vec<Matrix3<f64>> = Vec::with_capacity(n.saturating_sub(1));
        for k in 0..n {
            let mut a = self.diag[k];
            if k > 0 {
                // F_k = A_{k,k−1} G_{k−1}⁻ᵀ
                let fk = g[k - 1]
                    .solve_lower_triangular(&self.lower[k - 1].transpose())
                    .map(|x| x.transpose())
                    .ok_or(Error::InfoNotSpd { block: k - 1 })?;
                a -= fk * fk.transpose();
                f.push(fk);
            }
            let a = (a + a.transpose()) * 0.5;
            let chol = a.cholesky().ok_or(Error::InfoNotSpd { block: k })?;
            g.push(chol.l());
        }
        Ok(BlockCholesky { g, f })
    }
}

/// Block lower-triangular factor with diagonal blocks `G_k` and
/// sub-diagonal blocks `F_k` (block-row `k`, block-column `k−1`).
#[derive(Debug, Clone)]
pub struct BlockCholesky {
    g: Vec<Matrix3<f64>>,
    f: Vec<Matrix3<f64>>,
}

/// Per-state marginal covariances and the cross-covariances
/// `Σ_{k+1,k}` between neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub diag: Vec<Matrix3<f64>>,
    pub lower: Vec<Matrix3<f64>>,
}

impl Marginals {
    /// Joint 6×6 covariance of states `(k−1, k)`.
    pub fn joint(&self, k: usize) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.diag[k - 1]);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.diag[k]);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&self.lower[k - 1]);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&self.lower[k - 1].transpose());
        m
    }
}

fn lower_inv(g: &Matrix3<f64>) -> Matrix3<f64> {
    g.solve_lower_triangular(&Matrix3::identity())
        .expect("Cholesky factor has a positive diagonal")
}

impl BlockCholesky {
    /// `ln |A| = 2 Σ ln diag(G_k)`
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .g
            .iter()
            .map(|g| (0..3).map(|i| g[(i, i)].ln()).sum::<f64>())
            .sum::<f64>()
    }

    pub fn solve(&self, rhs: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let n = self.g.len();
        assert_eq!(rhs.len(), n, "right-hand side length");
        let mut y: Vec<Vector3<f64>> = Vec::with_capacity(n);
        for k in 0..n {
            let mut b = rhs[k];
            if k > 0 {
                b -= self.f[k - 1] * y[k - 1];
            }
            y.push(
                self.g[k]
                    .solve_lower_triangular(&b)
                    .expect("Cholesky factor has a positive diagonal"),
            );
        }
        let mut x = vec![Vector3::zeros(); n];
        for k in (0..n).rev() {
            let mut b = y[k];
            if k + 1 < n {
                b -= self.f[k].transpose() * x[k + 1];
            }
            x[k] = self.g[k]
                .transpose()
                .solve_upper_triangular(&b)
                .expect("Cholesky factor has a positive diagonal");
        }
        x
    }

    pub fn solve_dense(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let blocks: Vec<Vector3<f64>> = (0..self.g.len())
            .map(|k| rhs.fixed_rows::<3>(3 * k).into_owned())
            .collect();
        DVector::from_iterator(rhs.len(), self.solve(&blocks).iter().flat_map(|v| v.iter().copied()))
    }

    /// Tridiagonal band of `A⁻¹` by the backward covariance recursion.
    pub fn marginals(&self) -> Marginals {
        let n = self.g.len();
        let ginv: Vec<Matrix3<f64>> = self.g.iter().map(lower_inv).collect();
        let mut diag = vec![Matrix3::zeros(); n];
        let mut lower = vec![Matrix3::zeros(); n.saturating_sub(1)];
        diag[n - 1] = ginv[n - 1].transpose() * ginv[n - 1];
        for k in (0..n - 1).rev() {
            // Σ_{k+1,k} = −Σ_{k+1,k+1} F_{k+1} G_k⁻¹
            let cross = -diag[k + 1] * self.f[k] * ginv[k];
            let s = ginv[k].transpose() * (ginv[k] - self.f[k].transpose() * cross);
            diag[k] = (s + s.transpose()) * 0.5;
            lower[k] = cross;
        }
        Marginals { diag, lower }
    }
}
