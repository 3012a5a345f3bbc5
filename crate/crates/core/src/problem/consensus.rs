use nalgebra::{Cholesky, DMatrix, DVector};

use super::{CouplingGraph, Layout, STATE_DIM};

/// One row of `E`: `+1` at a copy entry, `−1` at the original entry, both as
/// indices into the stacked vector `z = (z_1, …, z_S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CouplingRow {
    pub copier: usize,
    pub owner: usize,
    pub copy_col: usize,
    pub orig_col: usize,
}

/// Sparse consensus matrix `E = [E_1 … E_S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    pub rows: Vec<CouplingRow>,
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
}

impl ConsensusMatrix {
    /// Rows ordered by copier, copy index, stage, component.
    pub fn assemble(graph: &CouplingGraph, layouts: &[Layout]) -> Self {
        let dims: Vec<usize> = layouts.iter().map(Layout::dim).collect();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let mut rows = Vec::new();
        for (i, l) in layouts.iter().enumerate() {
            debug_assert_eq!(l.copies, graph.in_neighbors[i]);
            for (c, &j) in l.copies.iter().enumerate() {
                for k in 0..=l.horizon {
                    for d in 0..STATE_DIM {
                        rows.push(CouplingRow {
                            copier: i,
                            owner: j,
                            copy_col: offsets[i] + l.w(c, k) + d,
                            orig_col: offsets[j] + layouts[j].x(k) + d,
                        });
                    }
                }
            }
        }
        Self { rows, offsets, dims }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_rows(), self.n_cols());
        for (r, row) in self.rows.iter().enumerate() {
            e[(r, row.copy_col)] = 1.0;
            e[(r, row.orig_col)] = -1.0;
        }
        e
    }

    /// Columns of `E` belonging to subsystem `i`.
    pub fn local_dense(&self, i: usize) -> DMatrix<f64> {
        self.to_dense().columns(self.offsets[i], self.dims[i]).into_owned()
    }

    pub fn stack(&self, parts: &[DVector<f64>]) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_cols());
        for (i, p) in parts.iter().enumerate() {
            z.rows_mut(self.offsets[i], self.dims[i]).copy_from(p);
        }
        z
    }

    pub fn split(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.dims.len()).map(|i| z.rows(self.offsets[i], self.dims[i]).into_owned()).collect()
    }

    /// `E z` for a stacked vector.
    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_rows(), self.rows.iter().map(|r| z[r.copy_col] - z[r.orig_col]))
    }

    /// `Eᵀ λ` as a stacked vector.
    pub fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_cols());
        for (r, row) in self.rows.iter().enumerate() {
            out[row.copy_col] += lambda[r];
            out[row.orig_col] -= lambda[r];
        }
        out
    }

    /// `E Eᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let e = self.to_dense();
        &e * e.transpose()
    }

    /// Least-squares coupling multiplier `(EEᵀ)⁻¹ E γ`.
    pub fn multiplier_from_dual(&self, gamma: &DVector<f64>) -> DVector<f64> {
        if self.n_rows() == 0 {
            return DVector::zeros(0);
        }
        let chol = Cholesky::new(self.gram()).expect("E has full row rank");
        chol.solve(&self.apply(gamma))
    }

    /// `‖(I − Eᵀ(EEᵀ)⁻¹E) γ‖∞`, zero exactly when `γ ∈ range(Eᵀ)`.
    pub fn range_residual(&self, gamma: &DVector<f64>) -> f64 {
        if self.n_rows() == 0 {
            return gamma.amax();
        }
        (gamma - self.apply_transpose(&self.multiplier_from_dual(gamma))).amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_robot_single_copy() {
        let graph = CouplingGraph {
            in_neighbors: vec![vec![], vec![0]],
            out_neighbors: vec![vec![1], vec![]],
        };
        let layouts = [
            Layout {
                horizon: 0,
                copies: vec![],
                slack: false,
            },
            Layout {
                horizon: 0,
                copies: vec![0],
                slack: false,
            },
        ];
        let e = ConsensusMatrix::assemble(&graph, &layouts);
        let d = e.to_dense();
        assert_eq!(d.shape(), (2, 2 + 4));
        assert_eq!(d.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
