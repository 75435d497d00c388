//! Dynamic mode decomposition baseline: a rank-K linear one-step operator
//! fitted on snapshot pairs and iterated in the projected coordinates.

use nalgebra::DMatrix;

use crate::data::TrajectoryDataset;
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DmdModel {
    /// Requested rank.
    pub rank: usize,
    /// Rank actually used, `min(rank, numerical rank)`.
    pub effective_rank: usize,
    pub grid_len: usize,
    /// Row-major `[grid_len, effective_rank]`, orthonormal columns.
    pub basis: Vec<f64>,
    /// Row-major `[effective_rank, effective_rank]`.
    pub operator: Vec<f64>,
    pub singular_values: Vec<f64>,
}

/// Snapshot matrices `X = [u⁰ … u^{n−1}]` and `X′ = [u¹ … uⁿ]`, each
/// trajectory's columns appended in order.
pub fn snapshot_matrices(ds: &TrajectoryDataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if ds.num_steps < 2 || ds.num_traj == 0 {
        return Err(Error::InsufficientData(
            "DMD needs at least one trajectory with 2 steps".into(),
        ));
    }
    let d = ds.num_grid();
    let m = ds.num_traj * (ds.num_steps - 1);
    let mut x = DMatrix::zeros(d, m);
    let mut xp = DMatrix::zeros(d, m);
    let mut col = 0;
    for t in 0..ds.num_traj {
        for s in 0..ds.num_steps - 1 {
            x.column_mut(col).copy_from_slice(ds.snapshot(t, s));
            xp.column_mut(col).copy_from_slice(ds.snapshot(t, s + 1));
            col += 1;
        }
    }
    Ok((x, xp))
}

/// Fits `Ã = Uᵀ X′ V Σ⁻¹` on the leading `rank` singular triplets of `X`.
pub fn fit_dmd(ds: &TrajectoryDataset, rank: usize) -> Result<DmdModel> {
    let (x, xp) = snapshot_matrices(ds)?;
    fit_matrices(&x, &xp, rank)
}

pub fn fit_matrices(x: &DMatrix<f64>, xp: &DMatrix<f64>, rank: usize) -> Result<DmdModel> {
    let (d, m) = x.shape();
    if rank == 0 || rank > d.min(m) {
        return Err(Error::Config(format!("dmd rank {rank} must lie in 1..={}", d.min(m))));
    }
    if xp.shape() != (d, m) {
        return Err(Error::Dimension {
            expected: d * m,
            got: xp.len(),
        });
    }
    let svd = x.clone().svd(true, true);
    let (u, v_t) = (
        svd.u.expect("left vectors requested"),
        svd.v_t.expect("right vectors requested"),
    );
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let numerical = sigma.iter().filter(|&&s| s > RANK_TOL * smax).count();
    let k = rank.min(numerical).max(1);
    if k < rank {
        log::warn!("dmd rank {rank} exceeds the numerical rank of the data; using {k}");
    }
    if smax == 0.0 {
        return Err(Error::InsufficientData("DMD on an all-zero dataset".into()));
    }
    let uk = DMatrix::from_fn(d, k, |r, c| u[(r, order[c])]);
    let vk = DMatrix::from_fn(m, k, |r, c| v_t[(order[c], r)]);
    let sinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(k, sigma[..k].iter().map(|s| 1.0 / s)));
    let op = uk.transpose() * xp * vk * sinv;
    Ok(DmdModel {
        rank,
        effective_rank: k,
        grid_len: d,
        basis: row_major(&uk),
        operator: row_major(&op),
        singular_values: sigma[..k].to_vec(),
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect()
}

impl DmdModel {
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.grid_len, self.effective_rank, &self.basis)
    }

    pub fn operator_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.effective_rank, self.effective_rank, &self.operator)
    }

    /// Rebuilds a model from stored tensors.
    pub fn from_parts(
        rank: usize,
        grid_len: usize,
        basis: Vec<f64>,
        operator: Vec<f64>,
        singular_values: Vec<f64>,
    ) -> Result<Self> {
        let k = singular_values.len();
        if basis.len() != grid_len * k || operator.len() != k * k || k == 0 || k > rank {
            return Err(Error::Structural(format!(
                "inconsistent dmd tensors: basis {}, operator {}, {k} singular values, grid {grid_len}",
                basis.len(),
                operator.len()
            )));
        }
        Ok(Self {
            rank,
            effective_rank: k,
            grid_len,
            basis,
            operator,
            singular_values,
        })
    }

    /// Largest eigenvalue modulus of the reduced operator.
    pub fn spectral_radius(&self) -> f64 {
        self.operator_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `‖U Ã Uᵀ X − X′‖_F` over the training pairs of `ds`.
    pub fn residual(&self, ds: &TrajectoryDataset) -> Result<f64> {
        let (x, xp) = snapshot_matrices(ds)?;
        self.check_grid(x.nrows())?;
        let u = self.basis_matrix();
        let pred = &u * (self.operator_matrix() * (u.transpose() * x));
        Ok((pred - xp).norm())
    }

    fn check_grid(&self, d: usize) -> Result<()> {
        if d != self.grid_len {
            return Err(Error::Dimension {
                expected: self.grid_len,
                got: d,
            });
        }
        Ok(())
    }

    /// Returns `[steps + 1, d]`: the projection of `u0`, then `steps`
    /// applications of `Ã`, each lifted back to the grid.
    pub fn rollout(&self, u0: &[f64], steps: usize) -> Result<Vec<f64>> {
        self.check_grid(u0.len())?;
        let u = self.basis_matrix();
        let a = self.operator_matrix();
        let mut z = u.transpose() * nalgebra::DVector::from_column_slice(u0);
        let mut out = Vec::with_capacity((steps + 1) * self.grid_len);
        for s in 0..=steps {
            if s > 0 {
                z = &a * z;
            }
            out.extend((&u * &z).iter());
        }
        Ok(out)
    }

    /// Rolls every trajectory of `truth` from its first snapshot.
    pub fn rollout_dataset(&self, truth: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        let mut u = Vec::with_capacity(truth.u.len());
        for t in 0..truth.num_traj {
            u.extend(self.rollout(truth.snapshot(t, 0), truth.num_steps - 1)?);
        }
        let mut ds = truth.clone();
        ds.u = u;
        Ok(ds)
    }
}

/// Convenience wrapper matching the other rollout entry points.
pub fn dmd_rollout(model: &DmdModel, u0: &[f64], steps: usize) -> Result<Vec<f64>> {
    model.rollout(u0, steps)
}
