//! Reference regressors: ridge regression and k-nearest neighbours.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;

pub const RIDGE_LAMBDA: f64 = 1e-3;
pub const KNN_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ridge,
    Knn,
}

impl BaselineKind {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::Ridge => "ridge",
            BaselineKind::Knn => "knn",
        }
    }
}

/// `F ≈ w·ρ + b`, minimizing `Σ (F − w·ρ − b)² + λ‖w‖²`; the intercept is
/// not penalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    pub fn fit(train: &[Sample], lambda: f64) -> Result<Self> {
        let l = train
            .first()
            .map(|s| s.rho.len())
            .ok_or_else(|| Error::Training("ridge needs training data".into()))?;
        let n = l + 1;
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in train {
            if s.rho.len() != l {
                return Err(Error::DimensionMismatch {
                    expected: l,
                    found: s.rho.len(),
                });
            }
            let x: Vec<f64> = s.rho.iter().copied().chain(std::iter::once(1.0)).collect();
            for i in 0..n {
                b[i] += x[i] * s.f;
                for j in 0..n {
                    a[(i, j)] += x[i] * x[j];
                }
            }
        }
        for i in 0..l {
            a[(i, i)] += lambda;
        }
        let sol = a
            .clone()
            .cholesky()
            .map(|c| c.solve(&b))
            .or_else(|| a.lu().solve(&b))
            .ok_or_else(|| Error::Solver("singular ridge normal equations".into()))?;
        Ok(Self {
            weights: sol.iter().take(l).copied().collect(),
            intercept: sol[l],
        })
    }

    pub fn predict(&self, rho: &[f64]) -> f64 {
        self.weights.iter().zip(rho).map(|(w, r)| w * r).sum::<f64>() + self.intercept
    }
}

/// Mean label of the `k` nearest training densities (Euclidean); ties go
/// to the earlier training sample.
pub fn knn_predict(train: &[Sample], rho: &[f64], k: usize) -> Result<f64> {
    if train.is_empty() || k == 0 {
        return Err(Error::Training("knn needs training data and k ≥ 1".into()));
    }
    let mut dist: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = s.rho.iter().zip(rho).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (d, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.min(train.len());
    Ok(dist[..k].iter().map(|&(_, i)| train[i].f).sum::<f64>() / k as f64)
}

/// Fits on `train` and predicts every query density.
pub fn baseline_fit_predict(kind: BaselineKind, train: &[Sample], queries: &[Vec<f64>]) -> Result<Vec<f64>> {
    match kind {
        BaselineKind::Ridge => {
            let r = Ridge::fit(train, RIDGE_LAMBDA)?;
            Ok(queries.iter().map(|q| r.predict(q)).collect())
        }
        BaselineKind::Knn => queries.iter().map(|q| knn_predict(train, q, KNN_K)).collect(),
    }
}
