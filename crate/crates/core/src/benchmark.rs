//! Error metrics for the energy-prediction and density-optimization tasks.

use serde::{Deserialize, Serialize};

use crate::dataset::{join_by_id, DatasetRecord, Method};
use crate::density::{optimize_density, DensityFunctional, DensityOptOptions};
use crate::error::{Error, Result};
use crate::lattice::Potential;
use crate::training::TrainedEnsemble;

/// Test error of an ensemble, member by member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMse {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// MSE of the ensemble-mean prediction.
    pub ensemble: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn require_exact(records: &[DatasetRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no test records"));
    }
    match records.iter().find(|r| r.method != Method::Ed) {
        Some(r) => Err(Error::invalid(format!(
            "test record {} is '{}', expected exact data",
            r.id, r.method
        ))),
        None => Ok(()),
    }
}

/// Every fold model evaluated on exact test densities against exact `F`.
pub fn mse_model(ensemble: &TrainedEnsemble, test: &[DatasetRecord]) -> Result<ModelMse> {
    require_exact(test)?;
    let rhos: Vec<Vec<f64>> = test.iter().map(|r| r.rho.clone()).collect();
    let n = test.len() as f64;
    let mut per_fold = Vec::with_capacity(ensemble.members.len());
    let mut sum = vec![0.0; test.len()];
    for m in &ensemble.members {
        let pred = m.predict_batch(&rhos)?;
        per_fold.push(pred.iter().zip(test).map(|(p, r)| (p - r.f).powi(2)).sum::<f64>() / n);
        for (s, p) in sum.iter_mut().zip(&pred) {
            *s += p;
        }
    }
    let k = ensemble.members.len() as f64;
    let ensemble_mse = sum.iter().zip(test).map(|(s, r)| (s / k - r.f).powi(2)).sum::<f64>() / n;
    let (mean, std) = mean_std(&per_fold);
    Ok(ModelMse {
        per_fold,
        mean,
        std,
        ensemble: ensemble_mse,
    })
}

/// Mean squared deviation of noisy `F̃` from exact `F`, joined by id.
pub fn mse_raw(noisy: &[DatasetRecord], exact: &[DatasetRecord]) -> Result<f64> {
    mean_error(noisy, exact, |d| d * d)
}

/// Mean of `F̃ − F`; positive when the noisy labels overestimate.
pub fn mean_signed_error(noisy: &[DatasetRecord], exact: &[DatasetRecord]) -> Result<f64> {
    mean_error(noisy, exact, |d| d)
}

fn mean_error(noisy: &[DatasetRecord], exact: &[DatasetRecord], g: impl Fn(f64) -> f64) -> Result<f64> {
    if noisy.is_empty() {
        return Err(Error::invalid("no records to compare"));
    }
    require_exact(exact)?;
    let pairs = join_by_id(noisy, exact)?;
    Ok(pairs.iter().map(|(a, b)| g(a.f - b.f)).sum::<f64>() / pairs.len() as f64)
}

/// Exact two-cluster k-means on the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSplit {
    pub low_center: f64,
    pub high_center: f64,
    /// Midpoint of the two centres; values above it form the high mode.
    pub threshold: f64,
    pub high_fraction: f64,
}

pub fn mode_split(values: &[f64]) -> Result<ModeSplit> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("mode split needs finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
        prefix_sq[i + 1] = prefix_sq[i] + v[i] * v[i];
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        prefix_sq[b] - prefix_sq[a] - s * s / m
    };
    if n == 1 || v[0] == v[n - 1] {
        return Ok(ModeSplit {
            low_center: v[0],
            high_center: v[0],
            threshold: v[0],
            high_fraction: 0.0,
        });
    }
    // Optimal 1-D clusters are contiguous in sorted order.
    let (mut best, mut cut) = (f64::INFINITY, 1);
    for k in 1..n {
        let cost = sse(0, k) + sse(k, n);
        if cost < best {
            best = cost;
            cut = k;
        }
    }
    let low = prefix[cut] / cut as f64;
    let high = (prefix[n] - prefix[cut]) / (n - cut) as f64;
    let threshold = 0.5 * (low + high);
    let above = values.iter().filter(|&&x| x > threshold).count();
    Ok(ModeSplit {
        low_center: low,
        high_center: high,
        threshold,
        high_fraction: above as f64 / n as f64,
    })
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// One optimized test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub id: u64,
    pub strength: f64,
    pub l2_error: f64,
    pub energy_error: f64,
    pub f_error: f64,
    pub e_star: f64,
    pub e_test: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the learned energy for one exact test record and compares
/// against the exact ground state.
pub fn density_row<F: DensityFunctional + ?Sized>(
    functional: &F,
    record: &DatasetRecord,
    options: &DensityOptOptions,
) -> Result<DensityRow> {
    let e_test = record
        .energy
        .ok_or_else(|| Error::invalid(format!("test record {} has no energy", record.id)))?;
    let out = optimize_density(functional, &record.mu, options)?;
    let strength = Potential(record.mu.clone()).strength();
    Ok(DensityRow {
        id: record.id,
        strength,
        l2_error: l2_distance(&out.rho_star, &record.rho),
        energy_error: (out.e_star - e_test).abs(),
        f_error: (out.f_star - record.f).abs(),
        e_star: out.e_star,
        e_test,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Summary of a density benchmark, split on `log10` of the ℓ² errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    pub instances: usize,
    pub median_l2_error: f64,
    pub median_energy_error: f64,
    pub median_f_error: f64,
    pub log10_threshold: f64,
    pub high_fraction: f64,
    pub unconverged: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize_density(rows: &[DensityRow]) -> Result<DensitySummary> {
    if rows.is_empty() {
        return Err(Error::invalid("no density rows"));
    }
    let l2: Vec<f64> = rows.iter().map(|r| r.l2_error).collect();
    // Exact hits would give -inf.
    let logs: Vec<f64> = l2.iter().map(|e| e.max(1e-300).log10()).collect();
    let split = mode_split(&logs)?;
    Ok(DensitySummary {
        instances: rows.len(),
        median_l2_error: median(&l2),
        median_energy_error: median(&rows.iter().map(|r| r.energy_error).collect::<Vec<_>>()),
        median_f_error: median(&rows.iter().map(|r| r.f_error).collect::<Vec<_>>()),
        log10_threshold: split.threshold,
        high_fraction: split.high_fraction,
        unconverged: rows.iter().filter(|r| !r.converged).count(),
    })
}
