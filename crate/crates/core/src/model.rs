//! Periodic-convolution regressor for the density functional `F[ρ]`.
//!
//! Layout: circular conv (8 channels, kernel 3) → flatten (8·L) → dense 128
//! → dense 128 → dense 1. Inputs and outputs pass through scalar
//! normalization fitted on the training split.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::PipelineRng;

pub const CHANNELS: usize = 8;
pub const KERNEL: usize = 3;
pub const HIDDEN: usize = 128;
pub const CHECKPOINT_FORMAT: &str = "hubbard-functional-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A density with its functional value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub rho: Vec<f64>,
    pub f: f64,
}

impl Sample {
    pub fn new(rho: Vec<f64>, f: f64) -> Self {
        Self { rho, f }
    }
}

/// The 2L translations and mirrors of every sample, identity first.
pub fn augment(samples: &[Sample]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(samples.len() * 2 * samples.first().map_or(0, |s| s.rho.len()));
    for sample in samples {
        let l = sample.rho.len();
        for mirror in [false, true] {
            for shift in 0..l {
                let rho = (0..l)
                    .map(|j| {
                        let src = if mirror { (l - j) % l + shift } else { j + shift };
                        sample.rho[src % l]
                    })
                    .collect();
                out.push(Sample::new(rho, sample.f));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub rho_mean: f64,
    pub rho_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
}

impl NormalizationStats {
    /// Scalar mean and population standard deviation over all density
    /// entries and over all labels.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Training("cannot fit normalization on no samples".into()));
        }
        let entries: Vec<f64> = samples.iter().flat_map(|s| s.rho.iter().copied()).collect();
        let labels: Vec<f64> = samples.iter().map(|s| s.f).collect();
        let (rho_mean, rho_std) = mean_std(&entries);
        let (f_mean, f_std) = mean_std(&labels);
        let stats = Self {
            rho_mean,
            rho_std,
            f_mean,
            f_std,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.rho_mean, self.rho_std, self.f_mean, self.f_std]
            .iter()
            .all(|v| v.is_finite())
            && self.rho_std > 0.0
            && self.f_std > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Training(format!("unusable normalization statistics {self:?}")))
        }
    }

    pub fn normalize_rho(&self, rho: f64) -> f64 {
        (rho - self.rho_mean) / self.rho_std
    }

    pub fn normalize_f(&self, f: f64) -> f64 {
        (f - self.f_mean) / self.f_std
    }

    pub fn denormalize_f(&self, y: f64) -> f64 {
        y * self.f_std + self.f_mean
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    /// Linear network; used for checking the normalization chain.
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Softplus => z.mapv(softplus),
            Activation::Identity => z.clone(),
        }
    }

    /// Activation and its derivative from one exponential per entry.
    fn apply_with_derivative(self, z: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        match self {
            Activation::Softplus => {
                let mut a = z.clone();
                let mut d = z.clone();
                ndarray::Zip::from(&mut a).and(&mut d).for_each(|a, d| {
                    let x = *a;
                    let e = (-x.abs()).exp();
                    *a = x.max(0.0) + (1.0 + e).ln();
                    *d = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                });
                (a, d)
            }
            Activation::Identity => (z.clone(), Array2::ones(z.raw_dim())),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

/// All trainable arrays. Dense weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub conv_weight: Array2<f64>,
    pub conv_bias: Array1<f64>,
    pub dense: [(Array2<f64>, Array1<f64>); 3],
}

impl Weights {
    pub fn zeros(sites: usize) -> Self {
        Self {
            conv_weight: Array2::zeros((CHANNELS, KERNEL)),
            conv_bias: Array1::zeros(CHANNELS),
            dense: [
                (Array2::zeros((HIDDEN, CHANNELS * sites)), Array1::zeros(HIDDEN)),
                (Array2::zeros((HIDDEN, HIDDEN)), Array1::zeros(HIDDEN)),
                (Array2::zeros((1, HIDDEN)), Array1::zeros(1)),
            ],
        }
    }

    /// Fan-in scaled uniform initialization, `U[−1/√fan_in, 1/√fan_in]`.
    pub fn random(sites: usize, rng: &mut PipelineRng) -> Self {
        let mut w = Self::zeros(sites);
        let fill = |a: &mut [f64], fan_in: usize, rng: &mut PipelineRng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in a {
                *x = rng.gen_range(-bound..bound);
            }
        };
        fill(w.conv_weight.as_slice_mut().unwrap(), KERNEL, rng);
        fill(w.conv_bias.as_slice_mut().unwrap(), KERNEL, rng);
        for (weight, bias) in &mut w.dense {
            let fan_in = weight.ncols();
            fill(weight.as_slice_mut().unwrap(), fan_in, rng);
            fill(bias.as_slice_mut().unwrap(), fan_in, rng);
        }
        w
    }

    pub fn sites(&self) -> usize {
        self.dense[0].0.ncols() / CHANNELS
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![self.conv_weight.as_slice().unwrap(), self.conv_bias.as_slice().unwrap()];
        for (w, b) in &self.dense {
            v.push(w.as_slice().unwrap());
            v.push(b.as_slice().unwrap());
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.conv_weight.as_slice_mut().unwrap(),
            self.conv_bias.as_slice_mut().unwrap(),
        ];
        for (w, b) in &mut self.dense {
            v.push(w.as_slice_mut().unwrap());
            v.push(b.as_slice_mut().unwrap());
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `[L, C·L]` matrix of the circular convolution: column `c·L + j` reads
    /// sites `j−1, j, j+1`.
    fn conv_matrix(&self) -> Array2<f64> {
        let l = self.sites();
        let mut m = Array2::zeros((l, CHANNELS * l));
        for c in 0..CHANNELS {
            for j in 0..l {
                for k in 0..KERNEL {
                    let src = (j + l + k - KERNEL / 2) % l;
                    m[(src, c * l + j)] += self.conv_weight[(c, k)];
                }
            }
        }
        m
    }

    fn conv_bias_row(&self) -> Array1<f64> {
        let l = self.sites();
        Array1::from_iter((0..CHANNELS * l).map(|i| self.conv_bias[i / l]))
    }
}

/// Cached activations of one batch.
struct Trace {
    /// Activation derivatives; empty for inference-only traces.
    deriv: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalModel {
    pub stats: NormalizationStats,
    pub weights: Weights,
    pub activation: Activation,
}

impl FunctionalModel {
    pub fn new(stats: NormalizationStats, weights: Weights, activation: Activation) -> Self {
        Self {
            stats,
            weights,
            activation,
        }
    }

    pub fn sites(&self) -> usize {
        self.weights.sites()
    }

    fn trace(&self, x: ArrayView2<f64>, with_derivative: bool) -> Trace {
        let w = &self.weights;
        let mut deriv = Vec::new();
        let mut post = Vec::with_capacity(3);
        let mut push = |z: Array2<f64>, post: &mut Vec<Array2<f64>>| {
            if with_derivative {
                let (a, d) = self.activation.apply_with_derivative(&z);
                post.push(a);
                deriv.push(d);
            } else {
                post.push(self.activation.apply(&z));
            }
        };
        push(x.dot(&w.conv_matrix()) + &w.conv_bias_row(), &mut post);
        for (weight, bias) in &w.dense[..2] {
            let z = post.last().unwrap().dot(&weight.t()) + bias;
            push(z, &mut post);
        }
        let (w3, b3) = &w.dense[2];
        let output = post.last().unwrap().dot(&w3.t()) + b3;
        Trace { deriv, post, output }
    }

    /// Network output on normalized inputs, one row per sample.
    pub fn forward_normalized(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.trace(x, false).output.column(0).to_owned()
    }

    /// Gradients of `mean((net(x) − y)²)` and the loss value.
    pub fn loss_gradient(&self, x: ArrayView2<f64>, y: &Array1<f64>) -> (f64, Weights) {
        let tr = self.trace(x, true);
        let n = x.nrows() as f64;
        let resid = &tr.output.column(0) - y;
        let loss = resid.mapv(|r| r * r).sum() / n;
        let d_out = (resid * (2.0 / n)).insert_axis(Axis(1));
        (loss, self.backward(x, &tr, d_out).0)
    }

    /// Backpropagates `d_out` (`[B, 1]`); returns parameter gradients and the
    /// input gradient `[B, L]`.
    fn backward(&self, x: ArrayView2<f64>, tr: &Trace, d_out: Array2<f64>) -> (Weights, Array2<f64>) {
        let w = &self.weights;
        let mut g = Weights::zeros(w.sites());
        let mut delta = d_out;
        for layer in (0..3).rev() {
            let input = &tr.post[layer];
            g.dense[layer].0 = delta.t().dot(input);
            g.dense[layer].1 = delta.sum_axis(Axis(0));
            let d_input = delta.dot(&w.dense[layer].0);
            delta = d_input * &tr.deriv[layer];
        }
        // `delta` is now the gradient at the conv pre-activation.
        let l = w.sites();
        let d_conv = x.t().dot(&delta);
        for c in 0..CHANNELS {
            g.conv_bias[c] = delta.slice(s![.., c * l..(c + 1) * l]).sum();
            for j in 0..l {
                for k in 0..KERNEL {
                    let src = (j + l + k - KERNEL / 2) % l;
                    g.conv_weight[(c, k)] += d_conv[(src, c * l + j)];
                }
            }
        }
        let d_x = delta.dot(&w.conv_matrix().t());
        (g, d_x)
    }

    fn check_input(&self, rho: &[f64]) -> Result<()> {
        self.stats.validate()?;
        if rho.len() != self.sites() {
            return Err(Error::DimensionMismatch {
                expected: self.sites(),
                found: rho.len(),
            });
        }
        Ok(())
    }

    fn normalized_row(&self, rho: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((1, rho.len()), |(_, j)| self.stats.normalize_rho(rho[j]))
    }

    /// `F^ML[ρ] = σ_F · net((ρ − ρ̄)/σ_ρ) + F̄`.
    pub fn predict(&self, rho: &[f64]) -> Result<f64> {
        self.check_input(rho)?;
        let y = self.forward_normalized(self.normalized_row(rho).view())[0];
        Ok(self.stats.denormalize_f(y))
    }

    pub fn predict_batch(&self, rhos: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.stats.validate()?;
        let l = self.sites();
        if let Some(bad) = rhos.iter().find(|r| r.len() != l) {
            return Err(Error::DimensionMismatch {
                expected: l,
                found: bad.len(),
            });
        }
        let x = Array2::from_shape_fn((rhos.len(), l), |(i, j)| self.stats.normalize_rho(rhos[i][j]));
        Ok(self
            .forward_normalized(x.view())
            .iter()
            .map(|&y| self.stats.denormalize_f(y))
            .collect())
    }

    /// `(F^ML[ρ], ∂F^ML/∂ρ)`.
    pub fn value_and_gradient(&self, rho: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(rho)?;
        let x = self.normalized_row(rho);
        let tr = self.trace(x.view(), true);
        let y = tr.output[(0, 0)];
        let (_, d_x) = self.backward(x.view(), &tr, Array2::ones((1, 1)));
        let scale = self.stats.f_std / self.stats.rho_std;
        Ok((
            self.stats.denormalize_f(y),
            d_x.row(0).iter().map(|g| g * scale).collect(),
        ))
    }

    pub fn input_gradient(&self, rho: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(rho)?.1)
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let w = &self.weights;
        let mut layers = vec![LayerRecord {
            name: "conv".into(),
            shape: vec![CHANNELS, KERNEL],
            weight: w.conv_weight.iter().copied().collect(),
            bias: w.conv_bias.to_vec(),
        }];
        for (i, (weight, bias)) in w.dense.iter().enumerate() {
            layers.push(LayerRecord {
                name: format!("dense{}", i + 1),
                shape: weight.shape().to_vec(),
                weight: weight.iter().copied().collect(),
                bias: bias.to_vec(),
            });
        }
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            activation: self.activation,
            sites: self.sites(),
            stats: self.stats,
            layers,
        }
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let l = c.sites;
        let expected = [
            ("conv", vec![CHANNELS, KERNEL], CHANNELS),
            ("dense1", vec![HIDDEN, CHANNELS * l], HIDDEN),
            ("dense2", vec![HIDDEN, HIDDEN], HIDDEN),
            ("dense3", vec![1, HIDDEN], 1),
        ];
        if c.layers.len() != expected.len() {
            return Err(Error::Serde(format!("expected 4 layers, found {}", c.layers.len())));
        }
        let mut arrays = Vec::new();
        for (rec, (name, shape, nb)) in c.layers.iter().zip(expected) {
            if rec.name != name || rec.shape != shape || rec.bias.len() != nb {
                return Err(Error::Serde(format!("layer '{}' has unexpected shape", rec.name)));
            }
            let w = Array2::from_shape_vec((shape[0], shape[1]), rec.weight.clone())
                .map_err(|e| Error::Serde(format!("layer '{name}': {e}")))?;
            arrays.push((w, Array1::from(rec.bias.clone())));
        }
        let mut it = arrays.into_iter();
        let (conv_weight, conv_bias) = it.next().unwrap();
        let dense = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
        let weights = Weights {
            conv_weight,
            conv_bias,
            dense,
        };
        if !weights.is_finite() {
            return Err(Error::Serde("non-finite weight in checkpoint".into()));
        }
        Ok(Self::new(c.stats, weights, c.activation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    /// `[out, in]`; weights are row-major.
    pub shape: Vec<usize>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub activation: Activation,
    pub sites: usize,
    pub stats: NormalizationStats,
    pub layers: Vec<LayerRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn unit_stats() -> NormalizationStats {
        NormalizationStats {
            rho_mean: 0.5,
            rho_std: 0.3,
            f_mean: -4.0,
            f_std: 0.7,
        }
    }

    fn random_model(seed: u64) -> FunctionalModel {
        let mut rng = rng_from_seed(seed);
        FunctionalModel::new(unit_stats(), Weights::random(8, &mut rng), Activation::Softplus)
    }

    #[test]
    fn augmentation_orbits() {
        let flat = augment(&[Sample::new(vec![0.5; 8], 1.0)]);
        assert_eq!(flat.len(), 16);
        assert!(flat.iter().all(|s| s.rho == vec![0.5; 8] && s.f == 1.0));
        let mut peak = vec![0.0; 8];
        peak[0] = 2.0;
        let orbit = augment(&[Sample::new(peak, 3.0)]);
        let mut distinct: Vec<Vec<f64>> = orbit.iter().map(|s| s.rho.clone()).collect();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        assert_eq!(distinct.len(), 8);
        let rho: Vec<f64> = (0..8).map(|j| j as f64).collect();
        let out = augment(&[Sample::new(rho.clone(), 0.0)]);
        assert_eq!(out[0].rho, rho);
        assert_eq!(out[8].rho, vec![0.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        let many: Vec<Sample> = (0..800).map(|i| Sample::new(vec![i as f64; 8], 0.0)).collect();
        assert_eq!(augment(&many).len(), 12800);
    }

    #[test]
    fn zero_network_predicts_the_mean_label() {
        let m = FunctionalModel::new(unit_stats(), Weights::zeros(8), Activation::Softplus);
        // softplus(0) feeds ln 2 forward, but the zero head still outputs 0.
        assert_eq!(m.predict(&[1.0, 0.0, 0.5, 0.2, 0.1, 0.9, 0.3, 1.0]).unwrap(), -4.0);
        assert!(m.input_gradient(&[0.5; 8]).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn extreme_density_gives_finite_output() {
        let m = random_model(3);
        assert!(m.predict(&[2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn bad_statistics_and_lengths_are_rejected() {
        let mut m = random_model(1);
        assert!(m.predict(&[0.5; 7]).is_err());
        m.stats.rho_std = 0.0;
        assert!(m.predict(&[0.5; 8]).is_err());
    }

    #[test]
    fn linear_network_gradient_is_the_rescaled_coefficient_vector() {
        let mut m = random_model(5);
        m.activation = Activation::Identity;
        // Collapse the linear network into coefficients by probing unit vectors.
        let x0 = Array2::zeros((1, 8));
        let base = m.forward_normalized(x0.view())[0];
        let coeff: Vec<f64> = (0..8)
            .map(|j| {
                let mut x = Array2::zeros((1, 8));
                x[(0, j)] = 1.0;
                m.forward_normalized(x.view())[0] - base
            })
            .collect();
        let g = m.input_gradient(&[0.1, 0.7, 0.3, 0.2, 0.9, 0.4, 0.6, 0.8]).unwrap();
        let scale = m.stats.f_std / m.stats.rho_std;
        for (gj, cj) in g.iter().zip(&coeff) {
            assert!((gj - cj * scale).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_round_trip() {
        let s = unit_stats();
        for f in [-7.25, 0.0, 3.5, 1e-3] {
            assert!((s.denormalize_f(s.normalize_f(f)) - f).abs() < 1e-12);
        }
        let samples = vec![Sample::new(vec![0.0, 1.0], 1.0), Sample::new(vec![1.0, 2.0], 3.0)];
        let fitted = NormalizationStats::from_samples(&samples).unwrap();
        assert_eq!(fitted.rho_mean, 1.0);
        assert!((fitted.rho_std - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!((fitted.f_mean, fitted.f_std), (2.0, 1.0));
        let same = vec![Sample::new(vec![0.5; 2], 1.0); 3];
        assert!(NormalizationStats::from_samples(&same).is_err());
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let m = random_model(9);
        let mut rng = rng_from_seed(10);
        let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.5..1.5));
        let y = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
        let (_, g) = m.loss_gradient(x.view(), &y);
        let loss = |w: &Weights| {
            let mm = FunctionalModel::new(m.stats, w.clone(), m.activation);
            let r = mm.forward_normalized(x.view()) - &y;
            r.mapv(|v| v * v).sum() / 5.0
        };
        let h = 1e-6;
        let g_slices = g.slices();
        for (block, probe) in [(0usize, 4usize), (1, 2), (2, 100), (3, 7), (4, 300), (6, 17), (7, 0)] {
            let mut wp = m.weights.clone();
            let mut wm = m.weights.clone();
            wp.slices_mut()[block][probe] += h;
            wm.slices_mut()[block][probe] -= h;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let an = g_slices[block][probe];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "block {block}: {fd} vs {an}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = random_model(12);
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&text).unwrap();
        let restored = FunctionalModel::from_checkpoint(&back).unwrap();
        assert_eq!(restored, m);
        let mut bad = back.clone();
        bad.layers[1].shape = vec![64, 128];
        assert!(FunctionalModel::from_checkpoint(&bad).is_err());
        let mut old = back;
        old.version = 0;
        assert!(FunctionalModel::from_checkpoint(&old).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn input_gradient_matches_finite_differences(seed in 0u64..10_000, rho in prop::collection::vec(0.0f64..2.0, 8)) {
            let m = random_model(seed);
            let g = m.input_gradient(&rho).unwrap();
            let h = 1e-5;
            for j in 0..8 {
                let mut p = rho.clone();
                let mut q = rho.clone();
                p[j] += h;
                q[j] -= h;
                let fd = (m.predict(&p).unwrap() - m.predict(&q).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{} vs {}", fd, g[j]);
            }
        }
    }
}
