//! Run configuration, run-directory layout and the pipeline stages.
//!
//! Every stage reads and writes artifacts under one run directory. Outputs
//! depend only on the config, so re-running a stage rewrites identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{baseline_fit_predict, BaselineKind};
use crate::benchmark::{
    density_row, mean_signed_error, mse_model, mse_raw, summarize_density, DensityRow, DensitySummary,
};
use crate::dataset::{
    read_dataset, read_jsonl, write_atomic, write_dataset, write_jsonl, DatasetRecord, Method,
    PotentialRecord, PotentialSamplerConfig,
};
use crate::density::DensityOptOptions;
use crate::error::{Error, Result};
use crate::exact::SectorOperators;
use crate::lattice::HubbardSpec;
use crate::measurement::EveSampler;
use crate::model::Sample;
use crate::rng::derive_seed;
use crate::training::{cross_validate, EnsembleCheckpoint, TrainConfig, TrainedEnsemble};
use crate::vqe::{Ansatz, VqeConfig, VqeEngine};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "hubbard-run-manifest";
const MIN_SET_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    pub shots: Vec<u64>,
    pub vha_depths: Vec<usize>,
    pub npf_depths: Vec<usize>,
    /// Training datasets whose ensembles enter the density benchmark.
    pub density_models: Vec<String>,
    pub spec: HubbardSpec,
    pub sampler: PotentialSamplerConfig,
    pub train: TrainConfig,
    pub vqe: VqeConfig,
    pub density: DensityOptOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output: PathBuf::from("runs/default"),
            train_size: 1000,
            test_size: 1000,
            shots: vec![100, 1000, 10_000, 100_000],
            vha_depths: vec![1, 3, 6],
            npf_depths: vec![1, 3, 6, 11],
            density_models: vec!["ed".into()],
            spec: HubbardSpec::default(),
            sampler: PotentialSamplerConfig::default(),
            train: TrainConfig::default(),
            vqe: VqeConfig::default(),
            density: DensityOptOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        self.spec.validate()?;
        self.sampler.validate()?;
        self.train.validate()?;
        if self.train_size < MIN_SET_SIZE || self.test_size < MIN_SET_SIZE {
            return fail(format!("train and test sizes must be at least {MIN_SET_SIZE}"));
        }
        if self.train_size < self.train.folds {
            return fail(format!("{} training instances cannot fill {} folds", self.train_size, self.train.folds));
        }
        if self.shots.contains(&0) {
            return fail("shot counts must be at least 1".into());
        }
        if self.vha_depths.contains(&0) || self.npf_depths.contains(&0) {
            return fail("ansatz depths must be at least 1".into());
        }
        if (self.density.particles - self.spec.particles() as f64).abs() > 1e-12 {
            return fail(format!(
                "density.particles = {} does not match the {} particles of the model",
                self.density.particles,
                self.spec.particles()
            ));
        }
        for name in &self.density_models {
            DatasetKind::from_str(name)?;
        }
        Ok(())
    }

    /// SHA-256 of the config with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// Every training dataset the config asks for, in a fixed order.
    pub fn datasets(&self) -> Vec<DatasetKind> {
        let mut out = vec![DatasetKind::Ed];
        out.extend(self.shots.iter().map(|&shots| DatasetKind::Eve { shots }));
        out.extend(self.vqe_settings().into_iter().map(|(ansatz, depth)| DatasetKind::Vqe { ansatz, depth }));
        out
    }

    pub fn vqe_settings(&self) -> Vec<(Ansatz, usize)> {
        self.vha_depths
            .iter()
            .map(|&d| (Ansatz::Vha, d))
            .chain(self.npf_depths.iter().map(|&d| (Ansatz::Npf, d)))
            .collect()
    }

    pub fn stream_seed(&self, stream: &str) -> u64 {
        derive_seed(self.seed, 0, stream)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Names a training dataset: `ed`, `eve-m<shots>` or `vqe-<ansatz>-d<depth>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetKind {
    Ed,
    Eve { shots: u64 },
    Vqe { ansatz: Ansatz, depth: usize },
}

impl DatasetKind {
    pub fn method(self) -> Method {
        match self {
            DatasetKind::Ed => Method::Ed,
            DatasetKind::Eve { .. } => Method::Eve,
            DatasetKind::Vqe { ansatz: Ansatz::Vha, .. } => Method::VqeVha,
            DatasetKind::Vqe { ansatz: Ansatz::Npf, .. } => Method::VqeNpf,
        }
    }

    /// Shot count or depth; zero for exact data.
    pub fn knob(self) -> u64 {
        match self {
            DatasetKind::Ed => 0,
            DatasetKind::Eve { shots } => shots,
            DatasetKind::Vqe { depth, .. } => depth as u64,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Ed => write!(f, "ed"),
            DatasetKind::Eve { shots } => write!(f, "eve-m{shots}"),
            DatasetKind::Vqe { ansatz, depth } => write!(f, "vqe-{}-d{depth}", ansatz.tag()),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown dataset '{s}' (expected ed, eve-m<shots> or vqe-<vha|npf>-d<depth>)"));
        if s == "ed" {
            return Ok(DatasetKind::Ed);
        }
        if let Some(m) = s.strip_prefix("eve-m") {
            let shots: u64 = m.parse().map_err(|_| bad())?;
            return if shots == 0 { Err(bad()) } else { Ok(DatasetKind::Eve { shots }) };
        }
        let rest = s.strip_prefix("vqe-").ok_or_else(bad)?;
        let (ansatz, depth) = rest.split_once("-d").ok_or_else(bad)?;
        let ansatz: Ansatz = ansatz.parse().map_err(|_| bad())?;
        let depth: usize = depth.parse().map_err(|_| bad())?;
        if depth == 0 {
            return Err(bad());
        }
        Ok(DatasetKind::Vqe { ansatz, depth })
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn potentials(&self, split: Split) -> PathBuf {
        self.root.join("potentials").join(format!("{}.jsonl", split.tag()))
    }

    pub fn dataset(&self, split: Split, kind: DatasetKind) -> PathBuf {
        self.root.join("data").join(split.tag()).join(format!("{kind}.jsonl"))
    }

    pub fn model(&self, kind: DatasetKind) -> PathBuf {
        self.root.join("models").join(format!("{kind}.json"))
    }

    pub fn predictions(&self, kind: DatasetKind) -> PathBuf {
        self.root.join("predictions").join(format!("{kind}.csv"))
    }

    pub fn density(&self, kind: DatasetKind) -> PathBuf {
        self.root.join("density").join(format!("{kind}.csv"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

/// Run bookkeeping: config hash, seeds and a digest of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub code_version: String,
    pub config_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, String>,
}

pub const STAGES: [&str; 9] = [
    "gen-potentials",
    "solve-ed",
    "gen-eve",
    "gen-vqe",
    "train",
    "predict",
    "optimize-density",
    "benchmark",
    "report",
];

const SEED_STREAMS: [&str; 6] = [
    "train-potentials",
    "test-potentials",
    "eve",
    "vqe",
    "train",
    "density",
];

/// What a stage wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl StageOutput {
    fn merge(&mut self, other: StageOutput) {
        self.artifacts.extend(other.artifacts);
        self.notes.extend(other.notes);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkTask {
    Energy,
    Density,
}

impl FromStr for BenchmarkTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(BenchmarkTask::Energy),
            "density" => Ok(BenchmarkTask::Density),
            other => Err(Error::invalid(format!("unknown benchmark task '{other}'"))),
        }
    }
}

/// One row of an energy benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub dataset: String,
    pub method: Method,
    pub knob: u64,
    pub raw_mse: f64,
    pub raw_mean_error: f64,
    pub model_mse: f64,
    pub model_mse_std: f64,
    pub ensemble_mse: f64,
    pub cv_mse: f64,
    pub cv_mse_std: f64,
    pub ridge_mse: f64,
    pub knn_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReportRow {
    pub model: String,
    pub instances: usize,
    pub median_l2_error: f64,
    pub median_energy_error: f64,
    pub median_f_error: f64,
    pub log10_threshold: f64,
    pub high_fraction: f64,
    pub unconverged: usize,
}

impl DensityReportRow {
    fn new(model: String, s: DensitySummary) -> Self {
        Self {
            model,
            instances: s.instances,
            median_l2_error: s.median_l2_error,
            median_energy_error: s.median_energy_error,
            median_f_error: s.median_f_error,
            log10_threshold: s.log10_threshold,
            high_fraction: s.high_fraction,
            unconverged: s.unconverged,
        }
    }
}

pub struct Pipeline {
    config: RunConfig,
    dir: RunDir,
}

impl Pipeline {
    /// Opens (or creates) the run directory named by `config.output`. A
    /// directory created under a different config is refused.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::new(config.output.clone());
        let p = Self { config, dir };
        let manifest = match p.read_manifest()? {
            Some(m) if m.config_hash != p.config.hash() => {
                return Err(Error::Config(format!(
                    "{} was created with a different config (hash {}); use a fresh output directory",
                    p.dir.root().display(),
                    m.config_hash
                )))
            }
            Some(m) => m,
            None => p.fresh_manifest(),
        };
        write_atomic(&p.dir.config(), p.config.to_toml()?.as_bytes())?;
        p.write_manifest(&manifest)?;
        Ok(p)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dir(&self) -> &RunDir {
        &self.dir
    }

    fn fresh_manifest(&self) -> Manifest {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config_version: CONFIG_VERSION,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            seeds: SEED_STREAMS
                .iter()
                .map(|s| (s.to_string(), self.config.stream_seed(s)))
                .collect(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.dir.manifest();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Some(serde_json::from_slice(&text)?))
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(m)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.manifest(), &bytes)
    }

    fn record(&self, out: &StageOutput) -> Result<()> {
        let mut m = self.read_manifest()?.unwrap_or_else(|| self.fresh_manifest());
        for path in &out.artifacts {
            let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            m.artifacts.insert(self.dir.relative(path), hex(&Sha256::digest(bytes)));
        }
        self.write_manifest(&m)
    }

    fn require(&self, path: PathBuf, stage: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                stage: stage.into(),
            })
        }
    }

    fn sites(&self) -> usize {
        self.config.spec.sites
    }

    fn id_offset(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Test => self.config.train_size as u64,
        }
    }

    pub fn load_potentials(&self, split: Split) -> Result<Vec<PotentialRecord>> {
        let path = self.require(self.dir.potentials(split), "gen-potentials")?;
        let l = self.sites();
        read_jsonl(&path, |r: &PotentialRecord| r.potential(l).map(|_| ()))
    }

    pub fn load_dataset(&self, split: Split, kind: DatasetKind) -> Result<Vec<DatasetRecord>> {
        let stage = match kind {
            DatasetKind::Ed => "solve-ed",
            DatasetKind::Eve { .. } => "gen-eve",
            DatasetKind::Vqe { .. } => "gen-vqe",
        };
        let path = self.require(self.dir.dataset(split, kind), stage)?;
        read_dataset(&path, self.sites())
    }

    pub fn load_ensemble(&self, kind: DatasetKind) -> Result<TrainedEnsemble> {
        let path = self.require(self.dir.model(kind), "train")?;
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let c: EnsembleCheckpoint = serde_json::from_slice(&bytes)?;
        TrainedEnsemble::from_checkpoint(&c)
    }

    /// Draws the train and test potentials from disjoint seed streams.
    pub fn gen_potentials(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        for (split, size) in [(Split::Train, self.config.train_size), (Split::Test, self.config.test_size)] {
            let stream = self.config.stream_seed(&format!("{}-potentials", split.tag()));
            let offset = self.id_offset(split);
            let records = (0..size as u64)
                .into_par_iter()
                .map(|i| {
                    let id = offset + i;
                    PotentialRecord::generate(id, derive_seed(stream, id, "potential"), &self.config.sampler, self.sites())
                })
                .collect::<Result<Vec<_>>>()?;
            let attempts: u64 = records.iter().map(|r| r.attempts).sum();
            out.notes.push(format!(
                "{} potentials: {} accepted, acceptance rate {:.4}",
                split.tag(),
                size,
                size as f64 / attempts as f64
            ));
            let path = self.dir.potentials(split);
            write_jsonl(&records, &path)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    pub fn solve_ed(&self) -> Result<StageOutput> {
        let ops = SectorOperators::new(&self.config.spec)?;
        let mut out = StageOutput::default();
        for split in [Split::Train, Split::Test] {
            let potentials = self.load_potentials(split)?;
            let records = potentials
                .par_iter()
                .map(|p| {
                    let s = ops.solve(&p.potential(self.sites())?)?;
                    let mut meta = BTreeMap::new();
                    meta.insert("degenerate".into(), s.degenerate.into());
                    meta.insert("gap".into(), s.gap.into());
                    Ok(DatasetRecord {
                        id: p.id,
                        seed: p.seed,
                        method: Method::Ed,
                        mu: p.mu.clone(),
                        rho: s.density,
                        f: s.f,
                        energy: Some(s.energy),
                        s2: s.s2,
                        meta,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let degenerate = records.iter().filter(|r| r.meta["degenerate"] == true).count();
            out.notes.push(format!("{}: {} ground states, {degenerate} degenerate", split.tag(), records.len()));
            let path = self.dir.dataset(split, DatasetKind::Ed);
            write_dataset(&records, &path)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    /// EVE estimates on the training instances, one file per shot count.
    pub fn gen_eve(&self, shots: &[u64]) -> Result<StageOutput> {
        if shots.contains(&0) {
            return Err(Error::invalid("shot counts must be at least 1"));
        }
        let ops = SectorOperators::new(&self.config.spec)?;
        let sampler = EveSampler::new(&self.config.spec, &ops.basis)?;
        let stream = self.config.stream_seed("eve");
        let potentials = self.load_potentials(Split::Train)?;
        let per_instance = potentials
            .par_iter()
            .map(|p| {
                let mu = p.potential(self.sites())?;
                let s = ops.solve(&mu)?;
                shots
                    .iter()
                    .map(|&m| {
                        let seed = derive_seed(stream, p.id, &format!("m{m}"));
                        let est = sampler.estimate(&s.state, m, seed)?;
                        let mut meta = BTreeMap::new();
                        meta.insert("shots".into(), m.into());
                        meta.insert("f_std_error".into(), est.f_std_error.into());
                        Ok(DatasetRecord {
                            id: p.id,
                            seed,
                            method: Method::Eve,
                            mu: p.mu.clone(),
                            energy: Some(est.f_tilde + mu.dot(&est.rho_tilde)),
                            rho: est.rho_tilde,
                            f: est.f_tilde,
                            s2: s.s2,
                            meta,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = StageOutput::default();
        for (j, &m) in shots.iter().enumerate() {
            let records: Vec<DatasetRecord> = per_instance.iter().map(|r| r[j].clone()).collect();
            let path = self.dir.dataset(Split::Train, DatasetKind::Eve { shots: m });
            write_dataset(&records, &path)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    /// VQE estimates on the training instances, one file per ansatz and depth.
    pub fn gen_vqe(&self, settings: &[(Ansatz, usize)]) -> Result<StageOutput> {
        if settings.iter().any(|&(_, d)| d == 0) {
            return Err(Error::invalid("ansatz depths must be at least 1"));
        }
        let engine = VqeEngine::new(&self.config.spec)?;
        let stream = self.config.stream_seed("vqe");
        let potentials = self.load_potentials(Split::Train)?;
        let per_instance = potentials
            .par_iter()
            .map(|p| {
                let mu = p.potential(self.sites())?;
                let problem = engine.problem(&mu)?;
                settings
                    .iter()
                    .map(|&(ansatz, depth)| {
                        let kind = DatasetKind::Vqe { ansatz, depth };
                        let seed = derive_seed(stream, p.id, &kind.to_string());
                        let r = problem.run(ansatz, depth, &self.config.vqe, seed)?;
                        let mut meta = BTreeMap::new();
                        meta.insert("ansatz".into(), ansatz.tag().into());
                        meta.insert("depth".into(), depth.into());
                        let optimizer = match ansatz {
                            Ansatz::Vha => "cobyla",
                            Ansatz::Npf => "bfgs",
                        };
                        meta.insert("optimizer".into(), optimizer.into());
                        meta.insert("converged".into(), r.converged.into());
                        meta.insert("iterations".into(), r.iterations.into());
                        Ok(DatasetRecord {
                            id: p.id,
                            seed,
                            method: kind.method(),
                            mu: p.mu.clone(),
                            rho: r.rho_tilde,
                            f: r.f_tilde,
                            energy: Some(r.energy),
                            s2: r.s2,
                            meta,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = StageOutput::default();
        for (j, &(ansatz, depth)) in settings.iter().enumerate() {
            let records: Vec<DatasetRecord> = per_instance.iter().map(|r| r[j].clone()).collect();
            let unconverged = records.iter().filter(|r| r.meta["converged"] == false).count();
            let kind = DatasetKind::Vqe { ansatz, depth };
            out.notes.push(format!("{kind}: {unconverged} of {} runs hit the optimizer cap", records.len()));
            let path = self.dir.dataset(Split::Train, kind);
            write_dataset(&records, &path)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    /// Refuses training data that shares an id with the test set.
    fn guard_training(&self, records: &[DatasetRecord]) -> Result<()> {
        let test_ids: BTreeSet<u64> = match self.load_potentials(Split::Test) {
            Ok(p) => p.iter().map(|r| r.id).collect(),
            Err(Error::MissingArtifact { .. }) => {
                let lo = self.id_offset(Split::Test);
                (lo..lo + self.config.test_size as u64).collect()
            }
            Err(e) => return Err(e),
        };
        match records.iter().find(|r| test_ids.contains(&r.id)) {
            Some(r) => Err(Error::invalid(format!("training record {} belongs to the test set", r.id))),
            None => Ok(()),
        }
    }

    fn training_samples(&self, kind: DatasetKind) -> Result<Vec<Sample>> {
        let records = self.load_dataset(Split::Train, kind)?;
        self.guard_training(&records)?;
        Ok(records.iter().map(DatasetRecord::sample).collect())
    }

    /// Cross-validated ensembles, one per training dataset.
    pub fn train(&self, kinds: &[DatasetKind]) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        for &kind in kinds {
            let samples = self.training_samples(kind)?;
            let config = TrainConfig {
                seed: derive_seed(self.config.stream_seed("train"), 0, &kind.to_string()),
                ..self.config.train
            };
            let ensemble = cross_validate(&samples, &config)?;
            out.notes.push(format!(
                "{kind}: cv mse {:.3e} ± {:.1e}, epochs {:?}",
                ensemble.mean_cv_mse(),
                ensemble.std_cv_mse(),
                ensemble.histories.iter().map(|h| h.epochs_run).collect::<Vec<_>>()
            ));
            let path = self.dir.model(kind);
            let mut bytes = serde_json::to_vec(&ensemble.to_checkpoint())?;
            bytes.push(b'\n');
            write_atomic(&path, &bytes)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    /// Ensemble predictions of `F` on the exact test densities.
    pub fn predict(&self, kinds: &[DatasetKind]) -> Result<StageOutput> {
        let test = self.load_dataset(Split::Test, DatasetKind::Ed)?;
        let rhos: Vec<Vec<f64>> = test.iter().map(|r| r.rho.clone()).collect();
        let mut out = StageOutput::default();
        for &kind in kinds {
            let ensemble = self.load_ensemble(kind)?;
            let members = ensemble
                .members
                .iter()
                .map(|m| m.predict_batch(&rhos))
                .collect::<Result<Vec<_>>>()?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["id".to_string(), "f_test".into(), "f_pred".into()];
            header.extend((0..members.len()).map(|k| format!("fold_{k}")));
            w.write_record(&header)?;
            for (i, r) in test.iter().enumerate() {
                let folds: Vec<f64> = members.iter().map(|m| m[i]).collect();
                let mean = folds.iter().sum::<f64>() / folds.len() as f64;
                let mut row = vec![r.id.to_string(), r.f.to_string(), mean.to_string()];
                row.extend(folds.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
            let path = self.dir.predictions(kind);
            write_atomic(&path, &finish_csv(w)?)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    /// Minimizes each ensemble's energy functional on every test potential.
    pub fn optimize_density(&self, kinds: &[DatasetKind]) -> Result<StageOutput> {
        let test = self.load_dataset(Split::Test, DatasetKind::Ed)?;
        let stream = self.config.stream_seed("density");
        let mut out = StageOutput::default();
        for &kind in kinds {
            let ensemble = self.load_ensemble(kind)?;
            let rows = test
                .par_iter()
                .map(|r| {
                    let options = DensityOptOptions {
                        seed: derive_seed(stream, r.id, &kind.to_string()),
                        ..self.config.density
                    };
                    density_row(&ensemble, r, &options)
                })
                .collect::<Result<Vec<_>>>()?;
            let unconverged = rows.iter().filter(|r| !r.converged).count();
            out.notes.push(format!("{kind}: {unconverged} of {} instances hit the iteration cap", rows.len()));
            let path = self.dir.density(kind);
            write_atomic(&path, &to_csv(&rows)?)?;
            out.artifacts.push(path);
        }
        self.record(&out)?;
        Ok(out)
    }

    pub fn load_density_rows(&self, kind: DatasetKind) -> Result<Vec<DensityRow>> {
        let path = self.require(self.dir.density(kind), "optimize-density")?;
        let mut r = csv::Reader::from_path(&path)?;
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    /// Energy rows for the given datasets: raw label error, model test
    /// error and the reference regressors.
    pub fn energy_rows(&self, kinds: &[DatasetKind]) -> Result<Vec<EnergyRow>> {
        let train_ed = self.load_dataset(Split::Train, DatasetKind::Ed)?;
        let test = self.load_dataset(Split::Test, DatasetKind::Ed)?;
        let queries: Vec<Vec<f64>> = test.iter().map(|r| r.rho.clone()).collect();
        let test_mse = |pred: Vec<f64>| pred.iter().zip(&test).map(|(p, r)| (p - r.f).powi(2)).sum::<f64>() / test.len() as f64;
        kinds
            .iter()
            .map(|&kind| {
                let noisy = self.load_dataset(Split::Train, kind)?;
                self.guard_training(&noisy)?;
                let ensemble = self.load_ensemble(kind)?;
                let model = mse_model(&ensemble, &test)?;
                let samples: Vec<Sample> = noisy.iter().map(DatasetRecord::sample).collect();
                Ok(EnergyRow {
                    dataset: kind.to_string(),
                    method: kind.method(),
                    knob: kind.knob(),
                    raw_mse: mse_raw(&noisy, &train_ed)?,
                    raw_mean_error: mean_signed_error(&noisy, &train_ed)?,
                    model_mse: model.mean,
                    model_mse_std: model.std,
                    ensemble_mse: model.ensemble,
                    cv_mse: ensemble.mean_cv_mse(),
                    cv_mse_std: ensemble.std_cv_mse(),
                    ridge_mse: test_mse(baseline_fit_predict(BaselineKind::Ridge, &samples, &queries)?),
                    knn_mse: test_mse(baseline_fit_predict(BaselineKind::Knn, &samples, &queries)?),
                })
            })
            .collect()
    }

    /// Writes `reports/energy-<method>.csv` (one row per noise setting) or
    /// `reports/density.csv`. `method` filters by method tag.
    pub fn benchmark(&self, task: BenchmarkTask, method: Option<Method>) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        match task {
            BenchmarkTask::Energy => {
                let kinds = self.config.datasets();
                let methods: BTreeSet<Method> = kinds.iter().map(|k| k.method()).collect();
                for m in methods.into_iter().filter(|m| method.map_or(true, |f| f == *m)) {
                    let group: Vec<DatasetKind> = kinds.iter().copied().filter(|k| k.method() == m).collect();
                    let rows = self.energy_rows(&group)?;
                    let path = self.dir.report(&format!("energy-{m}.csv"));
                    write_atomic(&path, &to_csv(&rows)?)?;
                    out.artifacts.push(path);
                }
            }
            BenchmarkTask::Density => {
                let rows = self
                    .density_kinds()?
                    .into_iter()
                    .filter(|k| method.map_or(true, |f| f == k.method()))
                    .map(|kind| {
                        let summary = summarize_density(&self.load_density_rows(kind)?)?;
                        out.notes.push(format!(
                            "{kind}: median l2 error {:.3e}, high-mode fraction {:.3}",
                            summary.median_l2_error, summary.high_fraction
                        ));
                        Ok(DensityReportRow::new(kind.to_string(), summary))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let path = self.dir.report("density.csv");
                write_atomic(&path, &to_csv(&rows)?)?;
                out.artifacts.push(path);
            }
        }
        self.record(&out)?;
        Ok(out)
    }

    pub fn density_kinds(&self) -> Result<Vec<DatasetKind>> {
        self.config.density_models.iter().map(|s| s.parse()).collect()
    }

    /// Collects every report table into `reports/summary.md`.
    pub fn report(&self) -> Result<StageOutput> {
        let dir = self.dir.report("");
        let mut tables: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect(),
            Err(_) => Vec::new(),
        };
        if tables.is_empty() {
            return Err(Error::MissingArtifact {
                path: dir,
                stage: "benchmark".into(),
            });
        }
        tables.sort();
        let mut md = format!(
            "# Run summary\n\n- config hash: `{}`\n- master seed: {}\n- code version: {}\n- train/test instances: {}/{}\n",
            self.config.hash(),
            self.config.seed,
            env!("CARGO_PKG_VERSION"),
            self.config.train_size,
            self.config.test_size
        );
        for path in &tables {
            md.push_str(&format!("\n## {}\n\n", self.dir.relative(path)));
            let mut r = csv::Reader::from_path(path)?;
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            md.push_str(&format!("| {} |\n", header.join(" | ")));
            md.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for rec in r.records() {
                let rec = rec?;
                md.push_str(&format!("| {} |\n", rec.iter().collect::<Vec<_>>().join(" | ")));
            }
        }
        let path = self.dir.report("summary.md");
        write_atomic(&path, md.as_bytes())?;
        let out = StageOutput {
            artifacts: vec![path],
            notes: Vec::new(),
        };
        self.record(&out)?;
        Ok(out)
    }

    /// Every stage in order with the datasets named by the config.
    pub fn run_all(&self) -> Result<StageOutput> {
        let kinds = self.config.datasets();
        let mut out = self.gen_potentials()?;
        out.merge(self.solve_ed()?);
        out.merge(self.gen_eve(&self.config.shots)?);
        out.merge(self.gen_vqe(&self.config.vqe_settings())?);
        out.merge(self.train(&kinds)?);
        out.merge(self.predict(&kinds)?);
        out.merge(self.optimize_density(&self.density_kinds()?)?);
        out.merge(self.benchmark(BenchmarkTask::Energy, None)?);
        out.merge(self.benchmark(BenchmarkTask::Density, None)?);
        out.merge(self.report()?);
        Ok(out)
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}
