//! Random potentials, dataset records and their JSONL files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Potential;
use crate::model::Sample;
use crate::rng::{rng_from_seed, PipelineRng};
use crate::training::fold_assignment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSamplerConfig {
    pub w_min: f64,
    pub w_max: f64,
    pub sigma_cut: f64,
    pub max_attempts: u64,
}

impl Default for PotentialSamplerConfig {
    fn default() -> Self {
        Self {
            w_min: 0.005,
            w_max: 2.5,
            sigma_cut: 0.4,
            max_attempts: 1_000_000,
        }
    }
}

impl PotentialSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.w_min && self.w_min < self.w_max && self.sigma_cut > 0.0 && self.max_attempts > 0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid potential sampler {self:?}")))
        }
    }
}

/// Rejection sampler: `W ~ U[w_min, w_max]`, `μ_j ~ U[−W/2, W/2]`, accepted
/// when the population standard deviation of `μ` is below `sigma_cut`.
/// Returns the potential and the number of attempts used.
pub fn sample_potential(
    config: &PotentialSamplerConfig,
    sites: usize,
    rng: &mut PipelineRng,
) -> Result<(Potential, u64)> {
    config.validate()?;
    for attempt in 1..=config.max_attempts {
        let w = rng.gen_range(config.w_min..=config.w_max);
        let mu: Vec<f64> = (0..sites).map(|_| rng.gen_range(-w / 2.0..=w / 2.0)).collect();
        let p = Potential::new(mu, sites)?;
        if p.std_dev() < config.sigma_cut {
            return Ok((p, attempt));
        }
    }
    Err(Error::Solver(format!(
        "no potential accepted in {} attempts",
        config.max_attempts
    )))
}

/// One accepted potential with the seed that regenerates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialRecord {
    pub id: u64,
    pub seed: u64,
    pub mu: Vec<f64>,
    pub attempts: u64,
}

impl PotentialRecord {
    /// Draws the potential for `id` from its own seed.
    pub fn generate(id: u64, seed: u64, config: &PotentialSamplerConfig, sites: usize) -> Result<Self> {
        let (p, attempts) = sample_potential(config, sites, &mut rng_from_seed(seed))?;
        Ok(Self {
            id,
            seed,
            mu: p.0,
            attempts,
        })
    }

    pub fn potential(&self, sites: usize) -> Result<Potential> {
        Potential::new(self.mu.clone(), sites)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ed")]
    Ed,
    #[serde(rename = "eve")]
    Eve,
    #[serde(rename = "vqe-vha")]
    VqeVha,
    #[serde(rename = "vqe-npf")]
    VqeNpf,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ed => "ed",
            Method::Eve => "eve",
            Method::VqeVha => "vqe-vha",
            Method::VqeNpf => "vqe-npf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ed" => Ok(Method::Ed),
            "eve" => Ok(Method::Eve),
            "vqe-vha" => Ok(Method::VqeVha),
            "vqe-npf" => Ok(Method::VqeNpf),
            other => Err(Error::invalid(format!("unknown method tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: u64,
    pub seed: u64,
    pub method: Method,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub f: f64,
    pub energy: Option<f64>,
    pub s2: f64,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl DatasetRecord {
    pub fn validate(&self, sites: usize) -> Result<()> {
        if self.mu.len() != sites {
            return Err(Error::DimensionMismatch {
                expected: sites,
                found: self.mu.len(),
            });
        }
        if self.rho.len() != sites {
            return Err(Error::DimensionMismatch {
                expected: sites,
                found: self.rho.len(),
            });
        }
        let finite = self.f.is_finite()
            && self.s2.is_finite()
            && self.energy.map_or(true, f64::is_finite)
            && self.mu.iter().chain(&self.rho).all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid(format!("record {} has non-finite values", self.id)));
        }
        Ok(())
    }

    pub fn sample(&self) -> Sample {
        Sample::new(self.rho.clone(), self.f)
    }
}

/// Writes one JSON object per line via a temporary file and rename.
pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn read_dataset(path: &Path, sites: usize) -> Result<Vec<DatasetRecord>> {
    read_jsonl(path, |r: &DatasetRecord| r.validate(sites))
}

/// Reads a JSONL file; `check` runs on every record and its error is
/// reported with the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, check: impl Fn(&T) -> Result<()>) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        check(&record).map_err(|e| parse_err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Pairs records of two datasets by id, in the order of `left`.
pub fn join_by_id<'a>(
    left: &'a [DatasetRecord],
    right: &'a [DatasetRecord],
) -> Result<Vec<(&'a DatasetRecord, &'a DatasetRecord)>> {
    let index: HashMap<u64, &DatasetRecord> = right.iter().map(|r| (r.id, r)).collect();
    left.iter()
        .map(|l| {
            index
                .get(&l.id)
                .map(|r| (l, *r))
                .ok_or_else(|| Error::invalid(format!("id {} missing from joined dataset", l.id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: BTreeMap<u64, usize>,
}

impl FoldAssignment {
    pub fn fold_ids(&self, fold: usize) -> Vec<u64> {
        self.fold_of.iter().filter(|(_, &f)| f == fold).map(|(&id, _)| id).collect()
    }
}

/// Seeded folds keyed by id: ids are sorted first, so the result does not
/// depend on input order.
pub fn split_folds(ids: &[u64], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::invalid("duplicate record ids"));
    }
    if k == 0 || k > sorted.len() {
        return Err(Error::invalid(format!("cannot split {} ids into {k} folds", sorted.len())));
    }
    let mut fold_of = BTreeMap::new();
    for (f, chunk) in fold_assignment(sorted.len(), k, seed).into_iter().enumerate() {
        for i in chunk {
            fold_of.insert(sorted[i], f);
        }
    }
    Ok(FoldAssignment { k, seed, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn record(id: u64, sites: usize) -> DatasetRecord {
        let mut rng = rng_from_seed(id);
        let mut meta = BTreeMap::new();
        meta.insert("shots".to_string(), serde_json::json!(250));
        DatasetRecord {
            id,
            seed: rng.gen(),
            method: Method::Eve,
            mu: (0..sites).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rho: (0..sites).map(|_| rng.gen::<f64>() / 3.0).collect(),
            f: rng.gen_range(-8.0..-2.0),
            energy: if id % 2 == 0 { Some(rng.gen()) } else { None },
            s2: 1e-17 * id as f64,
            meta,
        }
    }

    #[test]
    fn accepted_potentials_respect_the_cutoff() {
        let cfg = PotentialSamplerConfig::default();
        let mut rng = rng_from_seed(5);
        let mut max_strength: f64 = 0.0;
        for _ in 0..10_000 {
            let (p, attempts) = sample_potential(&cfg, 8, &mut rng).unwrap();
            assert!(p.std_dev() < 0.4);
            assert!(attempts >= 1);
            max_strength = max_strength.max(p.strength());
        }
        assert!(max_strength <= 0.4 * 8f64.sqrt());
        assert!(max_strength > 0.9);
        let a: Vec<Potential> = (0..5)
            .scan(rng_from_seed(9), |r, _| Some(sample_potential(&cfg, 8, r).unwrap().0))
            .collect();
        let b: Vec<Potential> = (0..5)
            .scan(rng_from_seed(9), |r, _| Some(sample_potential(&cfg, 8, r).unwrap().0))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_cutoff_hits_the_attempt_cap() {
        let cfg = PotentialSamplerConfig {
            w_min: 2.0,
            sigma_cut: 1e-9,
            max_attempts: 100,
            ..PotentialSamplerConfig::default()
        };
        assert!(sample_potential(&cfg, 8, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let records: Vec<DatasetRecord> = (0..1000).map(|i| record(i, 8)).collect();
        write_dataset(&records, &path).unwrap();
        let back = read_dataset(&path, 8).unwrap();
        assert_eq!(back, records);
        for (a, b) in back.iter().zip(&records) {
            assert_eq!(a.f.to_bits(), b.f.to_bits());
            assert!(a.rho.iter().zip(&b.rho).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn schema_violations_report_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&record(1, 8)).unwrap();
        let short = serde_json::to_string(&record(2, 7)).unwrap();
        fs::write(&path, format!("{good}\n{short}\n")).unwrap();
        match read_dataset(&path, 8) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let tag = good.replace("\"eve\"", "\"dmrg\"");
        fs::write(&path, format!("{tag}\n")).unwrap();
        assert!(matches!(read_dataset(&path, 8), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(read_dataset(&path, 8), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn joins_align_by_id() {
        let ed: Vec<DatasetRecord> = (0..10).map(|i| record(i, 8)).collect();
        let mut eve = ed.clone();
        eve.reverse();
        let pairs = join_by_id(&ed, &eve).unwrap();
        assert!(pairs.iter().all(|(a, b)| a.id == b.id));
        assert!(join_by_id(&ed, &eve[1..]).is_err());
    }

    #[test]
    fn folds_are_keyed_by_id() {
        let ids: Vec<u64> = (0..1000).map(|i| 7 * i + 3).collect();
        let a = split_folds(&ids, 5, 11).unwrap();
        for f in 0..5 {
            assert_eq!(a.fold_ids(f).len(), 200);
        }
        assert_eq!(a.fold_of.len(), 1000);
        let mut shuffled = ids.clone();
        shuffled.reverse();
        assert_eq!(split_folds(&shuffled, 5, 11).unwrap(), a);
        assert!(split_folds(&[1, 1, 2], 2, 0).is_err());
        assert!(split_folds(&[1, 2], 3, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_are_disjoint_exhaustive_and_balanced(n in 5usize..300, k in 2usize..6, seed in 0u64..1000) {
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 13 + 1).collect();
            let a = split_folds(&ids, k, seed).unwrap();
            prop_assert_eq!(a.fold_of.len(), n);
            let sizes: Vec<usize> = (0..k).map(|f| a.fold_ids(f).len()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(ids.iter().all(|id| a.fold_of.contains_key(id)));
        }
    }
}
