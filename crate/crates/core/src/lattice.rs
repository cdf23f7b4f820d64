//! Hubbard ring problem family and fixed-(N↑, N↓) sector bases.
//!
//! Spin-orbital modes are ordered `site 0↑ … site L−1↑, site 0↓ … site L−1↓`.
//! A configuration stores one occupation bitmask per spin species; the
//! combined mode mask places the up mask in the low `L` bits and the down mask
//! above it, which fixes the Jordan-Wigner sign convention used everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest ring the sector enumeration accepts.
pub const MAX_SITES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spin {
    Up,
    Down,
}

impl Spin {
    pub const BOTH: [Spin; 2] = [Spin::Up, Spin::Down];
}

/// Parameters of the Hubbard model family (everything except the potential).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubbardSpec {
    pub sites: usize,
    pub hopping: f64,
    pub interaction: f64,
    pub n_up: usize,
    pub n_down: usize,
    pub periodic: bool,
}

impl Default for HubbardSpec {
    fn default() -> Self {
        Self {
            sites: 8,
            hopping: 1.0,
            interaction: 4.0,
            n_up: 2,
            n_down: 2,
            periodic: true,
        }
    }
}

impl HubbardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sites < 2 || self.sites > MAX_SITES {
            return Err(Error::invalid(format!(
                "site count {} outside [2, {MAX_SITES}]",
                self.sites
            )));
        }
        if self.n_up > self.sites || self.n_down > self.sites {
            return Err(Error::invalid(format!(
                "particle counts ({}, {}) exceed {} sites",
                self.n_up, self.n_down, self.sites
            )));
        }
        if !(self.hopping > 0.0 && self.hopping.is_finite()) {
            return Err(Error::invalid(format!("hopping {} must be positive", self.hopping)));
        }
        if !self.interaction.is_finite() {
            return Err(Error::invalid("interaction must be finite"));
        }
        if self.periodic && self.sites == 2 {
            return Err(Error::invalid(
                "a periodic two-site ring double-counts its only bond",
            ));
        }
        Ok(())
    }

    pub fn particles(&self) -> usize {
        self.n_up + self.n_down
    }

    /// Nearest-neighbour bonds `(j, j+1)`, including the wrap-around bond once
    /// when periodic.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let l = self.sites;
        let last = if self.periodic { l } else { l - 1 };
        (0..last).map(|j| (j, (j + 1) % l)).collect()
    }

    /// Combined mode index of a spin orbital.
    pub fn mode(&self, site: usize, spin: Spin) -> usize {
        match spin {
            Spin::Up => site,
            Spin::Down => self.sites + site,
        }
    }
}

/// On-site potential μ, one entry per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Potential(pub Vec<f64>);

impl Potential {
    pub fn new(mu: Vec<f64>, sites: usize) -> Result<Self> {
        if mu.len() != sites {
            return Err(Error::DimensionMismatch {
                expected: sites,
                found: mu.len(),
            });
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("potential entries must be finite"));
        }
        Ok(Self(mu))
    }

    pub fn zeros(sites: usize) -> Self {
        Self(vec![0.0; sites])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Population standard deviation `sqrt(mean(μ²) − mean(μ)²)`.
    pub fn std_dev(&self) -> f64 {
        let n = self.0.len() as f64;
        let m = self.mean();
        let m2 = self.0.iter().map(|x| x * x).sum::<f64>() / n;
        (m2 - m * m).max(0.0).sqrt()
    }

    /// Potential strength `‖μ − μ̄‖₂`.
    pub fn strength(&self) -> f64 {
        let m = self.mean();
        self.0.iter().map(|x| (x - m) * (x - m)).sum::<f64>().sqrt()
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| x + c).collect())
    }

    pub fn dot(&self, rho: &[f64]) -> f64 {
        self.0.iter().zip(rho).map(|(m, r)| m * r).sum()
    }
}

/// Occupation configuration: one bitmask per spin species.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Config {
    pub up: u32,
    pub down: u32,
}

impl Config {
    pub fn new(up: u32, down: u32) -> Self {
        Self { up, down }
    }

    /// Combined mode mask (up bits low, down bits shifted by `sites`).
    pub fn modes(&self, sites: usize) -> u64 {
        self.up as u64 | ((self.down as u64) << sites)
    }

    pub fn from_modes(mask: u64, sites: usize) -> Self {
        let low = (1u64 << sites) - 1;
        Self {
            up: (mask & low) as u32,
            down: (mask >> sites) as u32,
        }
    }

    pub fn occupied(&self, site: usize, spin: Spin) -> bool {
        let m = match spin {
            Spin::Up => self.up,
            Spin::Down => self.down,
        };
        m >> site & 1 == 1
    }

    pub fn doubly_occupied(&self) -> u32 {
        (self.up & self.down).count_ones()
    }

    /// Site occupations `n_j↑ + n_j↓`.
    pub fn site_density(&self, sites: usize) -> impl Iterator<Item = u32> + '_ {
        (0..sites).map(move |j| (self.up >> j & 1) + (self.down >> j & 1))
    }
}

/// Ordered occupation-number basis of one `(N↑, N↓)` block.
#[derive(Debug, Clone)]
pub struct SectorBasis {
    sites: usize,
    n_up: usize,
    n_down: usize,
    configs: Vec<Config>,
    up_rank: Vec<u32>,
    down_rank: Vec<u32>,
    n_down_states: usize,
}

fn masks_with_popcount(sites: usize, count: usize) -> Vec<u32> {
    (0u32..(1u32 << sites))
        .filter(|m| m.count_ones() as usize == count)
        .collect()
}

fn rank_table(sites: usize, masks: &[u32]) -> Vec<u32> {
    let mut table = vec![u32::MAX; 1 << sites];
    for (i, &m) in masks.iter().enumerate() {
        table[m as usize] = i as u32;
    }
    table
}

/// Enumerates the sector basis in lexicographic `(up mask, down mask)` order.
pub fn build_sector_basis(sites: usize, n_up: usize, n_down: usize) -> Result<SectorBasis> {
    if sites == 0 || sites > MAX_SITES {
        return Err(Error::invalid(format!("site count {sites} outside [1, {MAX_SITES}]")));
    }
    if n_up > sites || n_down > sites {
        return Err(Error::invalid(format!(
            "particle counts ({n_up}, {n_down}) exceed {sites} sites"
        )));
    }
    let ups = masks_with_popcount(sites, n_up);
    let downs = masks_with_popcount(sites, n_down);
    let configs = ups
        .iter()
        .flat_map(|&u| downs.iter().map(move |&d| Config::new(u, d)))
        .collect();
    Ok(SectorBasis {
        sites,
        n_up,
        n_down,
        configs,
        up_rank: rank_table(sites, &ups),
        down_rank: rank_table(sites, &downs),
        n_down_states: downs.len(),
    })
}

impl SectorBasis {
    pub fn for_spec(spec: &HubbardSpec) -> Result<Self> {
        spec.validate()?;
        build_sector_basis(spec.sites, spec.n_up, spec.n_down)
    }

    pub fn dim(&self) -> usize {
        self.configs.len()
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn n_up(&self) -> usize {
        self.n_up
    }

    pub fn n_down(&self) -> usize {
        self.n_down
    }

    pub fn configs(&self) -> &[Config] {
        &self.configs
    }

    pub fn config(&self, index: usize) -> Config {
        self.configs[index]
    }

    pub fn index_of(&self, config: Config) -> Option<usize> {
        let full = 1usize << self.sites;
        if config.up as usize >= full || config.down as usize >= full {
            return None;
        }
        let u = self.up_rank[config.up as usize];
        let d = self.down_rank[config.down as usize];
        if u == u32::MAX || d == u32::MAX {
            None
        } else {
            Some(u as usize * self.n_down_states + d as usize)
        }
    }

    pub fn index_of_modes(&self, mask: u64) -> Option<usize> {
        self.index_of(Config::from_modes(mask, self.sites))
    }

    pub fn matches(&self, spec: &HubbardSpec) -> bool {
        self.sites == spec.sites && self.n_up == spec.n_up && self.n_down == spec.n_down
    }

    pub(crate) fn check_spec(&self, spec: &HubbardSpec) -> Result<()> {
        if self.matches(spec) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "basis (L={}, {}, {}) does not match spec (L={}, {}, {})",
                self.sites, self.n_up, self.n_down, spec.sites, spec.n_up, spec.n_down
            )))
        }
    }
}

/// Applies a product of ladder operators to a combined mode mask.
///
/// `ops` lists `(mode, create)` in application order (first element acts
/// first). Returns the resulting mask and the Jordan-Wigner sign, or `None` if
/// the product annihilates the configuration.
pub fn apply_ladder(mut mask: u64, ops: &[(usize, bool)]) -> Option<(u64, f64)> {
    let mut sign = 1.0;
    for &(mode, create) in ops {
        let bit = 1u64 << mode;
        let occupied = mask & bit != 0;
        if occupied == create {
            return None;
        }
        if (mask & (bit - 1)).count_ones() % 2 == 1 {
            sign = -sign;
        }
        mask ^= bit;
    }
    Some((mask, sign))
}

/// Sign `(−1)^{#occupied modes strictly between a and b}`.
pub fn parity_between(mask: u64, a: usize, b: usize) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi - lo < 2 {
        return 1.0;
    }
    let between = ((1u64 << hi) - 1) & !((1u64 << (lo + 1)) - 1);
    if (mask & between).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}
