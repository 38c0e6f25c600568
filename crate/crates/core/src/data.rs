//! Interaction data, synthetic missing-not-at-random generation, validation
//! splits, and ingestion of explicit-rating files.
//!
//! The full domain `D` is the implicit `n_users × n_items` grid. Only the
//! observed set is stored sparsely; propensities, relevance probabilities and
//! observation masks are dense [`Grid`]s.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmoid;

/// Seeded RNG on an independent stream. Every consumer of randomness takes
/// its own stream so that adding draws in one place never shifts another.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dense row-major `rows × cols` grid, one cell per user-item pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for u in 0..rows {
            for i in 0..cols {
                data.push(f(u, i));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, u: usize, i: usize) -> T {
        self.data[u * self.cols + i]
    }

    #[inline]
    pub fn set(&mut self, u: usize, i: usize, value: T) {
        self.data[u * self.cols + i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map<U: Copy>(&self, mut f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub(crate) fn check_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ))
        }
    }
}

/// Observation indicators over the full domain.
pub type Mask = Grid<bool>;

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// A user-item pair with a binary label (observation indicator or rating).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user: usize,
    pub item: usize,
    pub label: u8,
}

/// Users, items, and the observed ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTable {
    n_users: usize,
    n_items: usize,
    observed: Vec<Interaction>,
}

impl InteractionTable {
    pub fn new(n_users: usize, n_items: usize, observed: Vec<Interaction>) -> Result<Self> {
        if n_users == 0 || n_items == 0 {
            return Err(Error::Data("empty user or item universe".into()));
        }
        let mut seen = HashSet::with_capacity(observed.len());
        for x in &observed {
            if x.user >= n_users || x.item >= n_items {
                return Err(Error::Data(format!(
                    "pair ({}, {}) outside {}x{} domain",
                    x.user, x.item, n_users, n_items
                )));
            }
            if x.rating > 1 {
                return Err(Error::Data(format!("rating {} is not binary", x.rating)));
            }
            if !seen.insert((x.user, x.item)) {
                return Err(Error::DuplicatePair {
                    user: x.user.to_string(),
                    item: x.item.to_string(),
                });
            }
        }
        Ok(Self {
            n_users,
            n_items,
            observed,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn observed(&self) -> &[Interaction] {
        &self.observed
    }

    pub fn domain_size(&self) -> usize {
        self.n_users * self.n_items
    }

    pub fn observation_mask(&self) -> Mask {
        mask_of(self.n_users, self.n_items, &self.observed)
    }

    /// Number of observations per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items];
        for x in &self.observed {
            counts[x.item] += 1;
        }
        counts
    }
}

pub(crate) fn mask_of(n_users: usize, n_items: usize, pairs: &[Interaction]) -> Mask {
    let mut mask = Grid::filled(n_users, n_items, false);
    for x in pairs {
        mask.set(x.user, x.item, true);
    }
    mask
}

/// Known generating probabilities for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True observation propensities, strictly positive.
    pub propensity: Grid,
    /// True relevance probabilities `P(r = 1)`.
    pub relevance: Grid,
    pub seed: u64,
}

impl GroundTruth {
    pub fn new(propensity: Grid, relevance: Grid, seed: u64) -> Result<Self> {
        propensity.check_shape(&relevance)?;
        if propensity
            .as_slice()
            .iter()
            .any(|&p| !(p > 0.0 && p <= 1.0))
        {
            return Err(Error::Data("propensities must lie in (0, 1]".into()));
        }
        if relevance
            .as_slice()
            .iter()
            .any(|&q| !(0.0..=1.0).contains(&q))
        {
            return Err(Error::Data("relevance probabilities must lie in [0, 1]".into()));
        }
        Ok(Self {
            propensity,
            relevance,
            seed,
        })
    }

    /// CSV with header `user,item,propensity,relevance`, one row per pair.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "user,item,propensity,relevance")?;
        for u in 0..self.propensity.rows() {
            for i in 0..self.propensity.cols() {
                writeln!(
                    out,
                    "{},{},{:?},{:?}",
                    u,
                    i,
                    self.propensity.get(u, i),
                    self.relevance.get(u, i)
                )?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut seed = 0;
        let mut rows = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            if let Some(rest) = line.strip_prefix("# seed=") {
                seed = rest.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: "bad seed".into(),
                })?;
                continue;
            }
            if line.starts_with('#') || line.starts_with("user,") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 4 fields, found {}", f.len()),
                });
            }
            let parse_err = |what: &str| Error::Parse {
                line: lineno,
                msg: format!("bad {what}"),
            };
            let u: usize = f[0].parse().map_err(|_| parse_err("user"))?;
            let i: usize = f[1].parse().map_err(|_| parse_err("item"))?;
            let p: f64 = f[2].parse().map_err(|_| parse_err("propensity"))?;
            let q: f64 = f[3].parse().map_err(|_| parse_err("relevance"))?;
            rows.push((u, i, p, q));
        }
        let n_users = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n_items = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n_users * n_items {
            return Err(Error::Data("ground-truth CSV does not cover a full grid".into()));
        }
        let mut p = Grid::filled(n_users, n_items, 0.0);
        let mut q = Grid::filled(n_users, n_items, 0.0);
        for (u, i, pv, qv) in rows {
            p.set(u, i, pv);
            q.set(u, i, qv);
        }
        Self::new(p, q, seed)
    }
}

fn default_latent_dim() -> usize {
    4
}
fn default_relevance_scale() -> f64 {
    2.0
}
fn default_relevance_offset() -> f64 {
    -0.5
}
fn default_preference_strength() -> f64 {
    4.0
}
fn default_exposure_offset() -> f64 {
    -3.0
}
fn default_popularity_skew() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    0.01
}
fn default_test_items() -> usize {
    16
}

/// Parameters of the synthetic MNAR generator.
///
/// Relevance is `q = σ(scale · ⟨U_u, V_i⟩ / √d + offset)` with standard normal
/// factors. Exposure is
/// `p = floor + (1 − floor) · σ(κ · (q − 0.5) + skew · z_i + exposure_offset)`
/// with `z_i ~ N(0, 1)` per item, so preferred and popular items are seen more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_relevance_scale")]
    pub relevance_scale: f64,
    #[serde(default = "default_relevance_offset")]
    pub relevance_offset: f64,
    /// κ: how strongly exposure follows preference.
    #[serde(default = "default_preference_strength")]
    pub preference_strength: f64,
    #[serde(default = "default_popularity_skew")]
    pub popularity_skew: f64,
    #[serde(default = "default_exposure_offset")]
    pub exposure_offset: f64,
    #[serde(default = "default_floor")]
    pub propensity_floor: f64,
    /// Uniformly exposed test items per user; 0 means every item.
    #[serde(default = "default_test_items")]
    pub test_items_per_user: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_users: usize, n_items: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            latent_dim: default_latent_dim(),
            relevance_scale: default_relevance_scale(),
            relevance_offset: default_relevance_offset(),
            preference_strength: default_preference_strength(),
            popularity_skew: default_popularity_skew(),
            exposure_offset: default_exposure_offset(),
            propensity_floor: default_floor(),
            test_items_per_user: default_test_items(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("synthetic grid must be non-empty".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return Err(Error::Config(format!(
                "propensity_floor must lie in (0, 1], got {}",
                self.propensity_floor
            )));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub table: InteractionTable,
    pub truth: GroundTruth,
    /// Ratings on uniformly exposed pairs, drawn from the same rating
    /// realization as the observed ratings.
    pub test: Vec<Interaction>,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let (nu, ni, d) = (config.n_users, config.n_items, config.latent_dim);
    let mut rng = seeded_rng(config.seed, 0);

    let user_f: Vec<f64> = (0..nu * d).map(|_| rng.sample(StandardNormal)).collect();
    let item_f: Vec<f64> = (0..ni * d).map(|_| rng.sample(StandardNormal)).collect();
    let popularity: Vec<f64> = (0..ni).map(|_| rng.sample(StandardNormal)).collect();
    let norm = (d as f64).sqrt();

    let relevance = Grid::from_fn(nu, ni, |u, i| {
        let dot: f64 = (0..d).map(|k| user_f[u * d + k] * item_f[i * d + k]).sum();
        sigmoid(config.relevance_scale * dot / norm + config.relevance_offset)
    });
    let floor = config.propensity_floor;
    let propensity = Grid::from_fn(nu, ni, |u, i| {
        if floor >= 1.0 {
            return 1.0;
        }
        let q = relevance.get(u, i);
        let z = config.preference_strength * (q - 0.5)
            + config.popularity_skew * popularity[i]
            + config.exposure_offset;
        floor + (1.0 - floor) * sigmoid(z)
    });

    let mut rng = seeded_rng(config.seed, 1);
    let ratings = Grid::from_fn(nu, ni, |u, i| {
        u8::from(rng.gen::<f64>() < relevance.get(u, i))
    });
    let truth = GroundTruth::new(propensity, relevance, config.seed)?;
    let mask = sample_observations(&truth.propensity, config.seed ^ 0x5eed_0b5e);

    let mut observed = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if mask.get(u, i) {
                observed.push(Interaction {
                    user: u,
                    item: i,
                    rating: ratings.get(u, i),
                });
            }
        }
    }

    let mut rng = seeded_rng(config.seed, 2);
    let per_user = if config.test_items_per_user == 0 {
        ni
    } else {
        config.test_items_per_user.min(ni)
    };
    let mut test = Vec::with_capacity(nu * per_user);
    let all_items: Vec<usize> = (0..ni).collect();
    for u in 0..nu {
        let mut items: Vec<usize> = if per_user == ni {
            all_items.clone()
        } else {
            all_items.choose_multiple(&mut rng, per_user).copied().collect()
        };
        items.sort_unstable();
        test.extend(items.into_iter().map(|i| Interaction {
            user: u,
            item: i,
            rating: ratings.get(u, i),
        }));
    }

    Ok(SyntheticDataset {
        table: InteractionTable::new(nu, ni, observed)?,
        truth,
        test,
    })
}

/// Independent Bernoulli draws `o ~ Bernoulli(p)` for every pair.
pub fn sample_observations(propensity: &Grid, seed: u64) -> Mask {
    let mut rng = seeded_rng(seed, 3);
    propensity.map(|p| rng.gen::<f64>() < p)
}

/// Train/validation partition of the observed set plus the labelled
/// propensity-calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_obs: Vec<Interaction>,
    pub val_obs: Vec<Interaction>,
    /// Validation observations labelled 1, never-observed pairs labelled 0.
    pub d_val: Vec<LabeledPair>,
}

impl Split {
    pub fn d_val_negatives(&self) -> usize {
        self.d_val.iter().filter(|x| x.label == 0).count()
    }
}

pub fn split_validation(table: &InteractionTable, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = table.observed().len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "validation fraction {fraction} of {n} observations leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, 4));
    let mut is_val = vec![false; n];
    for &k in &order[..n_val] {
        is_val[k] = true;
    }
    let (mut train_obs, mut val_obs) = (Vec::new(), Vec::new());
    for (k, x) in table.observed().iter().enumerate() {
        if is_val[k] {
            val_obs.push(*x);
        } else {
            train_obs.push(*x);
        }
    }

    let observed = table.observation_mask();
    let mut d_val: Vec<LabeledPair> = val_obs
        .iter()
        .map(|x| LabeledPair {
            user: x.user,
            item: x.item,
            label: 1,
        })
        .collect();
    for u in 0..table.n_users() {
        for i in 0..table.n_items() {
            if !observed.get(u, i) {
                d_val.push(LabeledPair {
                    user: u,
                    item: i,
                    label: 0,
                });
            }
        }
    }
    Ok(Split {
        train_obs,
        val_obs,
        d_val,
    })
}

/// Dense re-indexing of external ids, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
}

/// Reads whitespace-separated `(user, item, raw rating)` rows. A rating is
/// positive iff it is strictly greater than `rating_threshold`.
pub fn load_tsv(path: &Path, rating_threshold: f64) -> Result<(InteractionTable, IdMap)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ids = IdMap::default();
    let mut user_index: HashMap<i64, usize> = HashMap::new();
    let mut item_index: HashMap<i64, usize> = HashMap::new();
    let mut seen = HashSet::new();
    let mut observed = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 fields (user item rating), found {}", fields.len()),
            });
        }
        let user: i64 = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad user id {:?}", fields[0]),
        })?;
        let item: i64 = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad item id {:?}", fields[1]),
        })?;
        let raw: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad rating {:?}", fields[2]),
        })?;
        if !raw.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                msg: "non-finite rating".into(),
            });
        }
        if !seen.insert((user, item)) {
            return Err(Error::DuplicatePair {
                user: user.to_string(),
                item: item.to_string(),
            });
        }
        let u = *user_index.entry(user).or_insert_with(|| {
            ids.users.push(user);
            ids.users.len() - 1
        });
        let i = *item_index.entry(item).or_insert_with(|| {
            ids.items.push(item);
            ids.items.len() - 1
        });
        observed.push(Interaction {
            user: u,
            item: i,
            rating: u8::from(raw > rating_threshold),
        });
    }
    if observed.is_empty() {
        return Err(Error::Data(format!("{} contains no rows", path.display())));
    }
    let table = InteractionTable::new(ids.users.len(), ids.items.len(), observed)?;
    Ok((table, ids))
}

/// Reads a dense user × item rating matrix (one user per line, zero meaning
/// missing), the layout of the Coat `train.ascii` / `test.ascii` files.
pub fn load_rating_matrix(path: &Path, rating_threshold: f64) -> Result<InteractionTable> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut n_items = None;
    let mut observed = Vec::new();
    let mut u = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let values = trimmed
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        match n_items {
            None => n_items = Some(values.len()),
            Some(n) if n != values.len() => {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected {n} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                observed.push(Interaction {
                    user: u,
                    item: i,
                    rating: u8::from(v > rating_threshold),
                });
            }
        }
        u += 1;
    }
    InteractionTable::new(u, n_items.unwrap_or(0), observed)
}

/// Loads either layout: three columns per row means triples, anything wider
/// is treated as a dense matrix.
pub fn load_ratings(path: &Path, rating_threshold: f64) -> Result<(InteractionTable, IdMap)> {
    let text = fs::read_to_string(path)?;
    let width = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().count())
        .unwrap_or(0);
    if width == 3 {
        load_tsv(path, rating_threshold)
    } else {
        let table = load_rating_matrix(path, rating_threshold)?;
        let ids = IdMap {
            users: (0..table.n_users() as i64).collect(),
            items: (0..table.n_items() as i64).collect(),
        };
        Ok((table, ids))
    }
}

/// Reads `(user, item, rating)` rows whose ids are already dense indices
/// into an `n_users × n_items` grid, as written by [`write_tsv`]. Ratings
/// must be 0 or 1; `#` lines are comments.
pub fn read_indexed_tsv(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Interaction>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: idx + 1, msg };
        let f: Vec<&str> = trimmed.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        let user: usize = f[0].parse().map_err(|_| bad(format!("bad user index {:?}", f[0])))?;
        let item: usize = f[1].parse().map_err(|_| bad(format!("bad item index {:?}", f[1])))?;
        let rating: u8 = f[2].parse().map_err(|_| bad(format!("bad rating {:?}", f[2])))?;
        if user >= n_users || item >= n_items || rating > 1 {
            return Err(bad(format!("row ({user}, {item}, {rating}) outside {n_users}x{n_items} binary grid")));
        }
        rows.push(Interaction { user, item, rating });
    }
    Ok(rows)
}

pub fn write_tsv(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for x in rows {
        writeln!(out, "{}\t{}\t{}", x.user, x.item, x.rating)?;
    }
    out.flush()?;
    Ok(())
}
