//! Social-account datasets: synthetic generation, JSONL storage, stratified
//! train/test split and Dirichlet label-skew partitioning across clients.
//!
//! JSONL layout: the first line is a header object
//! `{"prop_dim": P, "embed_dim": d, "classes": 2}`, followed by one
//! [`UserRecord`] per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

pub const NUM_CLASSES: usize = 2;
pub const HUMAN: usize = 0;
pub const BOT: usize = 1;

/// One account: property vector, tweets as token-embedding matrices, label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
    pub label: usize,
    pub props: Vec<f64>,
    /// `tweets[j][q]` is the embedding of token `q` of tweet `j`.
    pub tweets: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub prop_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub users: Vec<UserRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, users: Vec<UserRecord>) -> Result<Self> {
        let ds = Self { header, users };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.label).collect()
    }

    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for u in &self.users {
            c[u.label] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header,
            users: indices.iter().map(|&i| self.users[i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.classes != NUM_CLASSES {
            return Err(FedError::InvalidData(format!(
                "expected {NUM_CLASSES} classes, header says {}",
                self.header.classes
            )));
        }
        let mut seen = HashSet::new();
        for u in &self.users {
            check_user(&self.header, u).map_err(FedError::InvalidData)?;
            if !seen.insert(u.id.as_str()) {
                return Err(FedError::InvalidData(format!("duplicate user id `{}`", u.id)));
            }
        }
        Ok(())
    }
}

fn check_user(h: &DatasetHeader, u: &UserRecord) -> std::result::Result<(), String> {
    if u.label >= h.classes {
        return Err(format!("user `{}`: label {} out of range", u.id, u.label));
    }
    if u.props.len() != h.prop_dim {
        return Err(format!(
            "user `{}`: {} props, header prop_dim {}",
            u.id,
            u.props.len(),
            h.prop_dim
        ));
    }
    for tweet in &u.tweets {
        for tok in tweet {
            if tok.len() != h.embed_dim {
                return Err(format!(
                    "user `{}`: token of dim {}, header embed_dim {}",
                    u.id,
                    tok.len(),
                    h.embed_dim
                ));
            }
        }
    }
    let finite = u.props.iter().all(|v| v.is_finite())
        && u.tweets.iter().flatten().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(format!("user `{}`: non-finite value", u.id));
    }
    Ok(())
}

/// Parameters for [`synth_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthSpec {
    pub n_users: usize,
    pub prop_dim: usize,
    pub embed_dim: usize,
    /// Inclusive range of tweets per user.
    pub tweets_range: (usize, usize),
    /// Inclusive range of tokens per tweet.
    pub tokens_range: (usize, usize),
    pub class_sep: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            prop_dim: 8,
            embed_dim: 16,
            tweets_range: (0, 6),
            tokens_range: (3, 10),
            class_sep: 2.0,
            seed: 0,
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Two-class synthetic accounts. Humans (label 0) centre on `−class_sep·µ`
/// for properties and `−class_sep·ν` for tokens, bots on the positive side,
/// with identity-covariance Gaussian noise. `µ` and `ν` are random unit
/// directions drawn from the seed. Labels alternate, so classes are
/// balanced within one.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_users < 2 {
        return Err(FedError::InvalidConfig("synthetic dataset needs at least 2 users".into()));
    }
    if spec.class_sep < 0.0 || !spec.class_sep.is_finite() {
        return Err(FedError::InvalidConfig("class_sep must be finite and ≥ 0".into()));
    }
    if spec.prop_dim == 0 || spec.embed_dim == 0 {
        return Err(FedError::InvalidConfig("dimensions must be positive".into()));
    }
    let (tmin, tmax) = spec.tweets_range;
    let (qmin, qmax) = spec.tokens_range;
    if tmin > tmax || qmin > qmax || qmin == 0 {
        return Err(FedError::InvalidConfig("bad tweets/tokens range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mu = unit_vector(&mut rng, spec.prop_dim);
    let nu = unit_vector(&mut rng, spec.embed_dim);

    let users = (0..spec.n_users)
        .map(|i| {
            let label = i % NUM_CLASSES;
            let sign = if label == BOT { 1.0 } else { -1.0 };
            let shift = sign * spec.class_sep;
            let props = mu
                .iter()
                .map(|m| shift * m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n_tweets = rng.random_range(tmin..=tmax);
            let tweets = (0..n_tweets)
                .map(|_| {
                    let n_tok = rng.random_range(qmin..=qmax);
                    (0..n_tok)
                        .map(|_| {
                            nu.iter()
                                .map(|n| shift * n + rng.sample::<f64, _>(StandardNormal))
                                .collect()
                        })
                        .collect()
                })
                .collect();
            UserRecord {
                id: format!("u{i:06}"),
                label,
                props,
                tweets,
            }
        })
        .collect();

    Dataset::new(
        DatasetHeader {
            prop_dim: spec.prop_dim,
            embed_dim: spec.embed_dim,
            classes: NUM_CLASSES,
        },
        users,
    )
}

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n")?;
    for u in &ds.users {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    read_jsonl(BufReader::new(file))
}

/// Parses the JSONL form. Errors carry 1-based line numbers.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: DatasetHeader = loop {
        match lines.next() {
            None => return Err(FedError::Malformed { line: 1, msg: "missing header line".into() }),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| FedError::Malformed { line: i + 1, msg: format!("header: {e}") })?;
            }
        }
    };
    if header.classes != NUM_CLASSES {
        return Err(FedError::InvalidData(format!("unsupported class count {}", header.classes)));
    }
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let user: UserRecord = serde_json::from_str(&line)
            .map_err(|e| FedError::Malformed { line: i + 1, msg: e.to_string() })?;
        check_user(&header, &user).map_err(|msg| FedError::Malformed { line: i + 1, msg })?;
        if !seen.insert(user.id.clone()) {
            return Err(FedError::Malformed { line: i + 1, msg: format!("duplicate id `{}`", user.id) });
        }
        users.push(user);
    }
    Ok(Dataset { header, users })
}

/// Stratified split: within each class, a seeded shuffle sends
/// `round(test_frac · n_y)` users to the test side. Both outputs keep the
/// original user order.
pub fn train_test_split(ds: &Dataset, test_frac: f64, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; ds.len()];
    for y in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.users[i].label == y).collect();
        idx.shuffle(&mut rng);
        let n_test = (test_frac * idx.len() as f64).round() as usize;
        for &i in &idx[..n_test.min(idx.len())] {
            is_test[i] = true;
        }
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..ds.len()).filter(|&i| is_test[i]).collect();
    (ds.subset(&train), ds.subset(&test))
}

/// Per-client label counts and the ratios derived from them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStats {
    pub counts: Vec<[u64; NUM_CLASSES]>,
}

impl LabelStats {
    pub fn n_clients(&self) -> usize {
        self.counts.len()
    }

    pub fn class_total(&self, y: usize) -> u64 {
        self.counts.iter().map(|c| c[y]).sum()
    }

    pub fn total(&self) -> u64 {
        (0..NUM_CLASSES).map(|y| self.class_total(y)).sum()
    }

    /// `p(y)` over all clients; uniform when there is no data at all.
    pub fn prior(&self) -> [f64; NUM_CLASSES] {
        let total = self.total();
        let mut p = [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
        if total > 0 {
            for (y, py) in p.iter_mut().enumerate() {
                *py = self.class_total(y) as f64 / total as f64;
            }
        }
        p
    }

    /// Share of label-`y` samples held by client `k`: `counts[k][y] / Σ_j counts[j][y]`.
    pub fn share(&self, k: usize, y: usize) -> f64 {
        let t = self.class_total(y);
        if t == 0 {
            0.0
        } else {
            self.counts[k][y] as f64 / t as f64
        }
    }
}

/// Exact counts of `labels[i]` for each shard.
pub fn label_counts(shards: &[Vec<usize>], labels: &[usize]) -> LabelStats {
    LabelStats {
        counts: shards
            .iter()
            .map(|s| {
                let mut c = [0u64; NUM_CLASSES];
                for &i in s {
                    c[labels[i]] += 1;
                }
                c
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Dirichlet concentration; smaller is more heterogeneous.
    pub concentration: f64,
    pub n_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub spec: PartitionSpec,
    /// Indices into the partitioned dataset, ascending within each shard.
    pub shards: Vec<Vec<usize>>,
    pub stats: LabelStats,
}

fn dirichlet_sample(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed; only reachable for tiny α
        vec![1.0 / k as f64; k]
    }
}

/// Splits `n` items by `props` with largest-remainder rounding; ties go to
/// the lower client index.
pub fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Label-skewed partition: for each class, client proportions are drawn
/// from `Dir(α·1_K)` and the class's (shuffled) samples are dealt out by
/// those proportions.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Partition> {
    if spec.n_clients == 0 {
        return Err(FedError::InvalidConfig("n_clients must be ≥ 1".into()));
    }
    if !(spec.concentration > 0.0 && spec.concentration.is_finite()) {
        return Err(FedError::InvalidConfig("concentration must be finite and > 0".into()));
    }
    if labels.is_empty() {
        return Err(FedError::InvalidData("cannot partition an empty dataset".into()));
    }
    if spec.n_clients > labels.len() {
        warn!(
            "{} clients for {} samples: some shards will be empty",
            spec.n_clients,
            labels.len()
        );
    }
    let k = spec.n_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut shards = vec![Vec::new(); k];
    for y in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        idx.shuffle(&mut rng);
        let props = dirichlet_sample(&mut rng, spec.concentration, k);
        let counts = largest_remainder(&props, idx.len());
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for s in shards.iter_mut() {
        s.sort_unstable();
    }
    if shards.iter().any(|s| s.is_empty()) {
        warn!("partition at α={} left some clients empty", spec.concentration);
    }
    let stats = label_counts(&shards, labels);
    Ok(Partition {
        spec: *spec,
        shards,
        stats,
    })
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    spec: PartitionSpec,
    shards: Vec<Vec<String>>,
}

/// Writes `{"spec": {...}, "shards": [[ids...], ...]}`.
pub fn save_partition(p: &Partition, ds: &Dataset, path: &Path) -> Result<()> {
    let file = PartitionFile {
        spec: p.spec,
        shards: p
            .shards
            .iter()
            .map(|s| s.iter().map(|&i| ds.users[i].id.clone()).collect())
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_partition(path: &Path, ds: &Dataset) -> Result<Partition> {
    let file: PartitionFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let index: std::collections::HashMap<&str, usize> =
        ds.users.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
    let mut shards = Vec::with_capacity(file.shards.len());
    for s in &file.shards {
        let mut ids = Vec::with_capacity(s.len());
        for id in s {
            ids.push(*index.get(id.as_str()).ok_or_else(|| {
                FedError::InvalidData(format!("partition names unknown user `{id}`"))
            })?);
        }
        shards.push(ids);
    }
    let stats = label_counts(&shards, &ds.labels());
    Ok(Partition {
        spec: file.spec,
        shards,
        stats,
    })
}
