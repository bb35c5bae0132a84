//! Experiment orchestration: configuration, multi-seed training runs,
//! metrics files, checkpoints, feature export and sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use numkit::ParamSet;
use serde::{Deserialize, Serialize, Serializer};

use crate::client::{mix_seed, ClientState, LocalConfig};
use crate::data::{self, Dataset, Partition, PartitionSpec, SynthSpec, NUM_CLASSES};
use crate::error::{FedError, Result};
use crate::losses::LossWeights;
use crate::models::{prepare, Checkpoint, ModelConfig, PreparedUser, UserBatch};
use crate::server::{self, RoundConfig, RoundReport, SelectionPolicy, ServerConfig, ServerState, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedack,
    /// FedACK without the contrastive term.
    FedackA,
    Fedavg,
    Fedprox,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Fedack, Method::FedackA, Method::Fedavg, Method::Fedprox];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedack => "fedack",
            Method::FedackA => "fedack_a",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FedError::InvalidConfig(format!("unknown method `{s}` (expected fedack, fedack_a, fedavg or fedprox)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Load users from this JSONL file instead of generating them.
    pub dataset_path: Option<PathBuf>,
    pub synth: SynthSpec,
    pub test_frac: f64,
    pub partition: PartitionSpec,
    pub method: Method,
    pub rounds: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub fraction: f64,
    pub prox_rho: f64,
    pub server: ServerConfig,
    /// Width of the user representation; 2 enables feature export.
    pub feature_dim: usize,
    /// Full architecture override; dims must match the data.
    pub model: Option<ModelConfig>,
    pub seeds: Vec<u64>,
    /// Accuracy thresholds reported by rounds-to-target.
    pub targets: Vec<f64>,
    /// Also checkpoint every this many rounds (the last round is always saved).
    pub checkpoint_every: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            synth: SynthSpec::default(),
            test_frac: 0.2,
            partition: PartitionSpec {
                concentration: 0.1,
                n_clients: 10,
                seed: 0,
            },
            method: Method::Fedack,
            rounds: 100,
            epochs: 5,
            batch: 64,
            learning_rate: 0.01,
            weights: LossWeights::default(),
            fraction: 0.5,
            prox_rho: 0.01,
            server: ServerConfig::default(),
            feature_dim: 16,
            model: None,
            seeds: vec![0, 1, 2],
            targets: vec![0.8, 0.9],
            checkpoint_every: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(FedError::InvalidConfig("rounds, epochs and batch must all be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FedError::InvalidConfig("learning_rate must be finite and > 0".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(FedError::InvalidConfig("fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.test_frac) {
            return Err(FedError::InvalidConfig("test_frac must lie in [0, 1)".into()));
        }
        if self.prox_rho < 0.0 || !self.prox_rho.is_finite() {
            return Err(FedError::InvalidConfig("prox_rho must be finite and ≥ 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(FedError::InvalidConfig("need at least one seed".into()));
        }
        if self.targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(FedError::InvalidConfig("targets must lie in (0, 1)".into()));
        }
        self.weights.validate()
    }

    /// Loss weights after applying the method (the ablation zeroes `μ`).
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.method == Method::FedackA {
            w.mu = 0.0;
        }
        w
    }

    pub fn model_config(&self, header: &data::DatasetHeader) -> Result<ModelConfig> {
        let m = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::new(header.prop_dim, header.embed_dim, self.feature_dim),
        };
        if m.extractor.prop_dim != header.prop_dim || m.extractor.embed_dim != header.embed_dim {
            return Err(FedError::InvalidConfig(format!(
                "model expects P={} d={} but data has P={} d={}",
                m.extractor.prop_dim, m.extractor.embed_dim, header.prop_dim, header.embed_dim
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.epochs,
            batch: self.batch,
            learning_rate: self.learning_rate,
            weights: self.effective_weights(),
        }
    }

    /// Stable hex digest of the configuration.
    pub fn hash(&self) -> String {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).expect("serializable").hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Round index at which a target accuracy was first reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRound {
    Reached(usize),
    Unreached,
}

impl fmt::Display for TargetRound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetRound::Reached(r) => write!(f, "{r}"),
            TargetRound::Unreached => f.write_str("unreached"),
        }
    }
}

impl Serialize for TargetRound {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetRound::Reached(r) => s.serialize_u64(*r as u64),
            TargetRound::Unreached => s.serialize_str("unreached"),
        }
    }
}

impl<'de> Deserialize<'de> for TargetRound {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|r| TargetRound::Reached(r as usize))
                .ok_or_else(|| serde::de::Error::custom("round must be a non-negative integer")),
            serde_json::Value::String(s) if s == "unreached" => Ok(TargetRound::Unreached),
            other => Err(serde::de::Error::custom(format!("bad target round {other}"))),
        }
    }
}

/// First 1-based round with `accuracy ≥ target`.
pub fn rounds_to_target(curve: &[f64], target: f64) -> Result<TargetRound> {
    if curve.is_empty() {
        return Err(FedError::InvalidData("empty accuracy curve".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(FedError::InvalidConfig(format!("target {target} outside (0, 1)")));
    }
    Ok(curve
        .iter()
        .position(|&a| a >= target)
        .map_or(TargetRound::Unreached, |i| TargetRound::Reached(i + 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub curve: Vec<f64>,
    pub max_accuracy: f64,
    pub final_accuracy: f64,
    pub rounds_to_target: BTreeMap<String, TargetRound>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
}

/// Everything a finished run leaves in memory.
pub struct RunOutcome {
    pub result: RunResult,
    pub reports: Vec<RoundReport>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
}

/// Dataset, stratified train/test split and client partition of the training
/// split for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset, Partition)> {
    let ds = match &cfg.dataset_path {
        Some(p) => data::load_jsonl(p)?,
        None => data::synth_dataset(&cfg.synth)?,
    };
    let (train, test) = data::train_test_split(&ds, cfg.test_frac, mix_seed(&[seed, 0x5917]));
    if train.is_empty() || test.is_empty() {
        return Err(FedError::InvalidData(format!(
            "split left {} train and {} test users",
            train.len(),
            test.len()
        )));
    }
    let spec = PartitionSpec {
        seed: mix_seed(&[cfg.partition.seed, seed]),
        ..cfg.partition
    };
    let partition = data::dirichlet_partition(&train.labels(), &spec)?;
    Ok((train, test, partition))
}

fn client_states(
    cfg: &ExperimentConfig,
    models: &ModelConfig,
    server: &ServerState,
    train: &[PreparedUser],
    partition: &Partition,
    seed: u64,
) -> Result<Vec<ClientState>> {
    partition
        .shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let users = shard.iter().map(|&i| train[i].clone()).collect();
            ClientState::new(k, users, models, &server.extractor, &server.disc, seed, cfg.learning_rate)
        })
        .collect()
}

struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "round,accuracy,mean_loss,participants")?;
        Ok(Self { file })
    }

    fn row(&mut self, r: &RoundReport) -> Result<()> {
        let participants: Vec<String> = r.participants.iter().map(|p| p.to_string()).collect();
        writeln!(self.file, "{},{},{},{}", r.round, r.accuracy, r.mean_loss, participants.join(" "))?;
        self.file.flush()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes `round_{t}/` with the global networks, the round report and each
/// client's current local extractor.
pub fn write_checkpoint(dir: &Path, seed: u64, server: &ServerState, clients: &[ClientState], report: &RoundReport) -> Result<PathBuf> {
    let round_dir = dir.join(format!("round_{}", report.round));
    fs::create_dir_all(round_dir.join("clients"))?;
    let ckpt = |params: &ParamSet| Checkpoint {
        config: server.models.clone(),
        seed,
        params: params.clone(),
    };
    write_json(&round_dir.join("global_extractor.json"), &ckpt(&server.extractor))?;
    write_json(&round_dir.join("global_disc.json"), &ckpt(&server.disc))?;
    write_json(&round_dir.join("global_gen.json"), &ckpt(&server.gen))?;
    write_json(&round_dir.join("report.json"), report)?;
    for c in clients {
        write_json(&round_dir.join("clients").join(format!("client_{}_extractor.json", c.id)), &ckpt(&c.extractor))?;
    }
    Ok(round_dir)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint<ModelConfig>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One seeded run. With `out` set, writes `metrics.csv`, `result.json`,
/// `config.json` and checkpoints there.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test, partition) = prepare_data(cfg, seed)?;
    let models = cfg.model_config(&train.header)?;
    let mut server = ServerState::new(&models, partition.shards.len(), seed, cfg.learning_rate)?;
    let prepared = prepare(&train);
    let mut clients = client_states(cfg, &models, &server, &prepared, &partition, seed)?;
    let test_users = prepare(&test);
    let test_refs: Vec<&PreparedUser> = test_users.iter().collect();
    let test_batch = UserBatch::new(&test_refs, models.extractor.embed_dim)?;

    let round_cfg = RoundConfig {
        local: cfg.local_config(),
        selection: SelectionPolicy {
            fraction: cfg.fraction,
            seed,
        },
        server: cfg.server,
        prox_rho: cfg.prox_rho,
        seed,
    };

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("config.json"), cfg)?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let report = match cfg.method {
            Method::Fedack | Method::FedackA => server::run_round(&mut server, &mut clients, &test_batch, &round_cfg)?,
            Method::Fedavg => server::baseline_round(&mut server, &mut clients, &test_batch, Strategy::Fedavg, &round_cfg)?,
            Method::Fedprox => server::baseline_round(&mut server, &mut clients, &test_batch, Strategy::Fedprox, &round_cfg)?,
        };
        if let Some(m) = metrics.as_mut() {
            m.row(&report)?;
        }
        if let Some(dir) = out {
            let periodic = cfg.checkpoint_every.is_some_and(|n| n > 0 && t % n == 0);
            if periodic || t == cfg.rounds {
                write_checkpoint(dir, seed, &server, &clients, &report)?;
            }
        }
        info!(
            "{} seed {seed} round {t}/{}: accuracy {:.4} loss {:.4}",
            cfg.method, cfg.rounds, report.accuracy, report.mean_loss
        );
        reports.push(report);
    }

    let curve: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let mut targets = BTreeMap::new();
    for &t in &cfg.targets {
        targets.insert(format!("{t}"), rounds_to_target(&curve, t)?);
    }
    let result = RunResult {
        method: cfg.method,
        seed,
        max_accuracy: curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_accuracy: *curve.last().expect("rounds ≥ 1"),
        curve,
        rounds_to_target: targets,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
    };
    if let Some(dir) = out {
        write_json(&dir.join("result.json"), &result)?;
    }
    Ok(RunOutcome {
        result,
        reports,
        server,
        clients,
        test,
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub mean_max_accuracy: f64,
    pub std_max_accuracy: f64,
    pub mean_final_accuracy: f64,
    pub runs: Vec<RunResult>,
}

/// Runs every seed in `cfg.seeds`, each under `out/seed_{s}`.
pub fn train_all(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Summary> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        let dir = out.map(|o| o.join(format!("seed_{s}")));
        runs.push(train(cfg, s, dir.as_deref())?.result);
    }
    let maxes: Vec<f64> = runs.iter().map(|r| r.max_accuracy).collect();
    let finals: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
    let (mean, std) = mean_std(&maxes);
    let summary = Summary {
        method: cfg.method,
        seeds: cfg.seeds.clone(),
        mean_max_accuracy: mean,
        std_max_accuracy: std,
        mean_final_accuracy: mean_std(&finals).0,
        runs,
    };
    if let Some(o) = out {
        write_json(&o.join("summary.json"), &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub client_id: usize,
    pub user_id: String,
    pub features: [f64; 2],
    pub label: usize,
}

/// Pushes every test user through each listed client's extractor.
pub fn export_features(models: &ModelConfig, extractors: &[(usize, &ParamSet)], test: &Dataset) -> Result<Vec<FeatureRow>> {
    if models.extractor.feature_dim != 2 {
        return Err(FedError::InvalidConfig(format!(
            "feature export needs feature_dim = 2 (got {}); retrain with \"feature_dim\": 2",
            models.extractor.feature_dim
        )));
    }
    let users = prepare(test);
    let refs: Vec<&PreparedUser> = users.iter().collect();
    let batch = UserBatch::new(&refs, models.extractor.embed_dim)?;
    let mut rows = Vec::with_capacity(extractors.len() * users.len());
    for &(client_id, params) in extractors {
        let reps = models.extractor.represent(params, &batch)?;
        for (i, u) in test.users.iter().enumerate() {
            let r = reps.row_slice(i);
            rows.push(FeatureRow {
                client_id,
                user_id: u.id.clone(),
                features: [r[0], r[1]],
                label: u.label,
            });
        }
    }
    Ok(rows)
}

pub fn write_features_csv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["client_id", "user_id", "f1", "f2", "label"])?;
    for r in rows {
        w.write_record([
            r.client_id.to_string(),
            r.user_id.clone(),
            r.features[0].to_string(),
            r.features[1].to_string(),
            r.label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["client_id", "user_id", "f1", "f2", "label"] {
        return Err(FedError::InvalidData(format!(
            "expected header client_id,user_id,f1,f2,label, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| FedError::Malformed {
            line,
            msg: format!("bad {what}"),
        };
        let label: usize = rec[4].parse().map_err(|_| bad("label"))?;
        if label >= NUM_CLASSES {
            return Err(FedError::LabelOutOfRange(label));
        }
        rows.push(FeatureRow {
            client_id: rec[0].parse().map_err(|_| bad("client_id"))?,
            user_id: rec[1].to_string(),
            features: [rec[2].parse().map_err(|_| bad("f1"))?, rec[3].parse().map_err(|_| bad("f2"))?],
            label,
        });
    }
    Ok(rows)
}

/// Per-client, per-class mean feature vectors.
pub fn class_means(rows: &[FeatureRow]) -> BTreeMap<(usize, usize), [f64; 2]> {
    let mut sums: BTreeMap<(usize, usize), ([f64; 2], usize)> = BTreeMap::new();
    for r in rows {
        let e = sums.entry((r.client_id, r.label)).or_insert(([0.0; 2], 0));
        e.0[0] += r.features[0];
        e.0[1] += r.features[1];
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, [s[0] / n as f64, s[1] / n as f64]))
        .collect()
}

fn cosine2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let aa = a[0] * a[0] + a[1] * a[1];
    let bb = b[0] * b[0] + b[1] * b[1];
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        // sqrt(aa·bb) rather than |a|·|b| keeps cos(a, ±a) exactly ±1
        (a[0] * b[0] + a[1] * b[1]) / (aa * bb).sqrt()
    }
}

/// Mean over classes of the mean pairwise cosine between clients'
/// class-mean features. Pairs where either client lacks the class are
/// skipped, as are classes with fewer than two clients.
pub fn feature_consistency_score(rows: &[FeatureRow]) -> Result<f64> {
    let means = class_means(rows);
    let mut clients: Vec<usize> = rows.iter().map(|r| r.client_id).collect();
    clients.sort_unstable();
    clients.dedup();
    if clients.len() < 2 {
        return Err(FedError::InvalidData("consistency needs at least two clients".into()));
    }
    let mut per_class = Vec::new();
    for y in 0..NUM_CLASSES {
        let mut sims = Vec::new();
        for (i, &a) in clients.iter().enumerate() {
            for &b in &clients[i + 1..] {
                if let (Some(&ma), Some(&mb)) = (means.get(&(a, y)), means.get(&(b, y))) {
                    sims.push(cosine2(ma, mb));
                }
            }
        }
        if !sims.is_empty() {
            per_class.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    if per_class.is_empty() {
        return Err(FedError::InvalidData("no class is shared by two clients".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Mu,
    Tau,
    Concentration,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Mu => "mu",
            SweepParam::Tau => "tau",
            SweepParam::Concentration => "concentration",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepParam::Gamma => cfg.weights.gamma = v,
            SweepParam::Mu => cfg.weights.mu = v,
            SweepParam::Tau => cfg.weights.tau = v,
            SweepParam::Concentration => cfg.partition.concentration = v,
        }
    }
}

impl FromStr for SweepParam {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "mu" => Ok(SweepParam::Mu),
            "tau" => Ok(SweepParam::Tau),
            "concentration" | "alpha" => Ok(SweepParam::Concentration),
            other => Err(FedError::InvalidConfig(format!(
                "unknown sweep parameter `{other}` (expected gamma, mu, tau or concentration)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub max_accuracy: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub runs: usize,
    pub mean_max_accuracy: f64,
    pub std_max_accuracy: f64,
}

/// One training run per grid value per seed. Writes `runs.csv` (one row per
/// run) and `sweep.csv` (mean ± std per grid value) under `out`.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, grid: &[f64], out: Option<&Path>) -> Result<(Vec<SweepRow>, Vec<SweepPoint>)> {
    if grid.is_empty() {
        return Err(FedError::InvalidConfig("sweep grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len() * base.seeds.len());
    let mut points = Vec::with_capacity(grid.len());
    for &v in grid {
        let mut cfg = base.clone();
        param.apply(&mut cfg, v);
        cfg.validate()?;
        let mut maxes = Vec::new();
        for &s in &cfg.seeds {
            let dir = out.map(|o| o.join(format!("{}_{v}", param.as_str())).join(format!("seed_{s}")));
            let r = train(&cfg, s, dir.as_deref())?.result;
            maxes.push(r.max_accuracy);
            rows.push(SweepRow {
                param: param.as_str().into(),
                value: v,
                seed: s,
                max_accuracy: r.max_accuracy,
                final_accuracy: r.final_accuracy,
            });
        }
        let (mean, std) = mean_std(&maxes);
        points.push(SweepPoint {
            param: param.as_str().into(),
            value: v,
            runs: maxes.len(),
            mean_max_accuracy: mean,
            std_max_accuracy: std,
        });
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        let mut w = csv::Writer::from_path(o.join("runs.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(o.join("sweep.csv"))?;
        for p in &points {
            w.serialize(p)?;
        }
        w.flush()?;
    }
    Ok((rows, points))
}
