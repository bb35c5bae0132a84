//! Client selection, weighted aggregation, global-generator distillation and
//! the round loop for FedACK and the FedAvg / FedProx baselines.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use numkit::{AdamConfig, AdamState, ParamSet, Tape};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{gaussian, mix_seed, Broadcast, ClientState, ClientUpdate, LocalConfig};
use crate::data::{LabelStats, NUM_CLASSES};
use crate::error::{FedError, Result};
use crate::losses::{self, Teacher};
use crate::models::{ModelConfig, UserBatch};

const SERVER_STREAM: u64 = 0x5e_4e_e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Fraction `C` of clients taking part in each round.
    pub fraction: f64,
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn count(&self, k: usize) -> usize {
        ((self.fraction * k as f64).round() as usize).clamp(1, k.max(1))
    }
}

/// Uniform sample of `max(1, round(C·K))` distinct clients, sorted.
pub fn select_clients(policy: &SelectionPolicy, k: usize, round: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(FedError::InvalidConfig("no clients to select from".into()));
    }
    if !(policy.fraction > 0.0 && policy.fraction <= 1.0) {
        return Err(FedError::InvalidConfig(format!(
            "selection fraction {} outside (0, 1]",
            policy.fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[policy.seed, SERVER_STREAM, round as u64]));
    let mut ids = sample(&mut rng, k, policy.count(k)).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Aggregation weights `N_k / ΣN`, or uniform when every shard is empty.
pub fn aggregation_weights(sizes: &[u64]) -> Vec<f64> {
    let total: u64 = sizes.iter().sum();
    if total == 0 {
        warn!("all {} updates come from empty shards; using an unweighted mean", sizes.len());
        return vec![1.0 / sizes.len() as f64; sizes.len()];
    }
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Data-size weighted average of the extractor and `D1` stacks, summed in
/// ascending client-id order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<(ParamSet, ParamSet)> {
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let first = *ordered
        .first()
        .ok_or_else(|| FedError::InvalidData("nothing to aggregate".into()))?;
    let sizes: Vec<u64> = ordered.iter().map(|u| u.n_k).collect();
    let weights = aggregation_weights(&sizes);
    let mut extractor = first.extractor.zeros_like();
    let mut disc = first.d1.zeros_like();
    for (u, &w) in ordered.iter().zip(&weights) {
        extractor.add_scaled(&u.extractor, w)?;
        disc.add_scaled(&u.d1, w)?;
    }
    Ok((extractor, disc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    /// Generator distillation steps per round; `None` means the local epoch count.
    pub distill_steps: Option<usize>,
    pub distill_batch: usize,
    pub learning_rate: f64,
    /// Also step the global classifier head on the distillation loss.
    pub finetune_disc: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            distill_steps: None,
            distill_batch: 64,
            learning_rate: 0.01,
            finetune_disc: false,
        }
    }
}

pub struct ServerState {
    pub models: ModelConfig,
    pub extractor: ParamSet,
    pub disc: ParamSet,
    pub gen: ParamSet,
    gen_opt: AdamState,
    disc_opt: AdamState,
    pub round: usize,
    /// Latest label counts reported by each client, indexed by client id.
    pub label_stats: LabelStats,
}

impl ServerState {
    pub fn new(models: &ModelConfig, n_clients: usize, seed: u64, learning_rate: f64) -> Result<Self> {
        models.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SERVER_STREAM]));
        let extractor = models.extractor.init(&mut rng);
        let disc = models.discriminator.init(&mut rng);
        let gen = models.generator.init(&mut rng);
        let adam = AdamConfig::with_lr(learning_rate);
        Ok(Self {
            models: models.clone(),
            gen_opt: AdamState::new(&gen, adam),
            disc_opt: AdamState::new(&disc, adam),
            extractor,
            disc,
            gen,
            round: 0,
            label_stats: LabelStats {
                counts: vec![[0; NUM_CLASSES]; n_clients],
            },
        })
    }

    pub fn broadcast(&self, round: usize, with_gen: bool) -> Broadcast {
        Broadcast {
            round,
            extractor: self.extractor.clone(),
            disc: self.disc.clone(),
            gen: with_gen.then(|| self.gen.clone()),
        }
    }

    /// `steps` updates of the global generator against the teachers, with
    /// labels drawn from the prior of `stats` (rows aligned with `teachers`).
    /// Returns the mean loss over the steps.
    pub fn distill_global_generator<R: Rng + ?Sized>(
        &mut self,
        teachers: &[&ParamSet],
        stats: &LabelStats,
        steps: usize,
        batch: usize,
        finetune_disc: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if steps == 0 {
            return Ok(0.0);
        }
        if teachers.len() != stats.n_clients() {
            return Err(FedError::InvalidData(format!(
                "{} teachers but label stats for {} clients",
                teachers.len(),
                stats.n_clients()
            )));
        }
        let prior = stats.prior();
        for (y, &p) in prior.iter().enumerate() {
            if p == 0.0 {
                warn!("class {y} absent from participants; it will not be sampled");
            }
        }
        let disc_cfg = self.models.discriminator.clone();
        let gen_cfg = self.models.generator.clone();
        let mut total = 0.0;
        for _ in 0..steps {
            let labels: Vec<usize> = (0..batch.max(1)).map(|_| sample_label(rng, &prior)).collect();
            let noise = gaussian(rng, labels.len(), gen_cfg.noise_dim);
            let mut tape = Tape::new();
            let gb = tape.bind(&self.gen, true);
            let db = tape.bind(&self.disc, finetune_disc);
            let tbs: Vec<_> = teachers.iter().map(|t| tape.bind(t, false)).collect();
            let z = tape.constant(noise);
            let pseudo = gen_cfg.forward(&mut tape, &gb, z, &labels)?;
            let ts: Vec<Teacher> = tbs
                .iter()
                .enumerate()
                .map(|(i, b)| Teacher { bound: b, stats_row: i })
                .collect();
            let loss = losses::global_gen_loss(&mut tape, &disc_cfg, &ts, &db, pseudo, &labels, stats)?;
            let v = tape.item(loss);
            if !v.is_finite() {
                return Err(FedError::NonFiniteLoss("global generator distillation".into()));
            }
            let grads = tape.backward(loss)?;
            self.gen_opt.step(&mut self.gen, &grads.for_bound(&tape, &gb))?;
            if finetune_disc {
                self.disc_opt.step(&mut self.disc, &grads.for_bound(&tape, &db))?;
            }
            total += v;
        }
        Ok(total / steps as f64)
    }

    /// Accuracy and mean cross-entropy of the global `(ε, D)` on `test`.
    pub fn evaluate(&self, test: &UserBatch) -> Result<(f64, f64)> {
        evaluate_models(&self.models, &self.extractor, &self.disc, test)
    }
}

fn sample_label<R: Rng + ?Sized>(rng: &mut R, prior: &[f64; NUM_CLASSES]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (y, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return y;
        }
    }
    // u landed in rounding slack; take the last class with mass
    prior.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn evaluate_models(models: &ModelConfig, extractor: &ParamSet, disc: &ParamSet, test: &UserBatch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let eb = tape.bind(extractor, false);
    let db = tape.bind(disc, false);
    let reps = models.extractor.forward(&mut tape, &eb, test)?;
    let logits = models.discriminator.forward(&mut tape, &db, reps)?;
    let loss = losses::cls_loss(&mut tape, logits, &test.labels)?;
    let l = tape.value(logits);
    let correct = (0..l.rows())
        .filter(|&i| {
            let row = l.row_slice(i);
            let pred = if row[1] > row[0] { 1 } else { 0 };
            pred == test.labels[i]
        })
        .count();
    Ok((correct as f64 / test.len() as f64, tape.item(loss)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedack,
    Fedavg,
    Fedprox,
}

impl FromStr for Strategy {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedack" => Ok(Strategy::Fedack),
            "fedavg" => Ok(Strategy::Fedavg),
            "fedprox" => Ok(Strategy::Fedprox),
            other => Err(FedError::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Fedack => "fedack",
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox => "fedprox",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub local: LocalConfig,
    pub selection: SelectionPolicy,
    pub server: ServerConfig,
    /// Proximal weight for FedProx.
    pub prox_rho: f64,
    /// Seed for client-side randomness.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub accuracy: f64,
    pub test_loss: f64,
    /// Mean post-training shard loss over non-empty participants.
    pub mean_loss: f64,
    pub participants: Vec<usize>,
    /// Label counts reported by each participant, in `participants` order.
    pub label_counts: Vec<[u64; NUM_CLASSES]>,
    pub distill_loss: Option<f64>,
}

fn train_selected(
    clients: &mut [ClientState],
    selected: &[usize],
    round: usize,
    work: impl Fn(&mut ClientState) -> Result<ClientUpdate> + Sync,
) -> Result<Vec<ClientUpdate>> {
    let results: Vec<Result<ClientUpdate>> = clients
        .par_iter_mut()
        .filter(|c| selected.binary_search(&c.id).is_ok())
        .map(|c| {
            work(c).map_err(|e| FedError::Client {
                client: c.id,
                round,
                source: Box::new(e),
            })
        })
        .collect();
    results.into_iter().collect()
}

fn mean_loss(updates: &[ClientUpdate]) -> f64 {
    let losses: Vec<f64> = updates.iter().filter(|u| u.n_k > 0).map(|u| u.loss).collect();
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

fn finish_round(
    state: &mut ServerState,
    updates: &[ClientUpdate],
    selected: Vec<usize>,
    test: &UserBatch,
    distill_loss: Option<f64>,
) -> Result<RoundReport> {
    let (accuracy, test_loss) = state.evaluate(test)?;
    debug!("round {}: accuracy {accuracy:.4}", state.round);
    Ok(RoundReport {
        round: state.round,
        accuracy,
        test_loss,
        mean_loss: mean_loss(updates),
        participants: selected,
        label_counts: updates.iter().map(|u| u.counts).collect(),
        distill_loss,
    })
}

fn record_counts(state: &mut ServerState, updates: &[ClientUpdate]) {
    for u in updates {
        if let Some(row) = state.label_stats.counts.get_mut(u.client_id) {
            *row = u.counts;
        }
    }
}

/// One FedACK round: select, broadcast, local three-stage training,
/// aggregation, generator distillation against this round's `D1`s, and
/// evaluation of the aggregated model.
pub fn run_round(state: &mut ServerState, clients: &mut [ClientState], test: &UserBatch, cfg: &RoundConfig) -> Result<RoundReport> {
    state.round += 1;
    let round = state.round;
    let selected = select_clients(&cfg.selection, clients.len(), round)?;
    let msg = state.broadcast(round, true);
    let updates = train_selected(clients, &selected, round, |c| c.local_round(&msg, &cfg.local, cfg.seed))?;
    record_counts(state, &updates);

    let (extractor, disc) = aggregate(&updates)?;
    state.extractor = extractor;
    state.disc = disc;

    let stats = LabelStats {
        counts: updates.iter().map(|u| u.counts).collect(),
    };
    let teachers: Vec<&ParamSet> = updates.iter().map(|u| &u.d1).collect();
    let steps = cfg.server.distill_steps.unwrap_or(cfg.local.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SERVER_STREAM, round as u64, 1]));
    let distill = if stats.total() == 0 {
        warn!("round {round}: no labelled data among participants, skipping distillation");
        None
    } else {
        Some(state.distill_global_generator(
            &teachers,
            &stats,
            steps,
            cfg.server.distill_batch,
            cfg.server.finetune_disc,
            &mut rng,
        )?)
    };
    finish_round(state, &updates, selected, test, distill)
}

/// One FedAvg or FedProx round (no generators, distillation or contrastive term).
pub fn baseline_round(
    state: &mut ServerState,
    clients: &mut [ClientState],
    test: &UserBatch,
    strategy: Strategy,
    cfg: &RoundConfig,
) -> Result<RoundReport> {
    let rho = match strategy {
        Strategy::Fedavg => 0.0,
        Strategy::Fedprox => cfg.prox_rho,
        Strategy::Fedack => {
            return Err(FedError::InvalidConfig("fedack is not a baseline strategy".into()));
        }
    };
    state.round += 1;
    let round = state.round;
    let selected = select_clients(&cfg.selection, clients.len(), round)?;
    let msg = state.broadcast(round, false);
    let updates = train_selected(clients, &selected, round, |c| c.baseline_round(&msg, &cfg.local, rho, cfg.seed))?;
    record_counts(state, &updates);
    let (extractor, disc) = aggregate(&updates)?;
    state.extractor = extractor;
    state.disc = disc;
    finish_round(state, &updates, selected, test, None)
}
