//! One client's local round: classifier heads, then extractor, then local
//! generator, each stage training one group of networks while the others
//! stay frozen.

use log::warn;
use numkit::{AdamConfig, AdamState, Bound, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{FedError, Result};
use crate::losses::{self, DiscInputs, LossWeights};
use crate::models::{ModelConfig, PreparedUser, UserBatch};

/// Hyperparameters of local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 64,
            learning_rate: 0.01,
            weights: LossWeights::default(),
        }
    }
}

/// Parameters the server sends to every selected client.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub round: usize,
    pub extractor: ParamSet,
    pub disc: ParamSet,
    /// Absent for strategies without a global generator.
    pub gen: Option<ParamSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub extractor: ParamSet,
    pub d1: ParamSet,
    pub n_k: u64,
    pub counts: [u64; NUM_CLASSES],
    /// Post-training cross-entropy of `D1 ∘ ε` on the shard (0 for empty shards).
    pub loss: f64,
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// RNG for one client in one round.
pub fn client_rng(seed: u64, round: usize, client_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, round as u64, client_id as u64]))
}

/// Shuffled index chunks covering `0..n`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub fn uniform_labels<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect()
}

pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row_slice(i)).collect();
    Tensor::from_rows(&rows).expect("consistent widths")
}

fn check_loss(stage: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(FedError::NonFiniteLoss(stage.into()))
    }
}

pub(crate) fn prox_term(tape: &mut Tape, bound: &Bound, anchor: &ParamSet) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (&v, (_, g)) in bound.vars().iter().zip(anchor.iter()) {
        let g = tape.constant(g.clone());
        let d = tape.sub(v, g)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

pub struct ClientState {
    pub id: usize,
    pub models: ModelConfig,
    users: Vec<PreparedUser>,
    counts: [u64; NUM_CLASSES],
    pub extractor: ParamSet,
    pub d1: ParamSet,
    pub d2: ParamSet,
    pub local_gen: ParamSet,
    pub extractor_prev: ParamSet,
    global_extractor: ParamSet,
    global_gen: Option<ParamSet>,
    d2_opt: AdamState,
    gen_opt: AdamState,
    learning_rate: f64,
    received_round: Option<usize>,
}

impl ClientState {
    /// `initial_extractor` / `initial_disc` are the server's starting
    /// networks; `D2` and `G_k` are drawn from a client-specific seed.
    pub fn new(
        id: usize,
        users: Vec<PreparedUser>,
        models: &ModelConfig,
        initial_extractor: &ParamSet,
        initial_disc: &ParamSet,
        seed: u64,
        learning_rate: f64,
    ) -> Result<Self> {
        models.validate()?;
        let mut counts = [0u64; NUM_CLASSES];
        for u in &users {
            if u.label >= NUM_CLASSES {
                return Err(FedError::LabelOutOfRange(u.label));
            }
            counts[u.label] += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, u64::MAX, id as u64]));
        let d2 = models.local_discriminator().init(&mut rng);
        let local_gen = models.generator.init(&mut rng);
        let adam = AdamConfig::with_lr(learning_rate);
        Ok(Self {
            id,
            models: models.clone(),
            users,
            counts,
            extractor: initial_extractor.clone(),
            d1: initial_disc.clone(),
            d2_opt: AdamState::new(&d2, adam),
            gen_opt: AdamState::new(&local_gen, adam),
            d2,
            local_gen,
            extractor_prev: initial_extractor.clone(),
            global_extractor: initial_extractor.clone(),
            global_gen: None,
            learning_rate,
            received_round: None,
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn counts(&self) -> [u64; NUM_CLASSES] {
        self.counts
    }

    pub fn users(&self) -> &[PreparedUser] {
        &self.users
    }

    pub fn global_extractor(&self) -> &ParamSet {
        &self.global_extractor
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }

    fn all_batch(&self) -> Result<UserBatch> {
        let idx: Vec<usize> = (0..self.users.len()).collect();
        UserBatch::from_indices(&self.users, &idx, self.models.extractor.embed_dim)
    }

    fn batch(&self, idx: &[usize]) -> Result<UserBatch> {
        UserBatch::from_indices(&self.users, idx, self.models.extractor.embed_dim)
    }

    pub fn receive_broadcast(&mut self, msg: &Broadcast) -> Result<()> {
        self.extractor.check_compatible(&msg.extractor)?;
        self.d1.check_compatible(&msg.disc)?;
        if let Some(g) = &msg.gen {
            self.local_gen.check_compatible(g)?;
        }
        self.extractor = msg.extractor.clone();
        self.d1 = msg.disc.clone();
        self.global_extractor = msg.extractor.clone();
        self.global_gen = msg.gen.clone();
        self.received_round = Some(msg.round);
        Ok(())
    }

    /// Trains `D1` and `D2` with the extractor and both generators frozen.
    /// Returns the mean objective over all steps (0 if none ran).
    pub fn stage1_train_discriminators<R: Rng + ?Sized>(&mut self, cfg: &LocalConfig, rng: &mut R) -> Result<f64> {
        if self.users.is_empty() {
            warn!("client {}: empty shard, skipping discriminator stage", self.id);
            return Ok(0.0);
        }
        if cfg.epochs == 0 {
            return Ok(0.0);
        }
        let global_gen = self
            .global_gen
            .clone()
            .ok_or_else(|| FedError::InvalidData("stage 1 needs a global generator; receive a broadcast first".into()))?;
        let reps_all = self.models.extractor.represent(&self.extractor, &self.all_batch()?)?;
        let labels_all: Vec<usize> = self.users.iter().map(|u| u.label).collect();
        let d1_cfg = self.models.discriminator.clone();
        let d2_cfg = self.models.local_discriminator();
        let gen_cfg = self.models.generator.clone();
        let mut d1_opt = AdamState::new(&self.d1, self.adam());
        let (mut sum, mut steps) = (0.0, 0usize);
        for _ in 0..cfg.epochs {
            for idx in minibatches(self.users.len(), cfg.batch, rng) {
                let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
                let b = idx.len();
                let z_g = gaussian(rng, b, gen_cfg.noise_dim);
                let z_k = gaussian(rng, b, gen_cfg.noise_dim);
                let y_k = uniform_labels(rng, b);

                let mut tape = Tape::new();
                let gb = tape.bind(&global_gen, false);
                let kb = tape.bind(&self.local_gen, false);
                let zg = tape.constant(z_g);
                let zk = tape.constant(z_k);
                let global_pseudo = gen_cfg.forward(&mut tape, &gb, zg, &labels)?;
                let local_pseudo = gen_cfg.forward(&mut tape, &kb, zk, &y_k)?;
                let reps = tape.constant(select_rows(&reps_all, &idx));
                let b1 = tape.bind(&self.d1, true);
                let b2 = tape.bind(&self.d2, true);
                let inputs = DiscInputs {
                    reps,
                    labels: &labels,
                    global_pseudo,
                    local_pseudo,
                };
                let parts = losses::disc_total_loss(&mut tape, (&d1_cfg, &b1), (&d2_cfg, &b2), &inputs, &cfg.weights)?;
                let v = tape.item(parts.total);
                check_loss("discriminator stage", v)?;
                let grads = tape.backward(parts.total)?;
                d1_opt.step(&mut self.d1, &grads.for_bound(&tape, &b1))?;
                self.d2_opt.step(&mut self.d2, &grads.for_bound(&tape, &b2))?;
                sum += v;
                steps += 1;
            }
        }
        Ok(sum / steps as f64)
    }

    /// Trains the extractor with both heads frozen; `r_glo` comes from the
    /// retained global extractor and `r_pre` from the previous round's local
    /// one, both fixed for the whole stage.
    pub fn stage2_train_extractor<R: Rng + ?Sized>(&mut self, cfg: &LocalConfig, rng: &mut R) -> Result<f64> {
        if self.users.is_empty() {
            warn!("client {}: empty shard, skipping extractor stage", self.id);
            return Ok(0.0);
        }
        if cfg.epochs == 0 {
            return Ok(0.0);
        }
        let all = self.all_batch()?;
        let r_glo_all = self.models.extractor.represent(&self.global_extractor, &all)?;
        let r_pre_all = self.models.extractor.represent(&self.extractor_prev, &all)?;
        let d1_cfg = self.models.discriminator.clone();
        let d2_cfg = self.models.local_discriminator();
        let mut opt = AdamState::new(&self.extractor, self.adam());
        let (mut sum, mut steps) = (0.0, 0usize);
        for _ in 0..cfg.epochs {
            for idx in minibatches(self.users.len(), cfg.batch, rng) {
                let batch = self.batch(&idx)?;
                let mut tape = Tape::new();
                let eb = tape.bind(&self.extractor, true);
                let b1 = tape.bind(&self.d1, false);
                let b2 = tape.bind(&self.d2, false);
                let reps = self.models.extractor.forward(&mut tape, &eb, &batch)?;
                let r_glo = tape.constant(select_rows(&r_glo_all, &idx));
                let r_pre = tape.constant(select_rows(&r_pre_all, &idx));
                let parts = losses::extractor_total_loss(
                    &mut tape,
                    (&d1_cfg, &b1),
                    (&d2_cfg, &b2),
                    reps,
                    r_glo,
                    r_pre,
                    &batch.labels,
                    &cfg.weights,
                )?;
                let v = tape.item(parts.total);
                check_loss("extractor stage", v)?;
                let grads = tape.backward(parts.total)?;
                opt.step(&mut self.extractor, &grads.for_bound(&tape, &eb))?;
                sum += v;
                steps += 1;
            }
        }
        Ok(sum / steps as f64)
    }

    /// Trains `G_k` against the frozen heads. Each epoch runs as many steps
    /// as the shard has minibatches, with pseudo-batches of the same size.
    pub fn stage3_train_local_generator<R: Rng + ?Sized>(&mut self, cfg: &LocalConfig, rng: &mut R) -> Result<f64> {
        if self.users.is_empty() || cfg.epochs == 0 {
            return Ok(0.0);
        }
        let d1_cfg = self.models.discriminator.clone();
        let d2_cfg = self.models.local_discriminator();
        let gen_cfg = self.models.generator.clone();
        let n = self.users.len();
        let batch = cfg.batch.max(1);
        let per_epoch = n.div_ceil(batch);
        let (mut sum, mut steps) = (0.0, 0usize);
        for _ in 0..cfg.epochs {
            for s in 0..per_epoch {
                let b = batch.min(n - s * batch);
                let noise = gaussian(rng, b, gen_cfg.noise_dim);
                let labels = uniform_labels(rng, b);
                let mut tape = Tape::new();
                let gb = tape.bind(&self.local_gen, true);
                let b1 = tape.bind(&self.d1, false);
                let b2 = tape.bind(&self.d2, false);
                let z = tape.constant(noise.clone());
                let pseudo = gen_cfg.forward(&mut tape, &gb, z, &labels)?;
                let parts = losses::local_gen_loss(&mut tape, (&d1_cfg, &b1), (&d2_cfg, &b2), pseudo, &noise, &labels)?;
                let v = tape.item(parts.total);
                check_loss("local generator stage", v)?;
                let grads = tape.backward(parts.total)?;
                self.gen_opt.step(&mut self.local_gen, &grads.for_bound(&tape, &gb))?;
                sum += v;
                steps += 1;
            }
        }
        Ok(sum / steps as f64)
    }

    /// Mean cross-entropy of `D1 ∘ ε` on the shard.
    pub fn shard_loss(&self) -> Result<f64> {
        if self.users.is_empty() {
            return Ok(0.0);
        }
        let all = self.all_batch()?;
        let mut tape = Tape::new();
        let eb = tape.bind(&self.extractor, false);
        let b1 = tape.bind(&self.d1, false);
        let reps = self.models.extractor.forward(&mut tape, &eb, &all)?;
        let logits = self.models.discriminator.forward(&mut tape, &b1, reps)?;
        let loss = losses::cls_loss(&mut tape, logits, &all.labels)?;
        Ok(tape.item(loss))
    }

    fn update(&self) -> Result<ClientUpdate> {
        Ok(ClientUpdate {
            client_id: self.id,
            extractor: self.extractor.clone(),
            d1: self.d1.clone(),
            n_k: self.users.len() as u64,
            counts: self.counts,
            loss: self.shard_loss()?,
        })
    }

    /// Receive, three stages, snapshot `ε` into `ε_prev`, report.
    pub fn local_round(&mut self, msg: &Broadcast, cfg: &LocalConfig, seed: u64) -> Result<ClientUpdate> {
        self.receive_broadcast(msg)?;
        if self.users.is_empty() {
            warn!("client {}: empty shard in round {}", self.id, msg.round);
            return self.update();
        }
        let mut rng = client_rng(seed, msg.round, self.id);
        self.stage1_train_discriminators(cfg, &mut rng)?;
        self.stage2_train_extractor(cfg, &mut rng)?;
        self.stage3_train_local_generator(cfg, &mut rng)?;
        self.extractor_prev = self.extractor.clone();
        self.update()
    }

    /// Plain supervised round used by the FedAvg / FedProx baselines: `ε`
    /// and `D1` train jointly on cross-entropy, plus `(ρ/2)‖θ − θ_global‖²`
    /// when `prox_rho > 0`.
    pub fn baseline_round(&mut self, msg: &Broadcast, cfg: &LocalConfig, prox_rho: f64, seed: u64) -> Result<ClientUpdate> {
        self.receive_broadcast(msg)?;
        if self.users.is_empty() {
            warn!("client {}: empty shard in round {}", self.id, msg.round);
            return self.update();
        }
        let mut rng = client_rng(seed, msg.round, self.id);
        let mut e_opt = AdamState::new(&self.extractor, self.adam());
        let mut d_opt = AdamState::new(&self.d1, self.adam());
        for _ in 0..cfg.epochs {
            for idx in minibatches(self.users.len(), cfg.batch, &mut rng) {
                let batch = self.batch(&idx)?;
                let mut tape = Tape::new();
                let eb = tape.bind(&self.extractor, true);
                let b1 = tape.bind(&self.d1, true);
                let reps = self.models.extractor.forward(&mut tape, &eb, &batch)?;
                let logits = self.models.discriminator.forward(&mut tape, &b1, reps)?;
                let mut loss = losses::cls_loss(&mut tape, logits, &batch.labels)?;
                if prox_rho > 0.0 {
                    let pe = prox_term(&mut tape, &eb, &msg.extractor)?;
                    let pd = prox_term(&mut tape, &b1, &msg.disc)?;
                    let p = tape.add(pe, pd)?;
                    let p = tape.scale(p, prox_rho / 2.0);
                    loss = tape.add(loss, p)?;
                }
                check_loss("baseline local training", tape.item(loss))?;
                let grads = tape.backward(loss)?;
                e_opt.step(&mut self.extractor, &grads.for_bound(&tape, &eb))?;
                d_opt.step(&mut self.d1, &grads.for_bound(&tape, &b1))?;
            }
        }
        self.extractor_prev = self.extractor.clone();
        self.update()
    }
}
