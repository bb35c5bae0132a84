//! Cross-lingual context-space alignment.
//!
//! An affine mapper pair translates token embeddings between a source and a
//! target space; a sigmoid discriminator on mean-pooled embeddings tells real
//! from mapped ones, and the mappers are trained to fool it. Distribution
//! matching alone cannot pin down a rotation of isotropic data, so the mapper
//! step also carries a paired anchor term pulling `M(ȳ)` onto `x̄`
//! (weight `anchor_weight`, zero disables it).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use numkit::init::push_dense;
use numkit::{AdamConfig, AdamState, Bound, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Language {
    Source,
    Target,
}

impl Language {
    pub fn other(self) -> Self {
        match self {
            Language::Source => Language::Target,
            Language::Target => Language::Source,
        }
    }
}

/// Token-level context representations of one text, `m × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    tokens: Tensor,
    pub language: Language,
}

impl ContextEmbedding {
    pub fn new(tokens: Tensor, language: Language) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 {
            return Err(FedError::InvalidData("context embedding needs at least one token".into()));
        }
        if !tokens.is_finite() {
            return Err(FedError::InvalidData("context embedding has non-finite entries".into()));
        }
        Ok(Self { tokens, language })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilingualPair {
    pub source: ContextEmbedding,
    pub target: ContextEmbedding,
}

/// Average of the token vectors.
pub fn mean_pool(emb: &ContextEmbedding) -> Vec<f64> {
    let (m, d) = (emb.tokens.rows(), emb.tokens.cols());
    let mut out = vec![0.0; d];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(emb.tokens.row_slice(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub dim: usize,
    pub disc_hidden: Vec<usize>,
    /// Start both mappers at the identity instead of a random draw.
    pub identity_init: bool,
    pub anchor_weight: f64,
    pub learning_rate: f64,
    pub batch: usize,
    pub heldout_frac: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            disc_hidden: vec![32],
            identity_init: false,
            anchor_weight: 1.0,
            learning_rate: 0.01,
            batch: 32,
            heldout_frac: 0.2,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch == 0 || self.disc_hidden.iter().any(|&h| h == 0) {
            return Err(FedError::InvalidConfig("alignment dims and batch must be positive".into()));
        }
        if !(self.anchor_weight >= 0.0 && self.anchor_weight.is_finite()) {
            return Err(FedError::InvalidConfig("anchor_weight must be finite and ≥ 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.heldout_frac) {
            return Err(FedError::InvalidConfig("bad learning rate or held-out fraction".into()));
        }
        Ok(())
    }

    fn prefix(lang: Language) -> &'static str {
        // keyed by the language being mapped from
        match lang {
            Language::Target => "t2s",
            Language::Source => "s2t",
        }
    }

    pub fn init_mapper<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for lang in [Language::Target, Language::Source] {
            let prefix = Self::prefix(lang);
            if self.identity_init {
                let mut w = Tensor::zeros(&[self.dim, self.dim]);
                for i in 0..self.dim {
                    w.data_mut()[i * self.dim + i] = 1.0;
                }
                p.push(format!("{prefix}.w"), w).expect("unique");
                p.push(format!("{prefix}.b"), Tensor::zeros(&[self.dim])).expect("unique");
            } else {
                push_dense(&mut p, rng, prefix, self.dim, self.dim);
            }
        }
        p
    }

    pub fn init_disc<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut widths = vec![self.dim];
        widths.extend(&self.disc_hidden);
        widths.push(1);
        let mut p = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            push_dense(&mut p, rng, &format!("layer{i}"), w[0], w[1]);
        }
        p
    }

    /// Maps rows of `x` (language `from`) into the other language's space.
    pub fn map(&self, tape: &mut Tape, mapper: &Bound, x: Var, from: Language) -> Result<Var> {
        let prefix = Self::prefix(from);
        Ok(tape.dense(x, mapper.get(&format!("{prefix}.w")), mapper.get(&format!("{prefix}.b")))?)
    }

    /// Probability that each row is a real (unmapped) embedding, `B × 1`.
    pub fn discriminate(&self, tape: &mut Tape, disc: &Bound, x: Var) -> Result<Var> {
        let n = self.disc_hidden.len() + 1;
        let mut h = x;
        for i in 0..n {
            h = tape.dense(h, disc.get(&format!("layer{i}.w")), disc.get(&format!("layer{i}.b")))?;
            if i + 1 < n {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(tape.sigmoid(h))
    }
}

fn mean_square_from(tape: &mut Tape, p: Var, target: f64) -> Var {
    let d = tape.add_scalar(p, -target);
    let sq = tape.mul(d, d).expect("same shape");
    tape.mean(sq)
}

/// Least-squares discriminator loss summed over both directions: real
/// pooled embeddings are pushed to 1 and mapped ones to 0. Inputs are the
/// discriminator's probabilities, batch-averaged per term.
pub fn align_disc_loss(tape: &mut Tape, d_real: [Var; 2], d_mapped: [Var; 2]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (r, m) in d_real.into_iter().zip(d_mapped) {
        let a = mean_square_from(tape, r, 1.0);
        let b = mean_square_from(tape, m, 0.0);
        total = tape.add(total, a)?;
        total = tape.add(total, b)?;
    }
    Ok(total)
}

/// Least-squares mapper loss: mapped embeddings in both directions should
/// be scored as real.
pub fn align_gen_loss(tape: &mut Tape, d_mapped: [Var; 2]) -> Result<Var> {
    let a = mean_square_from(tape, d_mapped[0], 1.0);
    let b = mean_square_from(tape, d_mapped[1], 1.0);
    Ok(tape.add(a, b)?)
}

pub struct MapperState {
    pub config: AlignConfig,
    pub mapper: ParamSet,
    pub disc: ParamSet,
    mapper_opt: AdamState,
    disc_opt: AdamState,
}

impl MapperState {
    pub fn new(config: AlignConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapper = config.init_mapper(&mut rng);
        let disc = config.init_disc(&mut rng);
        let adam = AdamConfig::with_lr(config.learning_rate);
        Ok(Self {
            mapper_opt: AdamState::new(&mapper, adam),
            disc_opt: AdamState::new(&disc, adam),
            config,
            mapper,
            disc,
        })
    }
}

/// Applies the mapper token-wise; the result is in the other language.
pub fn map_context(state: &MapperState, emb: &ContextEmbedding) -> Result<ContextEmbedding> {
    if emb.dim() != state.config.dim {
        return Err(FedError::Num(numkit::NumError::ShapeMismatch {
            op: "map_context",
            left: emb.tokens.shape().to_vec(),
            right: vec![state.config.dim],
        }));
    }
    let mut tape = Tape::new();
    let b = tape.bind(&state.mapper, false);
    let x = tape.constant(emb.tokens.clone());
    let y = state.config.map(&mut tape, &b, x, emb.language)?;
    ContextEmbedding::new(tape.value(y).clone(), emb.language.other())
}

/// Token-wise mean cosine between each source text and its mapped target.
pub fn mean_alignment_cosine(state: &MapperState, pairs: &[BilingualPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs {
        let mapped = map_context(state, &p.target)?;
        let m = p.source.len().min(mapped.len());
        for i in 0..m {
            total += cosine(p.source.tokens.row_slice(i), mapped.tokens.row_slice(i));
            count += 1;
        }
    }
    if count == 0 {
        return Err(FedError::InvalidData("no pairs to score".into()));
    }
    Ok(total / count as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub epochs: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub disc_loss: Vec<f64>,
    pub gen_loss: Vec<f64>,
    pub anchor_loss: Vec<f64>,
    pub initial_cosine: f64,
    pub final_cosine: f64,
}

fn pooled_tensor(pairs: &[&BilingualPair], lang: Language) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| match lang {
            Language::Source => mean_pool(&p.source),
            Language::Target => mean_pool(&p.target),
        })
        .collect();
    Ok(Tensor::from_rows(&rows)?)
}

struct StepLosses {
    disc: f64,
    gen: f64,
    anchor: f64,
}

fn train_step(state: &mut MapperState, batch: &[&BilingualPair]) -> Result<StepLosses> {
    let cfg = state.config.clone();
    let xs = pooled_tensor(batch, Language::Source)?;
    let ys = pooled_tensor(batch, Language::Target)?;

    // discriminator step, mappers frozen
    let disc_value = {
        let mut tape = Tape::new();
        let mb = tape.bind(&state.mapper, false);
        let db = tape.bind(&state.disc, true);
        let x = tape.constant(xs.clone());
        let y = tape.constant(ys.clone());
        let x_mapped = cfg.map(&mut tape, &mb, y, Language::Target)?;
        let y_mapped = cfg.map(&mut tape, &mb, x, Language::Source)?;
        let dx = cfg.discriminate(&mut tape, &db, x)?;
        let dy = cfg.discriminate(&mut tape, &db, y)?;
        let dxm = cfg.discriminate(&mut tape, &db, x_mapped)?;
        let dym = cfg.discriminate(&mut tape, &db, y_mapped)?;
        let loss = align_disc_loss(&mut tape, [dx, dy], [dxm, dym])?;
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(FedError::NonFiniteLoss("alignment discriminator".into()));
        }
        let grads = tape.backward(loss)?.for_bound(&tape, &db);
        state.disc_opt.step(&mut state.disc, &grads)?;
        value
    };

    // mapper step, discriminator frozen
    let mut tape = Tape::new();
    let mb = tape.bind(&state.mapper, true);
    let db = tape.bind(&state.disc, false);
    let x = tape.constant(xs);
    let y = tape.constant(ys);
    let x_mapped = cfg.map(&mut tape, &mb, y, Language::Target)?;
    let y_mapped = cfg.map(&mut tape, &mb, x, Language::Source)?;
    let dxm = cfg.discriminate(&mut tape, &db, x_mapped)?;
    let dym = cfg.discriminate(&mut tape, &db, y_mapped)?;
    let gen = align_gen_loss(&mut tape, [dxm, dym])?;
    let ex = tape.sub(x_mapped, x)?;
    let ey = tape.sub(y_mapped, y)?;
    let sx = tape.mul(ex, ex)?;
    let sy = tape.mul(ey, ey)?;
    let sx = tape.sum_cols(sx);
    let sy = tape.sum_cols(sy);
    let ax = tape.mean(sx);
    let ay = tape.mean(sy);
    let anchor = tape.add(ax, ay)?;
    let weighted = tape.scale(anchor, cfg.anchor_weight);
    let total = tape.add(gen, weighted)?;
    let (gen_value, anchor_value) = (tape.item(gen), tape.item(anchor));
    if !(gen_value.is_finite() && anchor_value.is_finite()) {
        return Err(FedError::NonFiniteLoss("alignment mapper".into()));
    }
    let grads = tape.backward(total)?.for_bound(&tape, &mb);
    state.mapper_opt.step(&mut state.mapper, &grads)?;
    Ok(StepLosses {
        disc: disc_value,
        gen: gen_value,
        anchor: anchor_value,
    })
}

/// Alternating discriminator / mapper training on a seeded shuffle of
/// `pairs`; the last `heldout_frac` of the shuffle is kept for scoring.
pub fn train_alignment(
    pairs: &[BilingualPair],
    config: AlignConfig,
    epochs: usize,
    seed: u64,
) -> Result<(MapperState, AlignmentReport)> {
    if pairs.len() < 2 {
        return Err(FedError::InvalidData("alignment needs at least 2 pairs".into()));
    }
    for p in pairs {
        if p.source.dim() != config.dim || p.target.dim() != config.dim {
            return Err(FedError::InvalidData(format!(
                "pair dims ({}, {}) do not match mapper dim {}",
                p.source.dim(),
                p.target.dim(),
                config.dim
            )));
        }
    }
    let mut state = MapperState::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((pairs.len() as f64 * state.config.heldout_frac).round() as usize).clamp(1, pairs.len() - 1);
    let (train_idx, held_idx) = order.split_at(pairs.len() - n_held);
    let held: Vec<BilingualPair> = held_idx.iter().map(|&i| pairs[i].clone()).collect();
    let mut train: Vec<&BilingualPair> = train_idx.iter().map(|&i| &pairs[i]).collect();

    let initial_cosine = mean_alignment_cosine(&state, &held)?;
    let mut report = AlignmentReport {
        epochs,
        n_train: train.len(),
        n_heldout: held.len(),
        disc_loss: Vec::with_capacity(epochs),
        gen_loss: Vec::with_capacity(epochs),
        anchor_loss: Vec::with_capacity(epochs),
        initial_cosine,
        final_cosine: initial_cosine,
    };
    let batch = state.config.batch;
    for epoch in 0..epochs {
        train.shuffle(&mut rng);
        let (mut d, mut g, mut a, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in train.chunks(batch) {
            let s = train_step(&mut state, chunk)?;
            d += s.disc;
            g += s.gen;
            a += s.anchor;
            n += 1;
        }
        report.disc_loss.push(d / n as f64);
        report.gen_loss.push(g / n as f64);
        report.anchor_loss.push(a / n as f64);
        if (epoch + 1) % 50 == 0 {
            info!("align epoch {}: disc {:.4} gen {:.4} anchor {:.4}", epoch + 1, d / n as f64, g / n as f64, a / n as f64);
        }
    }
    report.final_cosine = mean_alignment_cosine(&state, &held)?;
    Ok((state, report))
}

/// Uniformly random orthogonal `d × d` matrix (Gram-Schmidt on a Gaussian draw).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Tensor {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                rows[i].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|a| *a /= norm);
        }
        if ok {
            return Tensor::from_rows(&rows).expect("square");
        }
    }
}

/// Parallel pairs whose target tokens are `A·source + noise` for a hidden
/// orthogonal `A`. Returns the pairs and `A`.
pub fn synth_bilingual_with_map(
    n_pairs: usize,
    d: usize,
    tokens_per_side: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Vec<BilingualPair>, Tensor)> {
    if d < 2 {
        return Err(FedError::InvalidConfig("bilingual dim must be ≥ 2".into()));
    }
    if tokens_per_side == 0 || !(noise_sigma >= 0.0) {
        return Err(FedError::InvalidConfig("need ≥ 1 token per side and noise ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_orthogonal(&mut rng, d);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let src: Vec<f64> = (0..tokens_per_side * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let src = Tensor::matrix(tokens_per_side, d, src)?;
        // rows are tokens, so A·s for each row s is src · Aᵀ
        let mut tgt = src.matmul(&a.transpose())?;
        if noise_sigma > 0.0 {
            for v in tgt.data_mut() {
                *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        pairs.push(BilingualPair {
            source: ContextEmbedding::new(src, Language::Source)?,
            target: ContextEmbedding::new(tgt, Language::Target)?,
        });
    }
    Ok((pairs, a))
}

pub fn synth_bilingual(
    n_pairs: usize,
    d: usize,
    tokens_per_side: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<BilingualPair>> {
    Ok(synth_bilingual_with_map(n_pairs, d, tokens_per_side, noise_sigma, seed)?.0)
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    src: Vec<Vec<f64>>,
    tgt: Vec<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn save_pairs_jsonl(pairs: &[BilingualPair], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in pairs {
        let line = PairLine {
            src: rows_of(&p.source.tokens),
            tgt: rows_of(&p.target.tokens),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs_jsonl(path: &Path) -> Result<Vec<BilingualPair>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| FedError::Malformed { line: i + 1, msg };
        let parsed: PairLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let src = Tensor::from_rows(&parsed.src).map_err(|e| malformed(e.to_string()))?;
        let tgt = Tensor::from_rows(&parsed.tgt).map_err(|e| malformed(e.to_string()))?;
        pairs.push(BilingualPair {
            source: ContextEmbedding::new(src, Language::Source).map_err(|e| malformed(e.to_string()))?,
            target: ContextEmbedding::new(tgt, Language::Target).map_err(|e| malformed(e.to_string()))?,
        });
    }
    Ok(pairs)
}
