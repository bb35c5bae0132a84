//! The network families: backbone feature extractor, classifier heads
//! (shared `D1` / local `D2` / global `D`) and conditional generators
//! (global `G` / local `G_k`).
//!
//! Each family is a config struct with `init` (seeded [`ParamSet`]) and a
//! `forward` that records onto a [`Tape`]. The `*_forward` free functions
//! are tape-free conveniences for single inputs.

use std::ops::Range;

use numkit::init::push_dense;
use numkit::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UserRecord, NUM_CLASSES};
use crate::error::{FedError, Result};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub prop_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub attention_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

/// Architecture of every network in one federation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Hidden widths for the client-local `D2`; defaults to the shared ones.
    #[serde(default)]
    pub local_disc_hidden: Option<Vec<usize>>,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    pub fn new(prop_dim: usize, embed_dim: usize, feature_dim: usize) -> Self {
        Self {
            extractor: ExtractorConfig {
                prop_dim,
                embed_dim,
                hidden_dim: 32,
                feature_dim,
                attention_dim: 16,
            },
            discriminator: DiscriminatorConfig {
                feature_dim,
                hidden: vec![32, 32],
            },
            local_disc_hidden: None,
            generator: GeneratorConfig {
                noise_dim: 8,
                hidden: vec![32],
                feature_dim,
            },
        }
    }

    pub fn local_discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            feature_dim: self.discriminator.feature_dim,
            hidden: self
                .local_disc_hidden
                .clone()
                .unwrap_or_else(|| self.discriminator.hidden.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.extractor;
        if [e.prop_dim, e.embed_dim, e.hidden_dim, e.attention_dim]
            .iter()
            .any(|&d| d == 0)
        {
            return Err(FedError::InvalidConfig("extractor dims must be positive".into()));
        }
        if e.feature_dim < 2 {
            return Err(FedError::InvalidConfig("feature_dim must be ≥ 2".into()));
        }
        if self.discriminator.feature_dim != e.feature_dim
            || self.generator.feature_dim != e.feature_dim
        {
            return Err(FedError::InvalidConfig(
                "discriminator input and generator output must equal feature_dim".into(),
            ));
        }
        if self.generator.noise_dim == 0 {
            return Err(FedError::InvalidConfig("noise_dim must be positive".into()));
        }
        let widths = self
            .discriminator
            .hidden
            .iter()
            .chain(self.local_disc_hidden.iter().flatten())
            .chain(&self.generator.hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(FedError::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// A user with each tweet already mean-pooled over its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUser {
    pub props: Vec<f64>,
    pub tweets: Vec<Vec<f64>>,
    pub label: usize,
}

impl PreparedUser {
    pub fn from_record(u: &UserRecord) -> Self {
        let tweets = u
            .tweets
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| {
                let d = t[0].len();
                let mut h = vec![0.0; d];
                for tok in t {
                    for (a, b) in h.iter_mut().zip(tok) {
                        *a += b;
                    }
                }
                h.iter_mut().for_each(|a| *a /= t.len() as f64);
                h
            })
            .collect();
        Self {
            props: u.props.clone(),
            tweets,
            label: u.label,
        }
    }
}

pub fn prepare(ds: &Dataset) -> Vec<PreparedUser> {
    ds.users.iter().map(PreparedUser::from_record).collect()
}

/// Stacked inputs for one minibatch of users.
#[derive(Debug, Clone)]
pub struct UserBatch {
    pub props: Tensor,
    /// All tweets of the batch, `N × d`; a single zero row when `N = 0`.
    pub tweets: Tensor,
    /// Rows of `tweets` owned by each user.
    pub segments: Vec<Range<usize>>,
    pub labels: Vec<usize>,
}

impl UserBatch {
    pub fn new(users: &[&PreparedUser], embed_dim: usize) -> Result<Self> {
        if users.is_empty() {
            return Err(FedError::InvalidData("empty batch".into()));
        }
        let props = Tensor::from_rows(&users.iter().map(|u| u.props.as_slice()).collect::<Vec<_>>())?;
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut segments = Vec::with_capacity(users.len());
        for u in users {
            let start = rows.len();
            rows.extend(u.tweets.iter().map(|t| t.as_slice()));
            segments.push(start..rows.len());
        }
        let tweets = if rows.is_empty() {
            Tensor::zeros(&[1, embed_dim])
        } else {
            Tensor::from_rows(&rows)?
        };
        if tweets.cols() != embed_dim {
            return Err(FedError::InvalidData(format!(
                "tweet embedding dim {} but extractor expects {embed_dim}",
                tweets.cols()
            )));
        }
        Ok(Self {
            props,
            tweets,
            segments,
            labels: users.iter().map(|u| u.label).collect(),
        })
    }

    pub fn from_indices(users: &[PreparedUser], idx: &[usize], embed_dim: usize) -> Result<Self> {
        let refs: Vec<&PreparedUser> = idx.iter().map(|&i| &users[i]).collect();
        Self::new(&refs, embed_dim)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl ExtractorConfig {
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        push_dense(&mut p, rng, "prop.0", self.prop_dim, self.hidden_dim);
        push_dense(&mut p, rng, "prop.1", self.hidden_dim, self.hidden_dim);
        push_dense(&mut p, rng, "att.proj", self.embed_dim, self.attention_dim);
        p.push("att.score", numkit::init::glorot_uniform(rng, self.attention_dim, 1))
            .expect("unique");
        push_dense(&mut p, rng, "fuse.0", self.hidden_dim + self.embed_dim, self.hidden_dim);
        push_dense(&mut p, rng, "fuse.1", self.hidden_dim, self.feature_dim);
        p
    }

    /// Attention weights over the rows of `tweets`, softmax within each segment.
    pub fn attention_weights(&self, tape: &mut Tape, b: &Bound, tweets: Var, segs: &[Range<usize>]) -> Result<Var> {
        let proj = tape.dense(tweets, b.get("att.proj.w"), b.get("att.proj.b"))?;
        let act = tape.tanh(proj);
        let scores = tape.matmul(act, b.get("att.score"))?;
        Ok(tape.segment_softmax(scores, segs)?)
    }

    /// `r_u = MLP(concat(r_p, r_t))` for a batch, giving `B × F`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, batch: &UserBatch) -> Result<Var> {
        let props = tape.constant(batch.props.clone());
        let h = tape.dense(props, b.get("prop.0.w"), b.get("prop.0.b"))?;
        let h = tape.relu(h);
        let h = tape.dense(h, b.get("prop.1.w"), b.get("prop.1.b"))?;
        let r_p = tape.relu(h);

        let tweets = tape.constant(batch.tweets.clone());
        let w = self.attention_weights(tape, b, tweets, &batch.segments)?;
        let r_t = tape.segment_weighted_sum(w, tweets, &batch.segments)?;

        let cat = tape.concat_cols(r_p, r_t)?;
        let h = tape.dense(cat, b.get("fuse.0.w"), b.get("fuse.0.b"))?;
        let h = tape.relu(h);
        Ok(tape.dense(h, b.get("fuse.1.w"), b.get("fuse.1.b"))?)
    }

    /// Convenience: representations of `batch` as plain rows, no gradients.
    pub fn represent(&self, params: &ParamSet, batch: &UserBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.bind(params, false);
        let r = self.forward(&mut tape, &b, batch)?;
        Ok(tape.value(r).clone())
    }
}

fn mlp_init<R: Rng + ?Sized>(rng: &mut R, widths: &[usize]) -> ParamSet {
    let mut p = ParamSet::new();
    for (i, w) in widths.windows(2).enumerate() {
        push_dense(&mut p, rng, &format!("layer{i}"), w[0], w[1]);
    }
    p
}

fn mlp_forward(
    tape: &mut Tape,
    b: &Bound,
    n_layers: usize,
    x: Var,
    hidden_act: impl Fn(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let mut h = x;
    for i in 0..n_layers {
        h = tape.dense(h, b.get(&format!("layer{i}.w")), b.get(&format!("layer{i}.b")))?;
        if i + 1 < n_layers {
            h = hidden_act(tape, h);
        }
    }
    Ok(h)
}

impl DiscriminatorConfig {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim];
        w.extend(&self.hidden);
        w.push(NUM_CLASSES);
        w
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        mlp_init(rng, &self.widths())
    }

    /// Raw class logits `B × 2` for features `B × F`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.feature_dim {
            return Err(FedError::Num(numkit::NumError::ShapeMismatch {
                op: "discriminator input",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.feature_dim],
            }));
        }
        mlp_forward(tape, b, self.hidden.len() + 1, x, |t, v| t.leaky_relu(v, LEAKY_SLOPE))
    }

    /// Name of the output-layer weight, for tests that zero the head.
    pub fn final_layer(&self) -> (String, String) {
        let i = self.hidden.len();
        (format!("layer{i}.w"), format!("layer{i}.b"))
    }
}

impl GeneratorConfig {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.noise_dim + NUM_CLASSES];
        w.extend(&self.hidden);
        w.push(self.feature_dim);
        w
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        mlp_init(rng, &self.widths())
    }

    /// `tanh(MLP(concat(z, onehot(y))))`, giving `B × F` in `[−1, 1]`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, noise: Var, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
            return Err(FedError::LabelOutOfRange(bad));
        }
        let onehot = one_hot(labels);
        let onehot = tape.constant(onehot);
        let input = tape.concat_cols(noise, onehot)?;
        let out = mlp_forward(tape, b, self.hidden.len() + 1, input, |t, v| t.relu(v))?;
        Ok(tape.tanh(out))
    }
}

pub fn one_hot(labels: &[usize]) -> Tensor {
    let mut data = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        data[i * NUM_CLASSES + y] = 1.0;
    }
    Tensor::matrix(labels.len(), NUM_CLASSES, data).expect("nonempty labels")
}

/// Which extractor produced a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepSource {
    Current,
    Global,
    Previous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub features: Vec<f64>,
    pub source: RepSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub pooled: Vec<f64>,
    pub weights: Vec<f64>,
    /// Set when there were no tweets and `pooled` is the zero vector.
    pub empty: bool,
}

/// Attention pooling of per-tweet vectors.
pub fn attention_aggregate(cfg: &ExtractorConfig, params: &ParamSet, tweets: &[Vec<f64>]) -> Result<Attention> {
    if tweets.is_empty() {
        return Ok(Attention {
            pooled: vec![0.0; cfg.embed_dim],
            weights: Vec::new(),
            empty: true,
        });
    }
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let t = tape.constant(Tensor::from_rows(tweets)?);
    let segs = [0..tweets.len()];
    let w = cfg.attention_weights(&mut tape, &b, t, &segs)?;
    let pooled = tape.segment_weighted_sum(w, t, &segs)?;
    Ok(Attention {
        pooled: tape.value(pooled).data().to_vec(),
        weights: tape.value(w).data().to_vec(),
        empty: false,
    })
}

pub fn extractor_forward(cfg: &ExtractorConfig, params: &ParamSet, user: &UserRecord) -> Result<Representation> {
    let prepared = PreparedUser::from_record(user);
    let batch = UserBatch::new(&[&prepared], cfg.embed_dim)?;
    let r = cfg.represent(params, &batch)?;
    Ok(Representation {
        features: r.into_data(),
        source: RepSource::Current,
    })
}

pub fn discriminator_forward(cfg: &DiscriminatorConfig, params: &ParamSet, features: &[f64]) -> Result<[f64; NUM_CLASSES]> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let x = tape.constant(Tensor::row(features));
    let logits = cfg.forward(&mut tape, &b, x)?;
    let d = tape.value(logits).data();
    Ok([d[0], d[1]])
}

pub fn generator_forward(cfg: &GeneratorConfig, params: &ParamSet, noise: &[f64], label: usize) -> Result<PseudoSample> {
    let mut tape = Tape::new();
    let b = tape.bind(params, false);
    let z = tape.constant(Tensor::row(noise));
    let x = cfg.forward(&mut tape, &b, z, &[label])?;
    Ok(PseudoSample {
        features: tape.value(x).data().to_vec(),
        label,
        noise: noise.to_vec(),
    })
}

/// Checkpoint file: parameters plus the architecture and seed that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub config: C,
    pub seed: u64,
    pub params: ParamSet,
}
