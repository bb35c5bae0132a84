//! Training objectives, each recorded on an autodiff [`Tape`].
//!
//! The composite objectives return their components alongside the total so
//! callers (and tests) can inspect every term. Components that act as fixed
//! targets are detached before use.

use numkit::{Bound, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabelStats;
use crate::error::{FedError, Result};
use crate::models::DiscriminatorConfig;

/// Floor applied to `q` in [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the distillation terms for the classifier heads.
    pub alpha_kd: f64,
    /// Weight of the head-disagreement terms.
    pub gamma: f64,
    /// Weight of the contrastive drift term.
    pub mu: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_kd: 1.0,
            gamma: 0.5,
            mu: 0.5,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha_kd, self.gamma, self.mu, self.tau];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FedError::InvalidConfig("loss weights must be finite and ≥ 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(FedError::InvalidConfig("tau must be > 0".into()));
        }
        Ok(())
    }
}

/// Two probability vectors of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPair {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl ProbPair {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let valid = |v: &[f64]| {
            v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if p.len() != q.len() || p.is_empty() || !valid(&p) || !valid(&q) {
            return Err(FedError::InvalidData("not a pair of probability vectors".into()));
        }
        Ok(Self { p, q })
    }
}

/// `Σ p_i ln(p_i / max(q_i, 1e-12))`, with `0 · ln 0 = 0`.
pub fn kl_divergence(pair: &ProbPair) -> f64 {
    pair.p
        .iter()
        .zip(&pair.q)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(KL_FLOOR)).ln())
        .sum()
}

/// Per-row cross-entropy `−ln softmax(logits)[y]`, `B × 1`.
pub fn ce_rows(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(FedError::InvalidData("cross-entropy of an empty batch".into()));
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.gather(ls, labels)?;
    Ok(tape.neg(picked))
}

/// Mean cross-entropy.
pub fn cls_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = ce_rows(tape, logits, labels)?;
    Ok(tape.mean(rows))
}

/// Per-row `KL(softmax(p) ‖ softmax(q))`, `B × 1`.
pub fn kl_rows(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let lp = tape.log_softmax(p_logits);
    let lq = tape.log_softmax(q_logits);
    let p = tape.softmax(p_logits);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.sum_cols(terms))
}

pub fn mean_kl(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let rows = kl_rows(tape, p_logits, q_logits)?;
    Ok(tape.mean(rows))
}

/// Distillation term: mean `KL(σ(D(real)) ‖ σ(D(pseudo)))` where the
/// pseudo-data side is a detached teacher.
pub fn kd_from_logits(tape: &mut Tape, real_logits: Var, pseudo_logits: Var) -> Result<Var> {
    if tape.value(real_logits).rows() != tape.value(pseudo_logits).rows() {
        return Err(FedError::InvalidData(format!(
            "distillation batch mismatch: {} real vs {} pseudo",
            tape.value(real_logits).rows(),
            tape.value(pseudo_logits).rows()
        )));
    }
    let teacher = tape.detach(pseudo_logits);
    mean_kl(tape, real_logits, teacher)
}

/// [`kd_from_logits`] evaluated through one classifier head.
pub fn kd_loss(tape: &mut Tape, disc: (&DiscriminatorConfig, &Bound), reps: Var, pseudo: Var) -> Result<Var> {
    let real = disc.0.forward(tape, disc.1, reps)?;
    let fake = disc.0.forward(tape, disc.1, pseudo)?;
    kd_from_logits(tape, real, fake)
}

/// Head disagreement: mean `KL(σ(D1(x)) ‖ σ(D2(x)))`.
pub fn adv_loss(
    tape: &mut Tape,
    d1: (&DiscriminatorConfig, &Bound),
    d2: (&DiscriminatorConfig, &Bound),
    x: Var,
) -> Result<Var> {
    let l1 = d1.0.forward(tape, d1.1, x)?;
    let l2 = d2.0.forward(tape, d2.1, x)?;
    mean_kl(tape, l1, l2)
}

/// Per-row contrastive term
/// `−ln[e^{s_g/τ} / (e^{s_g/τ} + e^{s_p/τ})]` with cosine similarities
/// `s_g = cos(r, r_glo)` and `s_p = cos(r, r_pre)`. Both anchors are
/// detached.
pub fn contrastive_rows(tape: &mut Tape, r: Var, r_glo: Var, r_pre: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(FedError::InvalidConfig("tau must be > 0".into()));
    }
    let glo = tape.detach(r_glo);
    let pre = tape.detach(r_pre);
    let s_g = tape.cosine_rows(r, glo)?;
    let s_p = tape.cosine_rows(r, pre)?;
    let logits = tape.concat_cols(s_g, s_p)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let n = tape.value(logits).rows();
    ce_rows(tape, logits, &vec![0; n])
}

pub fn contrastive_loss(tape: &mut Tape, r: Var, r_glo: Var, r_pre: Var, tau: f64) -> Result<Var> {
    let rows = contrastive_rows(tape, r, r_glo, r_pre, tau)?;
    Ok(tape.mean(rows))
}

/// `exp(−(1/N²) Σ_ij ‖x_i − x_j‖ · ‖z_i − z_j‖)`; lies in `(0, 1]` and is
/// exactly 1 for a collapsed batch or `N = 1`.
pub fn diversity_loss(tape: &mut Tape, pseudo: Var, noise: &Tensor) -> Result<Var> {
    if tape.value(pseudo).rows() != noise.rows() {
        return Err(FedError::InvalidData("pseudo/noise batch mismatch".into()));
    }
    let dx = tape.pairwise_distance(pseudo);
    let z = tape.constant(noise.clone());
    let dz = tape.pairwise_distance(z);
    let prod = tape.mul(dx, dz)?;
    let m = tape.mean(prod);
    let neg = tape.neg(m);
    Ok(tape.exp(neg))
}

/// Real and pseudo inputs for the classifier-head objective.
#[derive(Debug, Clone)]
pub struct DiscInputs<'a> {
    /// Real representations (frozen extractor), `B × F`.
    pub reps: Var,
    pub labels: &'a [usize],
    /// Global-generator samples conditioned on `labels`, `B × F`.
    pub global_pseudo: Var,
    /// Local-generator samples, `B' × F`.
    pub local_pseudo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscLossParts {
    pub cls: Var,
    pub dis: Var,
    pub dis_local: Var,
    pub adv: Var,
    pub advg: Var,
    pub total: Var,
}

/// `L_cls + α(L_dis + L_dis′) + γ(L_advg − L_adv)`.
///
/// `L_cls` sums the cross-entropies of both heads on the real samples and on
/// the global generator's samples (which share the real labels).
pub fn disc_total_loss(
    tape: &mut Tape,
    d1: (&DiscriminatorConfig, &Bound),
    d2: (&DiscriminatorConfig, &Bound),
    inputs: &DiscInputs,
    w: &LossWeights,
) -> Result<DiscLossParts> {
    let r1 = d1.0.forward(tape, d1.1, inputs.reps)?;
    let r2 = d2.0.forward(tape, d2.1, inputs.reps)?;
    let g1 = d1.0.forward(tape, d1.1, inputs.global_pseudo)?;
    let g2 = d2.0.forward(tape, d2.1, inputs.global_pseudo)?;
    let k1 = d1.0.forward(tape, d1.1, inputs.local_pseudo)?;
    let k2 = d2.0.forward(tape, d2.1, inputs.local_pseudo)?;

    let mut cls = cls_loss(tape, r1, inputs.labels)?;
    for logits in [r2, g1, g2] {
        let term = cls_loss(tape, logits, inputs.labels)?;
        cls = tape.add(cls, term)?;
    }
    let dis = kd_from_logits(tape, r1, g1)?;
    let dis_local = kd_from_logits(tape, r2, g2)?;
    // only D2 is pushed away from D1 here: with both sides free the term is
    // unbounded below (a wrong D1 against a confident D2)
    let r1_fixed = tape.detach(r1);
    let adv = mean_kl(tape, r1_fixed, r2)?;
    let advg = mean_kl(tape, k1, k2)?;

    let kd = tape.add(dis, dis_local)?;
    let kd = tape.scale(kd, w.alpha_kd);
    let gap = tape.sub(advg, adv)?;
    let gap = tape.scale(gap, w.gamma);
    let total = tape.add(cls, kd)?;
    let total = tape.add(total, gap)?;
    Ok(DiscLossParts {
        cls,
        dis,
        dis_local,
        adv,
        advg,
        total,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractorLossParts {
    pub cls: Var,
    pub adv: Var,
    pub con: Var,
    pub total: Var,
}

/// `L_cls + γ·L_adv + μ·mean(L_con)` for representations `reps` of the
/// trainable extractor; heads should be bound frozen.
#[allow(clippy::too_many_arguments)]
pub fn extractor_total_loss(
    tape: &mut Tape,
    d1: (&DiscriminatorConfig, &Bound),
    d2: (&DiscriminatorConfig, &Bound),
    reps: Var,
    r_glo: Var,
    r_pre: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<ExtractorLossParts> {
    let l1 = d1.0.forward(tape, d1.1, reps)?;
    let l2 = d2.0.forward(tape, d2.1, reps)?;
    let cls = cls_loss(tape, l1, labels)?;
    let adv = mean_kl(tape, l1, l2)?;
    let con = contrastive_loss(tape, reps, r_glo, r_pre, w.tau)?;
    let a = tape.scale(adv, w.gamma);
    let c = tape.scale(con, w.mu);
    let total = tape.add(cls, a)?;
    let total = tape.add(total, c)?;
    Ok(ExtractorLossParts { cls, adv, con, total })
}

#[derive(Debug, Clone, Copy)]
pub struct LocalGenLossParts {
    pub cls: Var,
    pub advg: Var,
    pub var: Var,
    pub total: Var,
}

/// `L_cls − L_advg + L_var` for local-generator samples `pseudo` drawn with
/// `noise` and conditioning `labels`. `L_cls` averages both heads.
pub fn local_gen_loss(
    tape: &mut Tape,
    d1: (&DiscriminatorConfig, &Bound),
    d2: (&DiscriminatorConfig, &Bound),
    pseudo: Var,
    noise: &Tensor,
    labels: &[usize],
) -> Result<LocalGenLossParts> {
    let l1 = d1.0.forward(tape, d1.1, pseudo)?;
    let l2 = d2.0.forward(tape, d2.1, pseudo)?;
    let c1 = cls_loss(tape, l1, labels)?;
    let c2 = cls_loss(tape, l2, labels)?;
    let cls = tape.add(c1, c2)?;
    let cls = tape.scale(cls, 0.5);
    let advg = mean_kl(tape, l1, l2)?;
    let var = diversity_loss(tape, pseudo, noise)?;
    let total = tape.sub(cls, advg)?;
    let total = tape.add(total, var)?;
    Ok(LocalGenLossParts { cls, advg, var, total })
}

/// One teacher head for [`global_gen_loss`], with its row in the label stats.
pub struct Teacher<'a> {
    pub bound: &'a Bound,
    pub stats_row: usize,
}

/// `(1/K) Σ_k Σ_x̃ α^{k,y}[KL(σ(D1^k(x̃)) ‖ σ(D(x̃))) + CE(D1^k(x̃), y)]`.
///
/// Teachers with zero share of every sampled label are skipped.
pub fn global_gen_loss(
    tape: &mut Tape,
    disc: &DiscriminatorConfig,
    teachers: &[Teacher],
    global_d: &Bound,
    pseudo: Var,
    labels: &[usize],
    stats: &LabelStats,
) -> Result<Var> {
    if teachers.is_empty() {
        return Err(FedError::InvalidData("global generator loss needs at least one teacher".into()));
    }
    let student = disc.forward(tape, global_d, pseudo)?;
    let mut total: Option<Var> = None;
    for t in teachers {
        let weights: Vec<f64> = labels.iter().map(|&y| stats.share(t.stats_row, y)).collect();
        if weights.iter().all(|&a| a == 0.0) {
            continue;
        }
        let logits = disc.forward(tape, t.bound, pseudo)?;
        let kl = kl_rows(tape, logits, student)?;
        let ce = ce_rows(tape, logits, labels)?;
        let per_sample = tape.add(kl, ce)?;
        let wv = tape.constant(Tensor::column(&weights));
        let weighted = tape.mul(per_sample, wv)?;
        let term = tape.sum(weighted);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, 1.0 / teachers.len() as f64))
}
