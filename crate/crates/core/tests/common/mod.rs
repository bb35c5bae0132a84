//! Property checks shared by the integration tests and the acceptance
//! runner. Each check returns a one-line summary, or the reason it failed.
#![allow(dead_code)]

use fedack::client::ClientUpdate;
use fedack::data::{dirichlet_partition, label_counts, LabelStats, PartitionSpec, NUM_CLASSES};
use fedack::lingual::{self, align_disc_loss, align_gen_loss, AlignConfig, Language};
use fedack::losses::{self, DiscInputs, LossWeights, ProbPair, Teacher};
use fedack::models::{ModelConfig, PreparedUser, UserBatch};
use fedack::server::aggregate;
use numkit::gradcheck::{max_relative_error, numeric_gradient};
use numkit::{Bound, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const GRAD_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect()
}

/// Small networks so finite differences stay cheap.
pub fn small_models() -> ModelConfig {
    let mut m = ModelConfig::new(3, 4, 3);
    m.extractor.hidden_dim = 5;
    m.extractor.attention_dim = 4;
    m.discriminator.hidden = vec![6];
    m.generator.noise_dim = 3;
    m.generator.hidden = vec![5];
    m
}

/// Random users; the first one has no tweets.
pub fn random_users(rng: &mut ChaCha8Rng, n: usize, prop_dim: usize, embed_dim: usize) -> Vec<PreparedUser> {
    (0..n)
        .map(|i| {
            let n_tweets = if i == 0 { 0 } else { rng.random_range(1..4) };
            PreparedUser {
                props: (0..prop_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                tweets: (0..n_tweets)
                    .map(|_| (0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                label: rng.random_range(0..NUM_CLASSES),
            }
        })
        .collect()
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        alpha_kd: rng.random_range(0.1..2.0),
        gamma: rng.random_range(0.1..2.0),
        mu: rng.random_range(0.1..2.0),
        tau: rng.random_range(0.2..1.5),
    }
}

/// Autodiff gradient of `build` against central differences, worst
/// elementwise relative error.
pub fn gradient_error<F>(params: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Tape, &ParamSet, bool) -> (Var, Bound),
{
    let mut tape = Tape::new();
    let (loss, bound) = build(&mut tape, params, true);
    let analytic = tape.backward(loss).unwrap().for_bound(&tape, &bound);
    let numeric = numeric_gradient(params, 1e-5, |q| {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, q, false);
        t.item(l)
    });
    max_relative_error(&analytic, &numeric, 1e-6)
}

/// Adds uniform noise to every entry so no unit sits exactly on a ReLU
/// kink (zero biases plus a dead layer otherwise produce exact zeros).
pub fn jitter(mut p: ParamSet, rng: &mut ChaCha8Rng) -> ParamSet {
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

fn worst_over_instances(name: &str, errs: &[f64]) -> (String, f64) {
    (name.to_string(), errs.iter().cloned().fold(0.0, f64::max))
}

/// Worst relative error per network over five random instances each.
pub fn gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let m = small_models();
    let f = m.extractor.feature_dim;
    let local = m.local_discriminator();
    let mut out = Vec::new();
    let (mut ext, mut d1e, mut d2e, mut gk, mut gg, mut mm, mut md) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    for inst in 0..5 {
        let mut r = rng(seed * 1000 + inst);
        let users = random_users(&mut r, 4, 3, 4);
        let refs: Vec<&PreparedUser> = users.iter().collect();
        let batch = UserBatch::new(&refs, 4).unwrap();
        let e_params = jitter(m.extractor.init(&mut r), &mut r);
        let d1 = jitter(m.discriminator.init(&mut r), &mut r);
        let d2 = jitter(local.init(&mut r), &mut r);
        let g = jitter(m.generator.init(&mut r), &mut r);
        let r_glo = rand_tensor(&mut r, 4, f, 1.0);
        let r_pre = rand_tensor(&mut r, 4, f, 1.0);
        let w = random_weights(&mut r);
        let x = rand_tensor(&mut r, 5, f, 1.0);
        let x2 = rand_tensor(&mut r, 5, f, 1.0);
        let labels = rand_labels(&mut r, 5);
        let noise = rand_tensor(&mut r, 5, m.generator.noise_dim, 1.0);

        // extractor through the full representation objective
        ext.push(gradient_error(&e_params, |t, p, tr| {
            let eb = t.bind(p, tr);
            let b1 = t.bind(&d1, false);
            let b2 = t.bind(&d2, false);
            let reps = m.extractor.forward(t, &eb, &batch).unwrap();
            let g = t.constant(r_glo.clone());
            let pr = t.constant(r_pre.clone());
            let parts = losses::extractor_total_loss(
                t,
                (&m.discriminator, &b1),
                (&local, &b2),
                reps,
                g,
                pr,
                &batch.labels,
                &w,
            )
            .unwrap();
            (parts.total, eb)
        }));

        // heads: classification plus cross-head disagreement in both slots
        let head_loss = |t: &mut Tape, own: &Bound, own_cfg: &fedack::models::DiscriminatorConfig, other: &Bound, other_cfg: &fedack::models::DiscriminatorConfig| {
            let xv = t.constant(x.clone());
            let x2v = t.constant(x2.clone());
            let a = own_cfg.forward(t, own, xv).unwrap();
            let b = other_cfg.forward(t, other, xv).unwrap();
            let c = own_cfg.forward(t, own, x2v).unwrap();
            let d = other_cfg.forward(t, other, x2v).unwrap();
            let ce = losses::cls_loss(t, a, &labels).unwrap();
            let k1 = losses::mean_kl(t, a, b).unwrap();
            let k2 = losses::mean_kl(t, d, c).unwrap();
            let s = t.add(ce, k1).unwrap();
            t.add(s, k2).unwrap()
        };
        d1e.push(gradient_error(&d1, |t, p, tr| {
            let own = t.bind(p, tr);
            let other = t.bind(&d2, false);
            (head_loss(t, &own, &m.discriminator, &other, &local), own)
        }));
        d2e.push(gradient_error(&d2, |t, p, tr| {
            let own = t.bind(p, tr);
            let other = t.bind(&d1, false);
            (head_loss(t, &own, &local, &other, &m.discriminator), own)
        }));

        // local generator through its full objective
        gk.push(gradient_error(&g, |t, p, tr| {
            let gb = t.bind(p, tr);
            let b1 = t.bind(&d1, false);
            let b2 = t.bind(&d2, false);
            let z = t.constant(noise.clone());
            let pseudo = m.generator.forward(t, &gb, z, &labels).unwrap();
            let parts =
                losses::local_gen_loss(t, (&m.discriminator, &b1), (&local, &b2), pseudo, &noise, &labels).unwrap();
            (parts.total, gb)
        }));

        // global generator against three teachers
        let teachers: Vec<ParamSet> = (0..3).map(|_| jitter(m.discriminator.init(&mut r), &mut r)).collect();
        let stats = LabelStats {
            counts: (0..3).map(|_| [r.random_range(0..20), r.random_range(1..20)]).collect(),
        };
        gg.push(gradient_error(&g, |t, p, tr| {
            let gb = t.bind(p, tr);
            let db = t.bind(&d1, false);
            let tb: Vec<Bound> = teachers.iter().map(|tp| t.bind(tp, false)).collect();
            let ts: Vec<Teacher> = tb.iter().enumerate().map(|(k, b)| Teacher { bound: b, stats_row: k }).collect();
            let z = t.constant(noise.clone());
            let pseudo = m.generator.forward(t, &gb, z, &labels).unwrap();
            let loss = losses::global_gen_loss(t, &m.discriminator, &ts, &db, pseudo, &labels, &stats).unwrap();
            (loss, gb)
        }));

        // cross-lingual mapper and its discriminator
        let acfg = AlignConfig {
            dim: 4,
            disc_hidden: vec![5],
            ..AlignConfig::default()
        };
        let mapper = jitter(acfg.init_mapper(&mut r), &mut r);
        let adisc = jitter(acfg.init_disc(&mut r), &mut r);
        let xs = rand_tensor(&mut r, 6, 4, 1.0);
        let ys = rand_tensor(&mut r, 6, 4, 1.0);
        mm.push(gradient_error(&mapper, |t, p, tr| {
            let mb = t.bind(p, tr);
            let db = t.bind(&adisc, false);
            let xv = t.constant(xs.clone());
            let yv = t.constant(ys.clone());
            let xm = acfg.map(t, &mb, yv, Language::Target).unwrap();
            let ym = acfg.map(t, &mb, xv, Language::Source).unwrap();
            let dx = acfg.discriminate(t, &db, xm).unwrap();
            let dy = acfg.discriminate(t, &db, ym).unwrap();
            let gen = align_gen_loss(t, [dx, dy]).unwrap();
            let e = t.sub(xm, xv).unwrap();
            let sq = t.mul(e, e).unwrap();
            let anchor = t.mean(sq);
            (t.add(gen, anchor).unwrap(), mb)
        }));
        md.push(gradient_error(&adisc, |t, p, tr| {
            let db = t.bind(p, tr);
            let mb = t.bind(&mapper, false);
            let xv = t.constant(xs.clone());
            let yv = t.constant(ys.clone());
            let xm = acfg.map(t, &mb, yv, Language::Target).unwrap();
            let ym = acfg.map(t, &mb, xv, Language::Source).unwrap();
            let rx = acfg.discriminate(t, &db, xv).unwrap();
            let ry = acfg.discriminate(t, &db, yv).unwrap();
            let fx = acfg.discriminate(t, &db, xm).unwrap();
            let fy = acfg.discriminate(t, &db, ym).unwrap();
            (align_disc_loss(t, [rx, ry], [fx, fy]).unwrap(), db)
        }));
    }
    out.push(worst_over_instances("extractor", &ext));
    out.push(worst_over_instances("shared head", &d1e));
    out.push(worst_over_instances("local head", &d2e));
    out.push(worst_over_instances("local generator", &gk));
    out.push(worst_over_instances("global generator", &gg));
    out.push(worst_over_instances("lingual mapper", &mm));
    out.push(worst_over_instances("lingual discriminator", &md));
    out
}

pub fn check_gradients() -> Check {
    let errs = gradient_errors(1);
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    if worst < GRAD_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- direct-summation oracles ----

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn kl_direct(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// `KL(softmax(a) ‖ softmax(b))` from logits.
pub fn kl_logits(a: &[f64], b: &[f64]) -> f64 {
    kl_direct(&softmax(a), &softmax(b))
}

pub fn ce_direct(z: &[f64], y: usize) -> f64 {
    log_sum_exp(z) - z[y]
}

pub fn mean_ce(logits: &Tensor, labels: &[usize]) -> f64 {
    (0..logits.rows()).map(|i| ce_direct(logits.row_slice(i), labels[i])).sum::<f64>() / logits.rows() as f64
}

pub fn mean_kl_rows(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows()).map(|i| kl_logits(a.row_slice(i), b.row_slice(i))).sum::<f64>() / a.rows() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn contrastive_direct(r: &Tensor, glo: &Tensor, pre: &Tensor, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..r.rows() {
        let sg = cosine(r.row_slice(i), glo.row_slice(i)) / tau;
        let sp = cosine(r.row_slice(i), pre.row_slice(i)) / tau;
        total += -(sg.exp() / (sg.exp() + sp.exp())).ln();
    }
    total / r.rows() as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn diversity_direct(x: &Tensor, z: &Tensor) -> f64 {
    let n = x.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += dist(x.row_slice(i), x.row_slice(j)) * dist(z.row_slice(i), z.row_slice(j));
        }
    }
    (-s / (n * n) as f64).exp()
}

pub fn align_disc_direct(real: [&[f64]; 2], mapped: [&[f64]; 2]) -> f64 {
    let mut total = 0.0;
    for k in 0..2 {
        total += real[k].iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / real[k].len() as f64;
        total += mapped[k].iter().map(|d| d * d).sum::<f64>() / mapped[k].len() as f64;
    }
    total
}

pub fn align_gen_direct(mapped: [&[f64]; 2]) -> f64 {
    mapped.iter().map(|m| m.iter().map(|d| (d - 1.0).powi(2)).sum::<f64>() / m.len() as f64).sum()
}

fn worst_gap(gaps: impl Iterator<Item = f64>) -> f64 {
    gaps.fold(0.0, f64::max)
}

fn within(name: &str, gap: f64, tol: f64) -> std::result::Result<String, String> {
    if gap <= tol {
        Ok(format!("{name} {gap:.1e}"))
    } else {
        Err(format!("{name} off by {gap:.3e}"))
    }
}

/// Every loss against its oracle on 100 random cases, plus the closed-form anchors.
pub fn check_loss_oracles(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut kl = Vec::new();
    let mut ce = Vec::new();
    let mut con = Vec::new();
    let mut div = Vec::new();
    let mut ad = Vec::new();
    let mut ag = Vec::new();
    for _ in 0..100 {
        let b = r.random_range(1..7);
        let f = r.random_range(2..6);

        let p = softmax(&[r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]);
        let q = softmax(&[r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]);
        let got = losses::kl_divergence(&ProbPair::new(p.clone(), q.clone()).unwrap());
        kl.push((got - kl_direct(&p, &q)).abs());

        let logits = rand_tensor(&mut r, b, NUM_CLASSES, 4.0);
        let labels = rand_labels(&mut r, b);
        let mut t = Tape::new();
        let lv = t.constant(logits.clone());
        let v = losses::cls_loss(&mut t, lv, &labels).unwrap();
        ce.push((t.item(v) - mean_ce(&logits, &labels)).abs());

        let (x, g, pr) = (rand_tensor(&mut r, b, f, 2.0), rand_tensor(&mut r, b, f, 2.0), rand_tensor(&mut r, b, f, 2.0));
        let tau = r.random_range(0.1..2.0);
        let mut t = Tape::new();
        let (xv, gv, pv) = (t.constant(x.clone()), t.constant(g.clone()), t.constant(pr.clone()));
        let v = losses::contrastive_loss(&mut t, xv, gv, pv, tau).unwrap();
        con.push((t.item(v) - contrastive_direct(&x, &g, &pr, tau)).abs());

        // small scale keeps exp(−·) away from underflow so the check is informative
        let xs = rand_tensor(&mut r, b, f, 0.3);
        let zs = rand_tensor(&mut r, b, 3, 0.3);
        let mut t = Tape::new();
        let xv = t.constant(xs.clone());
        let v = losses::diversity_loss(&mut t, xv, &zs).unwrap();
        div.push((t.item(v) - diversity_direct(&xs, &zs)).abs());

        let probs: Vec<Vec<f64>> = (0..4).map(|_| (0..b).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let mut t = Tape::new();
        let vs: Vec<Var> = probs.iter().map(|p| t.constant(Tensor::column(p))).collect();
        let d = align_disc_loss(&mut t, [vs[0], vs[1]], [vs[2], vs[3]]).unwrap();
        let gl = align_gen_loss(&mut t, [vs[2], vs[3]]).unwrap();
        ad.push((t.item(d) - align_disc_direct([&probs[0], &probs[1]], [&probs[2], &probs[3]])).abs());
        ag.push((t.item(gl) - align_gen_direct([&probs[2], &probs[3]])).abs());
    }
    let mut lines = Vec::new();
    for (name, gaps) in [
        ("kl", kl),
        ("cls", ce),
        ("contrastive", con),
        ("diversity", div),
        ("align_disc", ad),
        ("align_gen", ag),
    ] {
        lines.push(within(name, worst_gap(gaps.into_iter()), ORACLE_TOL)?);
    }
    lines.push(check_anchors()?);
    Ok(lines.join(", "))
}

/// Closed-form values. Tolerances here are a few ulps.
pub fn check_anchors() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let exactish = |name: &str, got: f64, want: f64| -> Check {
        if (got - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0) {
            Ok(name.to_string())
        } else {
            Err(format!("{name}: {got} vs {want}"))
        }
    };
    let kl = losses::kl_divergence(&ProbPair::new(vec![1.0, 0.0], vec![0.5, 0.5]).unwrap());
    exactish("kl ln2", kl, ln2)?;

    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[3, 2]));
    let v = losses::cls_loss(&mut t, z, &[0, 1, 0]).unwrap();
    exactish("cls ln2", t.item(v), ln2)?;

    let mut t = Tape::new();
    let r = t.constant(Tensor::row(&[1.0, 2.0]));
    let same = t.constant(Tensor::row(&[-3.0, 0.5]));
    let v = losses::contrastive_loss(&mut t, r, same, same, 0.5).unwrap();
    exactish("contrastive ln2", t.item(v), ln2)?;

    let mut t = Tape::new();
    let r = t.constant(Tensor::row(&[1.0, 0.0]));
    let glo = t.constant(Tensor::row(&[2.0, 0.0]));
    let pre = t.constant(Tensor::row(&[0.0, 3.0]));
    let v = losses::contrastive_loss(&mut t, r, glo, pre, 0.5).unwrap();
    exactish("contrastive orthogonal", t.item(v), (1.0 + (-2.0f64).exp()).ln())?;

    let mut t = Tape::new();
    let collapsed = t.constant(Tensor::from_rows(&[[0.3, -0.2], [0.3, -0.2], [0.3, -0.2]]).unwrap());
    let noise = Tensor::from_rows(&[[1.0], [2.0], [-1.0]]).unwrap();
    let v = losses::diversity_loss(&mut t, collapsed, &noise).unwrap();
    if t.item(v) != 1.0 {
        return Err(format!("diversity at collapse {}", t.item(v)));
    }
    Ok("anchors exact".into())
}

// ---- composite decompositions ----

fn logits_of(cfg: &fedack::models::DiscriminatorConfig, params: &ParamSet, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let b = t.bind(params, false);
    let xv = t.constant(x.clone());
    let l = cfg.forward(&mut t, &b, xv).unwrap();
    t.value(l).clone()
}

fn all_zero(p: &ParamSet) -> bool {
    p.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

fn any_nonzero(p: &ParamSet) -> bool {
    !all_zero(p)
}

/// The four composite objectives against weighted sums of oracle components,
/// and the detach contracts of the head objective.
pub fn check_decompositions(seed: u64) -> Check {
    let m = small_models();
    let local = m.local_discriminator();
    let f = m.extractor.feature_dim;
    let mut worst = [0.0f64; 4];
    for case in 0..20 {
        let mut r = rng(seed * 100 + case);
        let w = random_weights(&mut r);
        let b = r.random_range(2..7);
        let d1 = m.discriminator.init(&mut r);
        let d2 = local.init(&mut r);
        let reps = rand_tensor(&mut r, b, f, 1.5);
        let gp = rand_tensor(&mut r, b, f, 1.0);
        let kp = rand_tensor(&mut r, b + 1, f, 1.0);
        let labels = rand_labels(&mut r, b);

        // head objective
        let mut t = Tape::new();
        let b1 = t.bind(&d1, true);
        let b2 = t.bind(&d2, true);
        let inputs = DiscInputs {
            reps: t.constant(reps.clone()),
            labels: &labels,
            global_pseudo: t.constant(gp.clone()),
            local_pseudo: t.constant(kp.clone()),
        };
        let parts = losses::disc_total_loss(&mut t, (&m.discriminator, &b1), (&local, &b2), &inputs, &w).unwrap();
        let (r1, r2) = (logits_of(&m.discriminator, &d1, &reps), logits_of(&local, &d2, &reps));
        let (g1, g2) = (logits_of(&m.discriminator, &d1, &gp), logits_of(&local, &d2, &gp));
        let (k1, k2) = (logits_of(&m.discriminator, &d1, &kp), logits_of(&local, &d2, &kp));
        let cls = mean_ce(&r1, &labels) + mean_ce(&r2, &labels) + mean_ce(&g1, &labels) + mean_ce(&g2, &labels);
        let dis = mean_kl_rows(&r1, &g1);
        let dis_local = mean_kl_rows(&r2, &g2);
        let adv = mean_kl_rows(&r1, &r2);
        let advg = mean_kl_rows(&k1, &k2);
        let want = cls + w.alpha_kd * (dis + dis_local) + w.gamma * (advg - adv);
        worst[0] = worst[0].max((t.item(parts.total) - want).abs());
        for (got, want) in [(parts.cls, cls), (parts.adv, adv), (parts.advg, advg)] {
            worst[0] = worst[0].max((t.item(got) - want).abs());
        }
        // the subtracted disagreement only moves the local head
        let g = t.backward(parts.adv).unwrap();
        if !all_zero(&g.for_bound(&t, &b1)) || !any_nonzero(&g.for_bound(&t, &b2)) {
            return Err("head disagreement gradient must reach the local head only".into());
        }
        // distillation teachers are fixed: the shared head's gradient of the
        // kd term equals that of KL against constant teacher logits
        let g = t.backward(parts.dis).unwrap().for_bound(&t, &b1);
        let mut t2 = Tape::new();
        let b1b = t2.bind(&d1, true);
        let rv = t2.constant(reps.clone());
        let live = m.discriminator.forward(&mut t2, &b1b, rv).unwrap();
        let fixed = t2.constant(g1.clone());
        let kd = losses::mean_kl(&mut t2, live, fixed).unwrap();
        let g_ref = t2.backward(kd).unwrap().for_bound(&t2, &b1b);
        if max_relative_error(&g, &g_ref, 1e-12) > 1e-9 {
            return Err("distillation teacher side is not detached".into());
        }

        // representation objective
        let r_glo = rand_tensor(&mut r, b, f, 1.0);
        let r_pre = rand_tensor(&mut r, b, f, 1.0);
        let mut t = Tape::new();
        let b1 = t.bind(&d1, false);
        let b2 = t.bind(&d2, false);
        let (rv, gv, pv) = (t.constant(reps.clone()), t.constant(r_glo.clone()), t.constant(r_pre.clone()));
        let parts =
            losses::extractor_total_loss(&mut t, (&m.discriminator, &b1), (&local, &b2), rv, gv, pv, &labels, &w).unwrap();
        let want = mean_ce(&r1, &labels) + w.gamma * adv + w.mu * contrastive_direct(&reps, &r_glo, &r_pre, w.tau);
        worst[1] = worst[1].max((t.item(parts.total) - want).abs());

        // local generator objective
        let noise = rand_tensor(&mut r, b + 1, 3, 0.5);
        let small = rand_tensor(&mut r, b + 1, f, 0.3);
        let klabels = rand_labels(&mut r, b + 1);
        let mut t = Tape::new();
        let b1 = t.bind(&d1, false);
        let b2 = t.bind(&d2, false);
        let pv = t.constant(small.clone());
        let parts = losses::local_gen_loss(&mut t, (&m.discriminator, &b1), (&local, &b2), pv, &noise, &klabels).unwrap();
        let (s1, s2) = (logits_of(&m.discriminator, &d1, &small), logits_of(&local, &d2, &small));
        let want = 0.5 * (mean_ce(&s1, &klabels) + mean_ce(&s2, &klabels)) - mean_kl_rows(&s1, &s2)
            + diversity_direct(&small, &noise);
        worst[2] = worst[2].max((t.item(parts.total) - want).abs());

        // global generator objective; one teacher holds no sampled label
        let k = 3;
        let teachers: Vec<ParamSet> = (0..k).map(|_| m.discriminator.init(&mut r)).collect();
        let mut counts: Vec<[u64; 2]> = (0..k).map(|_| [r.random_range(0..30), r.random_range(0..30)]).collect();
        counts[0] = [0, 0];
        counts[1][0] += 1;
        let stats = LabelStats { counts };
        let global = m.discriminator.init(&mut r);
        let mut t = Tape::new();
        let gb = t.bind(&global, false);
        let tb: Vec<Bound> = teachers.iter().map(|p| t.bind(p, false)).collect();
        let ts: Vec<Teacher> = tb.iter().enumerate().map(|(i, b)| Teacher { bound: b, stats_row: i }).collect();
        let pv = t.constant(gp.clone());
        let v = losses::global_gen_loss(&mut t, &m.discriminator, &ts, &gb, pv, &labels, &stats).unwrap();
        let student = logits_of(&m.discriminator, &global, &gp);
        let mut want = 0.0;
        for (i, tp) in teachers.iter().enumerate() {
            let tl = logits_of(&m.discriminator, tp, &gp);
            for (row, &y) in labels.iter().enumerate() {
                let share = stats.counts[i][y] as f64 / stats.counts.iter().map(|c| c[y]).sum::<u64>().max(1) as f64;
                want += share * (kl_logits(tl.row_slice(row), student.row_slice(row)) + ce_direct(tl.row_slice(row), y));
            }
        }
        want /= k as f64;
        worst[3] = worst[3].max((t.item(v) - want).abs());
    }
    let names = ["heads", "extractor", "local generator", "global generator"];
    let mut lines = Vec::new();
    for (n, g) in names.iter().zip(worst) {
        lines.push(within(n, g, ORACLE_TOL)?);
    }
    Ok(lines.join(", "))
}

// ---- aggregation ----

pub fn random_update(rng: &mut ChaCha8Rng, id: usize, n_k: u64) -> ClientUpdate {
    let mut e = ParamSet::new();
    e.push("a", rand_tensor(rng, 3, 4, 5.0)).unwrap();
    e.push("b", Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()).unwrap();
    let mut d = ParamSet::new();
    d.push("layer0.w", rand_tensor(rng, 4, 2, 5.0)).unwrap();
    ClientUpdate {
        client_id: id,
        extractor: e,
        d1: d,
        n_k,
        counts: [n_k, 0],
        loss: 0.0,
    }
}

fn weighted_oracle(updates: &[ClientUpdate], pick: impl Fn(&ClientUpdate) -> &ParamSet) -> Vec<Vec<f64>> {
    let total: u64 = updates.iter().map(|u| u.n_k).sum();
    let first = pick(&updates[0]);
    first
        .iter()
        .map(|(name, t)| {
            (0..t.len())
                .map(|i| {
                    updates
                        .iter()
                        .map(|u| u.n_k as f64 / total as f64 * pick(u).get(name).unwrap().data()[i])
                        .sum()
                })
                .collect()
        })
        .collect()
}

pub fn check_aggregation(seed: u64) -> Check {
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let mut r = rng(seed * 100 + case);
        let k = r.random_range(1..9);
        let mut updates: Vec<ClientUpdate> = (0..k)
            .map(|id| {
                let n = if r.random_bool(0.2) { 0 } else { r.random_range(1..500) };
                random_update(&mut r, id, n)
            })
            .collect();
        if updates.iter().all(|u| u.n_k == 0) {
            updates[0].n_k = 7;
        }
        let (e, d) = aggregate(&updates).map_err(|e| e.to_string())?;
        for (got, want) in [(&e, weighted_oracle(&updates, |u| &u.extractor)), (&d, weighted_oracle(&updates, |u| &u.d1))] {
            for ((_, t), w) in got.iter().zip(&want) {
                for (a, b) in t.data().iter().zip(w) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut r);
        let (e2, d2) = aggregate(&shuffled).map_err(|e| e.to_string())?;
        if e2 != e || d2 != d {
            return Err(format!("case {case}: aggregate depends on arrival order"));
        }
    }
    if worst <= 1e-12 {
        Ok(format!("oracle gap {worst:.1e}, order-invariant bit for bit"))
    } else {
        Err(format!("oracle gap {worst:.3e}"))
    }
}

// ---- partitions ----

/// Mean over non-empty clients of the dominant label's share of the shard.
pub fn max_share(stats: &LabelStats) -> f64 {
    let shares: Vec<f64> = stats
        .counts
        .iter()
        .filter(|c| c.iter().sum::<u64>() > 0)
        .map(|c| *c.iter().max().unwrap() as f64 / c.iter().sum::<u64>() as f64)
        .collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

fn labels_for(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    rand_labels(r, n)
}

pub fn check_partitions(seed: u64) -> Check {
    for case in 0..100u64 {
        let mut r = rng(seed * 1000 + case);
        let n = r.random_range(1..400);
        let labels = labels_for(&mut r, n);
        let spec = PartitionSpec {
            concentration: [0.05, 0.1, 0.5, 1.0, 10.0][case as usize % 5],
            n_clients: r.random_range(1..15),
            seed: case,
        };
        let p = dirichlet_partition(&labels, &spec).map_err(|e| e.to_string())?;
        let mut seen = vec![false; n];
        for shard in &p.shards {
            for &i in shard {
                if seen[i] {
                    return Err(format!("case {case}: sample {i} in two shards"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(format!("case {case}: partition is not exhaustive"));
        }
        if p.stats != label_counts(&p.shards, &labels) {
            return Err(format!("case {case}: stored label stats disagree with the shards"));
        }
        for y in 0..NUM_CLASSES {
            if p.stats.class_total(y) != labels.iter().filter(|&&l| l == y).count() as u64 {
                return Err(format!("case {case}: class {y} total is off"));
            }
            if p.stats.class_total(y) > 0 {
                let s: f64 = (0..p.stats.n_clients()).map(|k| p.stats.share(k, y)).sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(format!("case {case}: shares of class {y} sum to {s}"));
                }
            }
        }
        let prior: f64 = p.stats.prior().iter().sum();
        if (prior - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: prior sums to {prior}"));
        }
    }
    let mut r = rng(seed);
    let labels = labels_for(&mut r, 2000);
    let mean_share = |alpha: f64| {
        (0..20)
            .map(|s| {
                let spec = PartitionSpec {
                    concentration: alpha,
                    n_clients: 10,
                    seed: s,
                };
                max_share(&dirichlet_partition(&labels, &spec).unwrap().stats)
            })
            .sum::<f64>()
            / 20.0
    };
    let (skewed, mild) = (mean_share(0.1), mean_share(1.0));
    if skewed > mild {
        Ok(format!("100 cases exhaustive and disjoint; max-share {skewed:.3} at 0.1 vs {mild:.3} at 1.0"))
    } else {
        Err(format!("max-share {skewed:.3} at 0.1 not above {mild:.3} at 1.0"))
    }
}

// ---- cross-lingual ----

pub fn check_alignment(seed: u64) -> Check {
    let pairs = lingual::synth_bilingual(500, 16, 8, 0.01, seed).map_err(|e| e.to_string())?;
    let cfg = AlignConfig::default();
    let (_, untrained) = lingual::train_alignment(&pairs, cfg.clone(), 0, seed).map_err(|e| e.to_string())?;
    let (_, trained) = lingual::train_alignment(&pairs, cfg, 200, seed).map_err(|e| e.to_string())?;
    let detail = format!(
        "held-out cosine {:.4} untrained, {:.4} after 200 epochs",
        untrained.final_cosine, trained.final_cosine
    );
    if trained.final_cosine >= 0.9 && untrained.final_cosine < 0.3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
