//! Self-verification suites run by `mcsae selftest`: gradient checks,
//! shape tables, attention algebra, masking statistics, metric oracles,
//! optimizer recursions and determinism.

use std::time::Instant;

use mcsae_tensor::{grad_check, no_grad, Mode, RunningStats, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_attention_matrix, cross_branch};
use crate::backbone::Model;
use crate::config::{EncodingMode, ModelConfig, RunConfig, SchedConfig};
use crate::evaluation::{compute_eer, compute_min_dcf, ScoreSet, SweepPoint};
use crate::frontend::{cmvn_sliding, hz_to_mel, log_mel, FeatureMatrix};
use crate::regularization::{mask_gate, sample_mask, RandomMask};
use crate::training::{fit, gen_synthetic, sgd_update, PlateauScheduler, SynthSpec};

pub type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub const SUITES: &[(&str, fn() -> Check)] = &[
    ("gradient", gradient_suite),
    ("shapes", shape_suite),
    ("modes", mode_suite),
    ("mcsae-algebra", algebra_suite),
    ("masking", masking_suite),
    ("metrics", metric_suite),
    ("frontend", frontend_suite),
    ("optimizer", optimizer_suite),
    ("determinism", determinism_suite),
];

/// Runs every suite whose name contains `filter` (all when `None`).
pub fn run_suites(filter: Option<&str>) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .filter(|(name, _)| filter.map_or(true, |f| name.contains(f)))
        .map(|(name, suite)| {
            let start = Instant::now();
            let outcome = std::panic::catch_unwind(suite).unwrap_or_else(|_| Err("panicked".into()));
            let seconds = start.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => SuiteReport { name, passed: true, detail, seconds },
                Err(detail) => SuiteReport { name, passed: false, detail, seconds },
            }
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Values bounded away from zero so finite differences stay off LReLU kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Result of [`model_grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct ModelGradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Entries skipped because their perturbation crossed an LReLU kink.
    pub skipped: usize,
}

/// Largest relative error between backward and central differences of the
/// train-mode cross-entropy of `model` over `samples` randomly chosen
/// parameter entries.
///
/// Each evaluation reseeds the masking stream, so the sampled masks are
/// identical across evaluations. Mask factors are skipped because their
/// gradient is a surrogate, not a derivative of the value. An entry whose
/// central differences at `eps` and `eps/2` disagree by more than `1e-7`
/// (relative) has moved some activation across a kink; it is skipped and
/// another entry is drawn.
pub fn model_grad_check(model: &Model, x: &Tensor, labels: &[usize], samples: usize, seed: u64) -> std::result::Result<ModelGradCheck, String> {
    let loss = || -> std::result::Result<Tensor, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward(x, Mode::Train, &mut rng).map_err(err)?;
        out.logits.cross_entropy(labels).map_err(err)
    };
    let params: Vec<_> = model.parameters().iter().filter(|p| !p.name.ends_with("mask_factor")).collect();
    model.parameters().zero_grad();
    loss()?.backward().map_err(err)?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut result = ModelGradCheck { worst: 0.0, checked: 0, skipped: 0 };
    while result.checked < samples {
        if result.skipped > 4 * samples {
            return Err(format!("{} of {} sampled entries crossed kinks", result.skipped, result.skipped + result.checked));
        }
        let p = params[pick.gen_range(0..params.len())];
        let i = pick.gen_range(0..p.tensor.numel());
        let analytic = p.tensor.grad().map_or(0.0, |g| g[i]);
        let orig = p.tensor.data()[i];
        let central = |eps: f64| {
            no_grad(|| -> std::result::Result<f64, String> {
                p.tensor.data_mut()[i] = orig + eps;
                let up = loss();
                p.tensor.data_mut()[i] = orig - eps;
                let down = loss();
                p.tensor.data_mut()[i] = orig;
                Ok((up?.item() - down?.item()) / (2.0 * eps))
            })
        };
        let (numeric, half) = (central(GRAD_EPS)?, central(GRAD_EPS / 2.0)?);
        if (numeric - half).abs() > 1e-7 * numeric.abs().max(half.abs()).max(1e-8) {
            result.skipped += 1;
            continue;
        }
        result.checked += 1;
        result.worst = result.worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    model.parameters().zero_grad();
    Ok(result)
}

/// Moves the MCSAE transform shifts off zero: masked entries enter the
/// transform as `W·0 + b`, which sits exactly on the kink when `b = 0`.
pub fn shift_transforms_off_kink(model: &Model, shift: f64) {
    for p in model.parameters().iter() {
        if p.name.starts_with("mcsae") && (p.name.ends_with(".b1") || p.name.ends_with(".b2")) {
            p.tensor.data_mut()[0] = shift;
        }
    }
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let gamma = random_tensor(&mut rng, &[2], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[2], -0.5, 0.5);
    let stats = RunningStats::new(2);
    let kink = off_kink(&mut rng, &[2, 6]);
    type Op<'a> = (&'a str, Tensor, Box<dyn Fn(&Tensor) -> mcsae_tensor::Result<Tensor> + 'a>);
    let ops: Vec<Op> = vec![
        ("matmul", a.clone(), Box::new(|x| Ok(x.matmul(&b)?.tanh().sum()))),
        ("conv2d", random_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0), Box::new(|x| Ok(x.conv2d(&w, None, 2, 1)?.tanh().sum()))),
        (
            "batch_norm2d",
            random_tensor(&mut rng, &[3, 2, 2, 3], -1.0, 1.0),
            Box::new(|x| Ok(x.batch_norm2d(&gamma, &beta, &stats, Mode::Train)?.tanh().sum())),
        ),
        ("softmax", a.clone(), Box::new(|x| Ok(x.softmax(1)?.mul(&a)?.sum()))),
        ("cross_entropy", a.clone(), Box::new(|x| x.cross_entropy(&[0, 3, 1]))),
        ("leaky_relu", kink, Box::new(|x| Ok(x.leaky_relu(0.01).mul(x)?.sum()))),
        ("global_avg_pool", random_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0), Box::new(|x| Ok(x.global_avg_pool()?.tanh().sum()))),
        ("cross_branch", random_tensor(&mut rng, &[2, 4], 0.0, 1.0), Box::new(|x| Ok(cross_branch(x, &x.scale(0.5).add_scalar(0.2)).map_err(|e| mcsae_tensor::TensorError::Contract(e.to_string()))?.tanh().sum()))),
    ];
    let mut lines = Vec::new();
    for (name, x, f) in &ops {
        let e = grad_check(f, x, GRAD_EPS).map_err(err)?;
        ensure!(e <= GRAD_TOL, "{name}: relative error {e:.2e} > {GRAD_TOL:e}");
        lines.push(format!("{name} {e:.1e}"));
    }
    let model = Model::new(ModelConfig::desk(), 3).map_err(err)?;
    shift_transforms_off_kink(&model, 0.1);
    let x = random_tensor(&mut rng, &[4, 1, 16, 64], -1.0, 1.0);
    let c = model_grad_check(&model, &x, &[0, 1, 2, 3], 40, 5)?;
    ensure!(c.worst <= GRAD_TOL, "composed loss: relative error {:.2e} > {GRAD_TOL:e}", c.worst);
    lines.push(format!("composed-loss {:.1e} ({} entries, {} kink crossings skipped)", c.worst, c.checked, c.skipped));
    Ok(lines.join(", "))
}

/// Shape table of the full-scale MCSAE network for one utterance.
pub fn full_scale_shapes() -> std::result::Result<Vec<(String, Vec<usize>)>, String> {
    let model = Model::new(ModelConfig::full(16), 0).map_err(err)?;
    let x = Tensor::new(&[1, 1, 64, 1200], (0..64 * 1200).map(|i| (i as f64 * 0.37).sin()).collect()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = no_grad(|| model.forward(&x, Mode::Eval, &mut rng)).map_err(err)?;
    let mut table = Vec::new();
    for (i, p) in out.taps.pooled.iter().enumerate() {
        table.push((format!("P{}", i + 1), p.shape()[1..].to_vec()));
    }
    for (i, s) in out.encoded.stages.iter().enumerate() {
        table.push((format!("z{}", i + 1), s.segment.shape()[1..].to_vec()));
    }
    let z = &out.encoded.attention.as_ref().ok_or("no attention matrix")?.z;
    table.push(("Z".into(), z.shape()[1..].to_vec()));
    table.push(("C".into(), out.encoded.pre_head.shape()[1..].to_vec()));
    table.push(("SE".into(), out.embedding.shape()[1..].to_vec()));
    Ok(table)
}

pub const TABLE1: &[(&str, &[usize])] = &[
    ("P1", &[32]),
    ("P2", &[32]),
    ("P3", &[64]),
    ("P4", &[128]),
    ("P5", &[256]),
    ("z1", &[32, 32]),
    ("z2", &[32, 64]),
    ("z3", &[64, 128]),
    ("z4", &[128, 256]),
    ("Z", &[256]),
    ("C", &[512]),
    ("SE", &[512]),
];

fn shape_suite() -> Check {
    let table = full_scale_shapes()?;
    ensure!(table.len() == TABLE1.len(), "expected {} entries, got {}", TABLE1.len(), table.len());
    for ((name, shape), (want_name, want)) in table.iter().zip(TABLE1) {
        ensure!(name == want_name && shape.as_slice() == *want, "{name} is {shape:?}, expected {want_name} {want:?}");
    }
    Ok(format!("{} entries match at D=64, L=1200", table.len()))
}

fn mode_suite() -> Check {
    let expected = [(EncodingMode::Gap, 256), (EncodingMode::Sap, 256), (EncodingMode::MlaSap, 512), (EncodingMode::Mcsae, 512)];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[2, 1, 16, 64], -1.0, 1.0);
    for (mode, width) in expected {
        let full = ModelConfig { mode, ..ModelConfig::full(16) };
        ensure!(full.pre_head_width() == width, "{mode}: full-scale pre-head width {} != {width}", full.pre_head_width());
        let model = Model::new(ModelConfig { mode, ..ModelConfig::desk() }, 1).map_err(err)?;
        let out = no_grad(|| model.forward(&x, Mode::Train, &mut rng)).map_err(err)?;
        ensure!(
            out.encoded.pre_head.shape() == [2, model.cfg.pre_head_width()],
            "{mode}: desk pre-head {:?}",
            out.encoded.pre_head.shape()
        );
    }
    for dim in [64, 128, 256, 512] {
        let model = Model::new(ModelConfig { embedding_dim: dim, ..ModelConfig::desk() }, 1).map_err(err)?;
        let out = no_grad(|| model.forward(&x, Mode::Eval, &mut rng)).map_err(err)?;
        ensure!(out.embedding.shape() == [2, dim], "fc-3 width {dim}: got {:?}", out.embedding.shape());
    }
    Ok("gap/sap 256, mla-sap/mcsae 512; SE 64/128/256/512".into())
}

pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    DMatrix::from_row_slice(rows, cols, data).singular_values().iter().copied().collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn algebra_suite() -> Check {
    let model = Model::new(ModelConfig::desk(), 4).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[2, 1, 16, 64], -1.0, 1.0);
    let out = no_grad(|| model.forward(&x, Mode::Train, &mut rng)).map_err(err)?;
    let mut worst_ratio: f64 = 0.0;
    for (i, stage) in out.encoded.stages.iter().enumerate() {
        let &[b, r, c] = stage.segment.shape() else { return Err("segment not rank 3".into()) };
        let data = stage.segment.to_vec();
        for row in 0..b {
            let mut sv = singular_values(r, c, &data[row * r * c..(row + 1) * r * c]);
            sv.sort_by(|a, b| b.total_cmp(a));
            let ratio = sv.get(1).copied().unwrap_or(0.0) / sv[0].max(f64::MIN_POSITIVE);
            ensure!(ratio <= 1e-8, "z{} row {row}: σ2/σ1 = {ratio:.2e}", i + 1);
            worst_ratio = worst_ratio.max(ratio);
        }
    }
    let z = out.encoded.attention.as_ref().ok_or("no attention matrix")?.z.to_vec();
    let b2 = out.encoded.stages[3].branch2.to_vec();
    let d = b2.len() / 2;
    for row in 0..2 {
        let zr = &z[row * d..(row + 1) * d];
        if zr.iter().any(|&v| v != 0.0) {
            let c = cosine(zr, &b2[row * d..(row + 1) * d]).abs();
            ensure!(c >= 1.0 - 1e-9, "Z row {row} not collinear with branch 2 of stage 4: |cos| = {c}");
        }
    }
    for _ in 0..50 {
        let q = random_tensor(&mut rng, &[3, 5], -3.0, 3.0);
        let kv = random_tensor(&mut rng, &[3, 7], -3.0, 3.0);
        let y = cross_branch(&q, &kv).map_err(err)?.to_vec();
        let kv = kv.to_vec();
        for row in 0..3 {
            let k = &kv[row * 7..(row + 1) * 7];
            let (lo, hi) = k.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            for &v in &y[row * 5..(row + 1) * 5] {
                ensure!(v >= lo - 1e-12 && v <= hi + 1e-12, "cross_branch output {v} outside [{lo}, {hi}]");
            }
        }
    }
    let ones = Tensor::ones(&[1, 3]);
    ensure!(build_attention_matrix(&ones, &[Tensor::ones(&[1, 4, 2])]).is_err(), "chain mismatch not rejected");
    let x = random_tensor(&mut rng, &[2, 1, 16, 64], -1.0, 1.0);
    let first = no_grad(|| model.forward(&x, Mode::Eval, &mut rng)).map_err(err)?.embedding.to_vec();
    let second = no_grad(|| model.forward(&x, Mode::Eval, &mut rng)).map_err(err)?.embedding.to_vec();
    ensure!(first == second, "eval forward not bit-exact");
    Ok(format!("max σ2/σ1 {worst_ratio:.1e}; Z ∥ branch2; convex bound; eval bit-exact"))
}

fn masking_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, &[4, 8], -2.0, 2.0);
    let keep = mask_gate(&x, &RandomMask::new("m", 0.0), Mode::Train, &mut rng).map_err(err)?;
    ensure!(keep.to_vec() == x.to_vec(), "p = 0 is not the identity");
    let drop = mask_gate(&x, &RandomMask::new("m", 1.0), Mode::Train, &mut rng).map_err(err)?;
    ensure!(drop.to_vec().iter().all(|&v| v == 0.0), "p = 1 does not zero the input");
    let eval = mask_gate(&x, &RandomMask::new("m", 0.5), Mode::Eval, &mut rng).map_err(err)?;
    ensure!(eval.to_vec() == x.to_vec(), "eval mode is not the identity");
    let mut rates = Vec::new();
    for p in [0.1, 0.5, 0.9] {
        let n = 100_000;
        let masked = sample_mask(n, p, &mut rng).iter().filter(|&&m| m == 0.0).count() as f64 / n as f64;
        ensure!((masked - p).abs() <= 0.02, "p = {p}: empirical rate {masked}");
        rates.push(format!("{p}→{masked:.4}"));
    }
    let mask = RandomMask::new("m", 0.5);
    let xg = Tensor::ones(&[1, 16]).requires_grad();
    mask_gate(&xg, &mask, Mode::Train, &mut rng).map_err(err)?.sum().backward().map_err(err)?;
    let g = mask.factor.tensor.grad().map_or(0.0, |g| g[0]);
    ensure!(g != 0.0, "masking factor received no gradient");
    Ok(format!("rates {}; dL/dp = {g}", rates.join(" ")))
}

/// Exhaustive threshold oracle: every score ± a small offset and both
/// infinities, rates counted directly.
pub fn brute_force_metrics(s: &ScoreSet) -> (f64, f64) {
    let (t, n) = s.counts();
    let mut candidates: Vec<f64> = s.scores.iter().flat_map(|&v| [v, v + 1e-9 * v.abs().max(1.0)]).collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.sort_by(f64::total_cmp);
    let rates = |th: f64| {
        let far = s.scores.iter().zip(&s.labels).filter(|&(&v, &l)| !l && v >= th).count() as f64 / n as f64;
        let frr = s.scores.iter().zip(&s.labels).filter(|&(&v, &l)| l && v < th).count() as f64 / t as f64;
        (far, frr)
    };
    let mut eer = (f64::INFINITY, 0.0);
    let mut dcf = f64::INFINITY;
    for th in candidates {
        let (far, frr) = rates(th);
        let gap = (far - frr).abs();
        if gap < eer.0 {
            eer = (gap, (far + frr) / 2.0);
        }
        dcf = dcf.min(SweepPoint { threshold: th, far, frr }.normalized_dcf());
    }
    (eer.1, dcf)
}

pub fn random_score_set(rng: &mut ChaCha8Rng, max_trials: usize) -> ScoreSet {
    let n = rng.gen_range(2..=max_trials);
    let separation = rng.gen_range(0.0..2.0);
    let quantize = rng.gen_bool(0.3);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let target = i == 0 || (i > 1 && rng.gen_bool(0.3));
        let mut v: f64 = rng.gen_range(-1.0..1.0) + if target { separation } else { 0.0 };
        if quantize {
            v = (v * 10.0).round() / 10.0;
        }
        scores.push(v);
        labels.push(target);
    }
    ScoreSet::new(scores, labels).expect("finite scores")
}

fn metric_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..30 {
        let s = random_score_set(&mut rng, 1000);
        let (eer, dcf) = brute_force_metrics(&s);
        let got_eer = compute_eer(&s).map_err(err)?.0;
        let got_dcf = compute_min_dcf(&s).map_err(err)?.0;
        ensure!((eer - got_eer).abs() <= 1e-12, "set {k}: EER {got_eer} vs oracle {eer}");
        ensure!((dcf - got_dcf).abs() <= 1e-12, "set {k}: minDCF {got_dcf} vs oracle {dcf}");
        ensure!(got_dcf <= 1.0 + 1e-12, "set {k}: minDCF {got_dcf} > 1");
    }
    let sep = ScoreSet::from_classes(&[0.9, 0.8], &[0.1, 0.2]).map_err(err)?;
    ensure!(compute_eer(&sep).map_err(err)?.0 == 0.0, "separable EER not 0");
    let inv = ScoreSet::from_classes(&[0.1], &[0.9]).map_err(err)?;
    ensure!(compute_eer(&inv).map_err(err)?.0 == 1.0, "inverted EER not 1");
    Ok("30 random sets match the exhaustive oracle".into())
}

fn frontend_suite() -> Check {
    let sr = 16_000;
    let tone: Vec<f64> = (0..sr).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin()).collect();
    let f = log_mel(&tone, sr as u32, 64).map_err(err)?;
    ensure!(f.frames() == 98, "1 s at 16 kHz gave {} frames, expected 98", f.frames());
    let mid = f.frames() / 2;
    let argmax = (0..64).max_by(|&a, &b| f.get(a, mid).total_cmp(&f.get(b, mid))).unwrap_or(0);
    let step = hz_to_mel(8000.0) / 65.0;
    let centre = (hz_to_mel(1000.0) / step).round() as usize - 1;
    ensure!(argmax.abs_diff(centre) <= 1, "1 kHz tone peaks in band {argmax}, expected near {centre}");
    let noise = FeatureMatrix::from_values(4, 50, (0..200).map(|i| ((i * 37 % 11) as f64).sin() * 3.0 + 1.0).collect()).map_err(err)?;
    let n = cmvn_sliding(&noise, 300);
    for b in 0..4 {
        let row: Vec<f64> = (0..50).map(|t| n.get(b, t)).collect();
        let mean = row.iter().sum::<f64>() / 50.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        ensure!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "CMVN bin {b}: mean {mean}, var {var}");
    }
    Ok(format!("98 frames; 1 kHz → band {argmax}; CMVN zero-mean unit-variance"))
}

fn optimizer_suite() -> Check {
    let (mut w, mut v) = (vec![1.0, -2.0], vec![0.0, 0.0]);
    let grads = [[0.5, 0.25], [-0.1, 0.3]];
    let (lr, mu, wd) = (0.1, 0.9, 1e-4);
    let (mut hw, mut hv) = ([1.0f64, -2.0], [0.0f64, 0.0]);
    for g in &grads {
        sgd_update(&mut w, g, &mut v, lr, mu, wd);
        for k in 0..2 {
            hv[k] = mu * hv[k] + g[k] + wd * hw[k];
            hw[k] -= lr * hv[k];
        }
    }
    ensure!(w == hw.to_vec(), "two-step recursion mismatch: {w:?} vs {hw:?}");
    let (mut w, mut v) = (vec![1.0, -2.0], vec![0.0; 2]);
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        sgd_update(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 1e-2);
        let norm = w.iter().map(|x| x * x).sum::<f64>();
        ensure!(norm < last, "weight decay did not shrink ‖w‖");
        last = norm;
    }
    let mut s = PlateauScheduler::new(0.1, &SchedConfig { min_lr: 1e-3, ..SchedConfig::default() });
    let mut trace = vec![s.step(1.0)];
    for _ in 0..40 {
        trace.push(s.step(1.0));
    }
    ensure!(trace.windows(2).all(|w| w[1] <= w[0]), "learning rate increased");
    ensure!((trace[6] - 0.01).abs() < 1e-15, "sixth stagnant epoch gave lr {}", trace[6]);
    ensure!((trace.last().copied().unwrap_or(0.0) - 1e-3).abs() < 1e-15, "lr not clipped at min_lr");
    Ok("hand recursion exact; decay shrinks ‖w‖; plateau 0.1→0.01→0.001".into())
}

fn determinism_suite() -> Check {
    let mut cfg = RunConfig::desk();
    cfg.optim.max_epochs = 2;
    let data = gen_synthetic(&SynthSpec { utterances: 4, ..SynthSpec::desk(5) }).map_err(err)?;
    let run = || -> std::result::Result<(String, Vec<f64>), String> {
        let model = Model::new(cfg.model.clone(), 5).map_err(err)?;
        let report = fit(&model, &data, &cfg, 5, |_| {}).map_err(err)?;
        let emb = model.extract_embedding(&data.features[0]).map_err(err)?;
        Ok((report.to_string(), emb))
    };
    let (a, b) = (run()?, run()?);
    ensure!(a.0 == b.0, "training reports differ");
    ensure!(a.1 == b.1, "embeddings differ");
    Ok("two seeded runs bit-identical".into())
}
