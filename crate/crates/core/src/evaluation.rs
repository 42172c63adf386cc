//! Trial lists, cosine scoring and the EER / minDCF threshold sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mcsae_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use mcsae_tensor::Tensor;

use crate::error::{Error, IoContext, Result};

pub const P_TARGET: f64 = 0.01;
pub const C_MISS: f64 = 1.0;
pub const C_FA: f64 = 1.0;

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Scoring(format!("embedding lengths differ: {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Scoring("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
    /// 1-based line in the source list.
    pub line: usize,
}

/// `label enroll test` per nonblank line, label `1` (target) or `0`.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [label, enroll, test] = fields[..] else {
            return Err(Error::Parse {
                line,
                msg: format!("expected `label enroll test`, got {} fields", fields.len()),
            });
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown label {other:?}"),
                })
            }
        };
        trials.push(Trial {
            target,
            enroll: enroll.to_string(),
            test: test.to_string(),
            line,
        });
    }
    Ok(trials)
}

/// Parallel scores and labels (`true` = target).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Scoring(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Scoring("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_classes(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat(true)
            .take(targets.len())
            .chain(std::iter::repeat(false).take(nontargets.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn counts(&self) -> (usize, usize) {
        let t = self.labels.iter().filter(|&&l| l).count();
        (t, self.labels.len() - t)
    }

    fn check(&self) -> Result<(usize, usize)> {
        let (t, n) = self.counts();
        if t == 0 || n == 0 {
            return Err(Error::Scoring(format!("need targets and nontargets, have {t} and {n}")));
        }
        Ok((t, n))
    }
}

/// Error rates at one candidate threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    /// Fraction of nontargets scoring `>= threshold`.
    pub far: f64,
    /// Fraction of targets scoring `< threshold`.
    pub frr: f64,
}

impl SweepPoint {
    /// Detection cost normalized by the cost of the better trivial system.
    pub fn normalized_dcf(&self) -> f64 {
        (C_MISS * self.frr * P_TARGET + C_FA * self.far * (1.0 - P_TARGET)) / (C_MISS * P_TARGET).min(C_FA * (1.0 - P_TARGET))
    }
}

/// Candidate thresholds in ascending order: every distinct score (accepting
/// that score and above) and one point just above the maximum (rejecting all).
pub fn sweep(s: &ScoreSet) -> Result<Vec<SweepPoint>> {
    let (t, n) = s.check()?;
    let mut pairs: Vec<(f64, bool)> = s.scores.iter().copied().zip(s.labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        points.push(SweepPoint {
            threshold: score,
            far: (n - nontargets_below) as f64 / n as f64,
            frr: targets_below as f64 / t as f64,
        });
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    let top = pairs[pairs.len() - 1].0;
    points.push(SweepPoint {
        threshold: top + 1e-9 * top.abs().max(1.0),
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// `(eer, threshold)`: the mean of FAR and FRR where `|FAR − FRR|` is
/// smallest, the lowest such threshold on ties.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let mut best: Option<SweepPoint> = None;
    for p in sweep(s)? {
        if best.map_or(true, |b| (p.far - p.frr).abs() < (b.far - b.frr).abs()) {
            best = Some(p);
        }
    }
    let b = best.expect("sweep is never empty");
    Ok(((b.far + b.frr) / 2.0, b.threshold))
}

/// `(min_dcf, threshold)` over the same sweep, lowest threshold on ties.
pub fn compute_min_dcf(s: &ScoreSet) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, 0.0);
    for p in sweep(s)? {
        let c = p.normalized_dcf();
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

/// Utterance id → embedding.
pub type EmbeddingStore = HashMap<String, Vec<f64>>;

pub fn write_embeddings<W: Write>(w: &mut W, store: &EmbeddingStore) -> Result<()> {
    let mut ids: Vec<&String> = store.keys().collect();
    ids.sort();
    let entries = ids
        .into_iter()
        .map(|id| Ok((id.clone(), Tensor::new(&[store[id].len()], store[id].clone())?)))
        .collect::<Result<Vec<_>>>()?;
    write_checkpoint(w, &entries)?;
    Ok(())
}

pub fn save_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    write_embeddings(&mut w, store)?;
    w.flush().at(path)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let mut r = BufReader::new(File::open(path).at(path)?);
    let entries = read_checkpoint(&mut r).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(entries.into_iter().map(|(id, t)| (id, t.to_vec())).collect())
}

/// Cosine score of every trial, split across `jobs` threads; the result
/// does not depend on `jobs`.
pub fn score_trials(trials: &[Trial], store: &EmbeddingStore, jobs: usize) -> Result<Vec<f64>> {
    let lookup = |id: &str, line: usize| {
        store
            .get(id)
            .ok_or_else(|| Error::Scoring(format!("trial line {line}: no embedding for {id:?}")))
    };
    let score = |t: &Trial| cosine_score(lookup(&t.enroll, t.line)?, lookup(&t.test, t.line)?);
    let jobs = jobs.max(1);
    if jobs == 1 || trials.len() < 2 {
        return trials.iter().map(score).collect();
    }
    let chunk = trials.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = trials
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(score).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(trials.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

/// One `label score enroll test` line per trial.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    let mut out = String::new();
    for (t, s) in trials.iter().zip(scores) {
        let _ = writeln!(out, "{} {} {} {}", u8::from(t.target), s, t.enroll, t.test);
    }
    out
}

pub fn parse_scores(text: &str) -> Result<ScoreSet> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line, msg };
        if fields.len() != 4 {
            return Err(bad(format!("expected `label score enroll test`, got {} fields", fields.len())));
        }
        labels.push(match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("unknown label {other:?}"))),
        });
        scores.push(
            fields[1]
                .parse::<f64>()
                .ok()
                .filter(|s| s.is_finite())
                .ok_or_else(|| bad(format!("bad score {:?}", fields[1])))?,
        );
    }
    ScoreSet::new(scores, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub targets: usize,
    pub nontargets: usize,
}

pub fn evaluate(s: &ScoreSet) -> Result<Metrics> {
    let (eer, eer_threshold) = compute_eer(s)?;
    let (min_dcf, min_dcf_threshold) = compute_min_dcf(s)?;
    let (targets, nontargets) = s.counts();
    Ok(Metrics {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
        targets,
        nontargets,
    })
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "eer_percent {:.2}", self.eer * 100.0)?;
        writeln!(f, "eer_threshold {}", self.eer_threshold)?;
        writeln!(f, "min_dcf {:.4}", self.min_dcf)?;
        writeln!(f, "min_dcf_threshold {}", self.min_dcf_threshold)?;
        writeln!(f, "p_target {P_TARGET}")?;
        writeln!(f, "targets {}", self.targets)?;
        writeln!(f, "nontargets {}", self.nontargets)
    }
}

/// `threshold far frr dcf` per sweep point, for external plotting.
pub fn format_sweep(points: &[SweepPoint]) -> String {
    let mut out = String::from("# threshold far frr min_dcf_normalized\n");
    for p in points {
        let _ = writeln!(out, "{} {} {} {}", p.threshold, p.far, p.frr, p.normalized_dcf());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        let x = [1.0, 2.0, -3.0];
        assert!((cosine_score(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn separable_and_inverted() {
        let s = ScoreSet::from_classes(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().0, 0.0);
        assert_eq!(compute_min_dcf(&s).unwrap().0, 0.0);
        let s = ScoreSet::from_classes(&[0.1], &[0.9]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().0, 1.0);
    }

    #[test]
    fn empty_class_rejected() {
        let s = ScoreSet::from_classes(&[0.5], &[]).unwrap();
        assert!(compute_eer(&s).is_err());
        assert!(compute_min_dcf(&s).is_err());
    }

    #[test]
    fn trial_parsing() {
        let t = parse_trials("1 A/a.wav B/b.wav\n\n0 A/a.wav C/c.wav\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].target && !t[1].target);
        assert_eq!((t[1].enroll.as_str(), t[1].test.as_str(), t[1].line), ("A/a.wav", "C/c.wav", 3));
        assert!(matches!(parse_trials("2 x y"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trials("1 x y\n1 x"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn score_file_round_trip() {
        let trials = parse_trials("1 a b\n0 a c\n").unwrap();
        let text = format_scores(&trials, &[0.25, -0.125]);
        assert_eq!(text, "1 0.25 a b\n0 -0.125 a c\n");
        let s = parse_scores(&text).unwrap();
        assert_eq!(s.scores, vec![0.25, -0.125]);
        assert_eq!(s.labels, vec![true, false]);
    }

    #[test]
    fn scoring_independent_of_jobs() {
        let store: EmbeddingStore = (0..10).map(|i| (format!("u{i}"), vec![1.0, i as f64, (i * i) as f64 - 3.0])).collect();
        let text: String = (0..30).map(|k| format!("{} u{} u{}\n", k % 2, k % 10, (k * 7 + 3) % 10)).collect();
        let trials = parse_trials(&text).unwrap();
        let one = score_trials(&trials, &store, 1).unwrap();
        for jobs in [2, 3, 8] {
            assert_eq!(score_trials(&trials, &store, jobs).unwrap(), one);
        }
        let missing = parse_trials("1 u1 nope").unwrap();
        assert!(score_trials(&missing, &store, 1).is_err());
    }

    #[test]
    fn report_has_expected_keys() {
        let s = ScoreSet::from_classes(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        let text = evaluate(&s).unwrap().to_string();
        assert!(text.starts_with("eer_percent 0.00\n"));
        assert!(text.contains("min_dcf 0.0000"));
    }
}
