//! SGD with momentum, reduce-on-plateau scheduling, the epoch loop and a
//! synthetic speaker corpus for desk-scale runs.

use std::fmt;
use std::fs;
use std::path::Path;

use mcsae_tensor::{Mode, ParamRegistry};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::Model;
use crate::config::{OptimConfig, RunConfig, SchedConfig};
use crate::error::{Error, IoContext, Result};
use crate::frontend::{fix_length, FeatureMatrix};
use crate::regularization::spec_augment;

/// One momentum update: `v ← μv + g + wd·w`, `w ← w − lr·v`.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

/// Optimizer state; velocity buffers follow the registry order.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &OptimConfig, params: &ParamRegistry) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            velocity: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one step to every parameter. A parameter that received no
    /// gradient is treated as having gradient zero. Nothing is modified if
    /// any gradient is non-finite. With `clip_norm > 0` the gradients are
    /// rescaled so their joint L2 norm does not exceed it.
    pub fn step(&mut self, params: &ParamRegistry) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Training(format!(
                "optimizer tracks {} parameters, registry has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.tensor.grad()).collect();
        for (p, g) in params.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training(format!("non-finite gradient for {}", p.name)));
            }
        }
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for ((p, g), v) in params.iter().zip(grads).zip(&mut self.velocity) {
            let mut g = g.unwrap_or_else(|| vec![0.0; v.len()]);
            if scale != 1.0 {
                g.iter_mut().for_each(|g| *g *= scale);
            }
            sgd_update(&mut p.tensor.data_mut(), &g, v, self.lr, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}

/// Reduce-on-plateau: once the metric has gone more than `patience` epochs
/// without improving by `min_delta`, the rate is multiplied by `factor`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: &SchedConfig) -> Self {
        Self {
            lr,
            factor: cfg.factor,
            patience: cfg.patience,
            min_delta: cfg.min_delta,
            min_lr: cfg.min_lr,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

/// Labelled utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub speakers: usize,
    /// Utterance ids, parallel to `features`.
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Splits every speaker's utterances into the first `per_speaker` and
    /// the rest.
    pub fn split_per_speaker(&self, per_speaker: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.speakers];
        let empty = || Dataset {
            features: Vec::new(),
            labels: Vec::new(),
            speakers: self.speakers,
            ids: Vec::new(),
        };
        let (mut head, mut tail) = (empty(), empty());
        for ((f, &label), id) in self.features.iter().zip(&self.labels).zip(&self.ids) {
            let part = if seen[label] < per_speaker { &mut head } else { &mut tail };
            seen[label] += 1;
            part.features.push(f.clone());
            part.labels.push(label);
            part.ids.push(id.clone());
        }
        (head, tail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utterances: usize,
    pub bins: usize,
    pub frames: usize,
    /// Number of emphasized bands in each speaker template.
    pub bands: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk(seed: u64) -> Self {
        Self {
            speakers: 8,
            utterances: 20,
            bins: 16,
            frames: 64,
            bands: 3,
            noise: 0.5,
            seed,
        }
    }
}

/// Per-speaker spectral templates: a sum of Gaussian bumps across mel bins,
/// constant over time.
pub fn speaker_templates(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.speakers)
        .map(|_| {
            let mut profile = vec![0.0; spec.bins];
            for _ in 0..spec.bands {
                let center = rng.gen_range(0.0..spec.bins as f64);
                let width = rng.gen_range(0.75..2.0);
                let height = rng.gen_range(1.0..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                for (bin, v) in profile.iter_mut().enumerate() {
                    let d = (bin as f64 - center) / width;
                    *v += height * (-0.5 * d * d).exp();
                }
            }
            profile
        })
        .collect()
}

/// Template plus i.i.d. Gaussian noise for every utterance; speaker-major order.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.speakers < 2 {
        return Err(Error::Config("synthetic corpus needs at least two speakers".into()));
    }
    let templates = speaker_templates(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        speakers: spec.speakers,
        ids: Vec::new(),
    };
    for (s, profile) in templates.iter().enumerate() {
        for u in 0..spec.utterances {
            let values = profile
                .iter()
                .flat_map(|&level| std::iter::repeat(level).take(spec.frames))
                .map(|level| level + normal.sample(&mut rng))
                .collect();
            data.features.push(FeatureMatrix::from_values(spec.bins, spec.frames, values)?);
            data.labels.push(s);
            data.ids.push(format!("spk{s:03}/utt{u:03}"));
        }
    }
    Ok(data)
}

/// Loads `dir/<speaker>/*.mcf`, speakers and files in lexical order.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut speakers: Vec<_> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    let mut data = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
        speakers: speakers.len(),
        ids: Vec::new(),
    };
    for (label, spk) in speakers.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(spk)
            .at(spk)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mcf"))
            .collect();
        files.sort();
        for f in files {
            data.features.push(FeatureMatrix::load(&f)?);
            data.labels.push(label);
            let rel = f.strip_prefix(dir).unwrap_or(&f).with_extension("");
            data.ids.push(rel.to_string_lossy().into_owned());
        }
    }
    if data.is_empty() {
        return Err(Error::Input(format!("{}: no feature files found", dir.display())));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    TargetLoss,
    Stagnation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# epoch lr loss accuracy")?;
        for e in &self.epochs {
            writeln!(f, "{} {:e} {:.12e} {:.6}", e.epoch, e.lr, e.loss, e.accuracy)?;
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trains `model` on `data`. The `seed` drives shuffling, cropping,
/// SpecAugment and masking. `on_epoch` sees each record as it completes.
pub fn fit(
    model: &Model,
    data: &Dataset,
    cfg: &RunConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if data.speakers != model.cfg.speakers {
        return Err(Error::Training(format!(
            "dataset has {} speakers, model classifies {}",
            data.speakers, model.cfg.speakers
        )));
    }
    if data.len() < 2 {
        return Err(Error::Training("need at least two utterances".into()));
    }
    let frames = model.cfg.frames;
    cfg.specaug.validate(model.cfg.mel_bins, frames)?;
    let params = model.parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sgd = Sgd::new(&cfg.optim, params);
    let mut sched = PlateauScheduler::new(cfg.optim.lr, &cfg.sched);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.optim.max_epochs {
        sgd.lr = sched.lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        // Batch norm needs two samples, so a trailing singleton is dropped.
        for (b, batch) in order.chunks(cfg.data.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let prepared: Vec<FeatureMatrix> = batch
                .iter()
                .map(|&i| {
                    let f = fix_length(&data.features[i], frames, Some(&mut rng));
                    spec_augment(&f, &cfg.specaug, &mut rng)
                })
                .collect();
            let refs: Vec<&FeatureMatrix> = prepared.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let x = model.input_batch(&refs)?;
            params.zero_grad();
            let out = model.forward(&x, Mode::Train, &mut rng)?;
            let loss = out
                .logits
                .cross_entropy(&labels)
                .ok()
                .filter(|l| l.item().is_finite())
                .ok_or_else(|| Error::Training(format!("non-finite loss at epoch {epoch}, batch {b}")))?;
            let value = loss.item();
            loss.backward()?;
            sgd.step(params)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            let logits = out.logits.to_vec();
            let n = model.cfg.speakers;
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &l)| argmax(&logits[r * n..(r + 1) * n]) == l)
                .count();
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let record = EpochRecord {
            epoch,
            lr: sgd.lr,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        };
        sched.step(record.loss);
        on_epoch(&record);
        let (loss, accuracy) = (record.loss, record.accuracy);
        records.push(record);

        if cfg.data.target_loss > 0.0 && accuracy == 1.0 && loss < cfg.data.target_loss {
            stop = StopReason::TargetLoss;
            break;
        }
        if loss < best - cfg.sched.min_delta {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.sched.early_stop_patience > 0 && since_best >= cfg.sched.early_stop_patience {
            stop = StopReason::Stagnation;
            break;
        }
    }
    Ok(TrainReport { epochs: records, stop })
}

/// Builds the training corpus named by `data.source`.
pub fn load_training_data(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    if cfg.data.source == "synthetic" {
        gen_synthetic(&SynthSpec {
            speakers: cfg.model.speakers,
            utterances: cfg.data.utterances_per_speaker,
            bins: cfg.model.mel_bins,
            frames: cfg.model.frames,
            bands: 3,
            noise: cfg.data.noise,
            seed,
        })
    } else {
        load_dataset_dir(Path::new(&cfg.data.source))
    }
}
