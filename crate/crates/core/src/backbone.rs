//! Half-width residual backbone with pooled taps after every stage, the
//! selectable utterance encoder, the fully connected embedding head and the
//! speaker classifier.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mcsae_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use mcsae_tensor::{no_grad, Mode, ParamRegistry, Parameter, RunningStats, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{build_attention_matrix, concat_embedding, AttentionMatrix, McsaeStage, SapHead, StageAttention};
use crate::config::{parse_pairs, EncodingMode, ModelConfig, RunConfig};
use crate::error::{Error, IoContext, Result};
use crate::frontend::FeatureMatrix;

const HEADER_MAGIC: &str = "MCSAE-MODEL 1";
const HEADER_END: &str = "END";

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("positive extents")
}

/// Convolution without bias followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub weight: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub stats: RunningStats,
    pub stride: usize,
    pub pad: usize,
    name: String,
}

impl ConvBn {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weight: Parameter::new(format!("{name}.w"), gaussian(rng, &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt())),
            gamma: Parameter::new(format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: Parameter::new(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            stats: RunningStats::new(c_out),
            stride,
            pad: kernel / 2,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(x
            .conv2d(&self.weight.tensor, None, self.stride, self.pad)?
            .batch_norm2d(&self.gamma.tensor, &self.beta.tensor, &self.stats, mode)?)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.gamma, &self.beta]
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        vec![
            (format!("{}.bn.running_mean", self.name), self.stats.mean.clone()),
            (format!("{}.bn.running_var", self.name), self.stats.var.clone()),
        ]
    }
}

/// Two 3×3 conv/BN layers with a shortcut; the shortcut is a stride-2 1×1
/// projection when the block downsamples or changes width.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub slope: f64,
}

impl ResidualBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, downsample: bool, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let stride = if downsample { 2 } else { 1 };
        Self {
            conv1: ConvBn::new(&format!("{name}.conv1"), c_in, c_out, 3, stride, rng),
            conv2: ConvBn::new(&format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
            shortcut: (downsample || c_in != c_out).then(|| ConvBn::new(&format!("{name}.proj"), c_in, c_out, 1, stride, rng)),
            slope,
        }
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.conv1.parameters();
        p.extend(self.conv2.parameters());
        if let Some(s) = &self.shortcut {
            p.extend(s.parameters());
        }
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut b = self.conv1.buffers();
        b.extend(self.conv2.buffers());
        if let Some(s) = &self.shortcut {
            b.extend(s.buffers());
        }
        b
    }
}

/// `LReLU(BN(conv(LReLU(BN(conv(x))))) + shortcut(x))`.
pub fn residual_block(x: &Tensor, block: &ResidualBlock, mode: Mode) -> Result<Tensor> {
    let h = block.conv1.forward(x, mode)?.leaky_relu(block.slope);
    let h = block.conv2.forward(&h, mode)?;
    let skip = match &block.shortcut {
        Some(proj) => proj.forward(x, mode)?,
        None => x.clone(),
    };
    Ok(h.add(&skip)?.leaky_relu(block.slope))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.w"), gaussian(rng, &[fan_in, fan_out], (gain / fan_in as f64).sqrt())),
            bias: Parameter::new(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.tensor)?.add_bias(&self.bias.tensor)?)
    }

    pub fn out_dim(&self) -> usize {
        self.bias.tensor.numel()
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Gap,
    Sap(SapHead),
    MlaSap(Vec<SapHead>),
    Mcsae(Vec<McsaeStage>),
}

/// Feature maps F0..F4 and their global average pools P1..P5.
#[derive(Clone, Debug)]
pub struct Taps {
    pub maps: Vec<Tensor>,
    pub pooled: Vec<Tensor>,
}

/// Output of the encoder ahead of the fully connected head.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `B×width`; the concatenation `C` in MCSAE mode.
    pub pre_head: Tensor,
    /// Per-stage segment matrices (MCSAE mode only).
    pub stages: Vec<StageAttention>,
    pub attention: Option<AttentionMatrix>,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    pub taps: Taps,
    pub encoded: Encoded,
    /// Speaker embedding, `B×embedding_dim`.
    pub embedding: Tensor,
    /// `B×speakers`.
    pub logits: Tensor,
}

impl StageOutputs {
    pub fn pooled(&self, i: usize) -> &Tensor {
        &self.taps.pooled[i - 1]
    }

    pub fn segment(&self, i: usize) -> &Tensor {
        &self.encoded.stages[i - 1].segment
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub encoder: Encoder,
    pub fc: [Linear; 3],
    pub output: Linear,
    registry: ParamRegistry,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, ..] = cfg.widths;
        let slope = cfg.slope;
        let stem = ConvBn::new("conv1", 1, c1, 7, 1, &mut rng);
        let mut stages = Vec::with_capacity(4);
        let mut c_in = c1;
        for (s, (&width, &count)) in cfg.widths.iter().zip(&cfg.blocks).enumerate() {
            let blocks = (0..count)
                .map(|b| {
                    let block = ResidualBlock::new(&format!("res{}.{b}", s + 1), c_in, width, b == 0 && s > 0, slope, &mut rng);
                    c_in = width;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        let taps = cfg.tap_widths();
        let sap = |name: &str, d: usize, rng: &mut ChaCha8Rng| {
            SapHead::new(name, gaussian(rng, &[d, d], (1.0 / d as f64).sqrt()), gaussian(rng, &[d], (1.0 / d as f64).sqrt()))
        };
        let encoder = match cfg.mode {
            EncodingMode::Gap => Encoder::Gap,
            EncodingMode::Sap => Encoder::Sap(sap("sap", taps[4], &mut rng)),
            EncodingMode::MlaSap => Encoder::MlaSap(
                taps.iter()
                    .enumerate()
                    .map(|(i, &d)| sap(&format!("sap{}", i + 1), d, &mut rng))
                    .collect(),
            ),
            EncodingMode::Mcsae => Encoder::Mcsae(
                (0..4)
                    .map(|i| McsaeStage::new(i + 1, (taps[i], taps[i + 1]), slope, cfg.mask_initial_factor))
                    .collect(),
            ),
        };
        let fc = [
            Linear::new("fc1", cfg.pre_head_width(), cfg.head_hidden, 2.0, &mut rng),
            Linear::new("fc2", cfg.head_hidden, cfg.head_hidden, 2.0, &mut rng),
            Linear::new("fc3", cfg.head_hidden, cfg.embedding_dim, 1.0, &mut rng),
        ];
        let output = Linear::new("output", cfg.embedding_dim, cfg.speakers, 1.0, &mut rng);

        let mut model = Self {
            cfg,
            stem,
            stages,
            encoder,
            fc,
            output,
            registry: ParamRegistry::new(),
        };
        let params: Vec<Parameter> = model.collect_parameters().into_iter().cloned().collect();
        for p in params {
            model.registry.register(p)?;
        }
        Ok(model)
    }

    fn collect_parameters(&self) -> Vec<&Parameter> {
        let mut p = self.stem.parameters();
        for block in self.stages.iter().flatten() {
            p.extend(block.parameters());
        }
        match &self.encoder {
            Encoder::Gap => {}
            Encoder::Sap(head) => p.extend(head.parameters()),
            Encoder::MlaSap(heads) => heads.iter().for_each(|h| p.extend(h.parameters())),
            Encoder::Mcsae(stages) => stages.iter().for_each(|s| p.extend(s.parameters())),
        }
        for l in self.fc.iter().chain(std::iter::once(&self.output)) {
            p.extend(l.parameters());
        }
        p
    }

    pub fn parameters(&self) -> &ParamRegistry {
        &self.registry
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut b = self.stem.buffers();
        for block in self.stages.iter().flatten() {
            b.extend(block.buffers());
        }
        b
    }

    /// Stacks utterances into a `B×1×D×L` input.
    pub fn input_batch(&self, features: &[&FeatureMatrix]) -> Result<Tensor> {
        let (d, l) = (self.cfg.mel_bins, self.cfg.frames);
        let mut data = Vec::with_capacity(features.len() * d * l);
        for f in features {
            if (f.bins(), f.frames()) != (d, l) {
                return Err(Error::Tensor(mcsae_tensor::TensorError::Dimension {
                    op: "input_batch",
                    msg: format!("features are {}×{}, model expects {d}×{l}", f.bins(), f.frames()),
                }));
            }
            data.extend_from_slice(&f.values);
        }
        if features.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(Tensor::new(&[features.len(), 1, d, l], data)?)
    }

    /// conv-1 then the four residual stages, pooling after each.
    pub fn forward_features(&self, x: &Tensor, mode: Mode) -> Result<Taps> {
        let (d, l) = (self.cfg.mel_bins, self.cfg.frames);
        if x.rank() != 4 || x.shape()[1..] != [1, d, l] {
            return Err(Error::Tensor(mcsae_tensor::TensorError::Dimension {
                op: "forward_features",
                msg: format!("input {:?}, model expects B×1×{d}×{l}", x.shape()),
            }));
        }
        let mut maps = Vec::with_capacity(5);
        let mut h = self.stem.forward(x, mode)?.leaky_relu(self.cfg.slope);
        maps.push(h.clone());
        for stage in &self.stages {
            for block in stage {
                h = residual_block(&h, block, mode)?;
            }
            maps.push(h.clone());
        }
        let pooled = maps.iter().map(|m| m.global_avg_pool()).collect::<mcsae_tensor::Result<Vec<_>>>()?;
        Ok(Taps { maps, pooled })
    }

    pub fn encode<R: Rng + ?Sized>(&self, taps: &Taps, mode: Mode, rng: &mut R) -> Result<Encoded> {
        let plain = |pre_head| Encoded {
            pre_head,
            stages: Vec::new(),
            attention: None,
        };
        match &self.encoder {
            Encoder::Gap => Ok(plain(taps.pooled[4].clone())),
            Encoder::Sap(head) => Ok(plain(head.forward(&frame_sequence(&taps.maps[4])?)?)),
            Encoder::MlaSap(heads) => {
                let pooled = heads
                    .iter()
                    .zip(&taps.maps)
                    .map(|(head, map)| head.forward(&frame_sequence(map)?))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor> = pooled.iter().collect();
                Ok(plain(Tensor::concat(&refs, 1)?))
            }
            Encoder::Mcsae(stages) => {
                let outs = stages
                    .iter()
                    .enumerate()
                    .map(|(i, stage)| stage.forward(&taps.pooled[i], &taps.pooled[i + 1], mode, rng))
                    .collect::<Result<Vec<_>>>()?;
                let segments: Vec<Tensor> = outs.iter().map(|o| o.segment.clone()).collect();
                let attention = build_attention_matrix(&taps.pooled[0], &segments)?;
                let pre_head = concat_embedding(&attention.z, &taps.pooled[4])?;
                Ok(Encoded {
                    pre_head,
                    stages: outs,
                    attention: Some(attention),
                })
            }
        }
    }

    /// fc-1 → LReLU → fc-2 → LReLU → fc-3; the fc-3 output is the embedding.
    pub fn embedding_head(&self, c: &Tensor) -> Result<Tensor> {
        let h = self.fc[0].forward(c)?.leaky_relu(self.cfg.slope);
        let h = self.fc[1].forward(&h)?.leaky_relu(self.cfg.slope);
        self.fc[2].forward(&h)
    }

    pub fn classify(&self, embedding: &Tensor) -> Result<Tensor> {
        self.output.forward(embedding)
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<StageOutputs> {
        let taps = self.forward_features(x, mode)?;
        let encoded = self.encode(&taps, mode, rng)?;
        let embedding = self.embedding_head(&encoded.pre_head)?;
        let logits = self.classify(&embedding)?;
        Ok(StageOutputs {
            taps,
            encoded,
            embedding,
            logits,
        })
    }

    /// Eval-mode speaker embedding of one utterance (no masking, no graph).
    pub fn extract_embedding(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        no_grad(|| {
            let x = self.input_batch(&[features])?;
            let taps = self.forward_features(&x, Mode::Eval)?;
            // Eval mode never draws from the stream.
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let encoded = self.encode(&taps, Mode::Eval, &mut rng)?;
            Ok(self.embedding_head(&encoded.pre_head)?.to_vec())
        })
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut entries: Vec<(String, Tensor)> = self
            .registry
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        entries.extend(self.buffers());
        entries
    }

    /// Text header of `model.*` keys, `END`, then the tensor checkpoint.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = format!("{HEADER_MAGIC}\n");
        for (k, v) in model_config_pairs(&self.cfg) {
            header.push_str(&format!("{k}={v}\n"));
        }
        header.push_str(HEADER_END);
        header.push('\n');
        w.write_all(header.as_bytes()).map_err(mcsae_tensor::TensorError::from)?;
        write_checkpoint(w, &self.named_tensors())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> std::result::Result<Self, String> {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| e.to_string())?;
        if line.trim_end() != HEADER_MAGIC {
            return Err(format!("not a model checkpoint (header {:?})", line.trim_end()));
        }
        let mut header = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
                return Err("header not terminated".into());
            }
            if line.trim_end() == HEADER_END {
                break;
            }
            header.push_str(&line);
        }
        let pairs = parse_pairs(&header).map_err(|e| e.to_string())?;
        let cfg = model_config_from_pairs(&pairs).map_err(|e| e.to_string())?;
        let model = Model::new(cfg, 0).map_err(|e| e.to_string())?;
        let entries = read_checkpoint(r).map_err(|e| e.to_string())?;
        let targets = model.named_tensors();
        if entries.len() != targets.len() {
            return Err(format!("checkpoint holds {} tensors, model needs {}", entries.len(), targets.len()));
        }
        for (name, target) in &targets {
            let Some((_, src)) = entries.iter().find(|(n, _)| n == name) else {
                return Err(format!("missing tensor {name:?}"));
            };
            if src.shape() != target.shape() {
                return Err(format!("tensor {name:?} is {:?}, model needs {:?}", src.shape(), target.shape()));
            }
            target.data_mut().copy_from_slice(&src.data());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).at(path)?);
        self.write_to(&mut w)?;
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).at(path)?);
        Self::read_from(&mut r).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// `B×C×H×W` map → `B×W×C` sequence of channel vectors, averaging frequency.
pub fn frame_sequence(map: &Tensor) -> Result<Tensor> {
    Ok(map.mean_axis(2)?.permute(&[0, 2, 1])?)
}

pub fn model_config_pairs(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    let list = |v: &[usize; 4]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    vec![
        ("model.mode", cfg.mode.to_string()),
        ("model.mel_bins", cfg.mel_bins.to_string()),
        ("model.frames", cfg.frames.to_string()),
        ("model.widths", list(&cfg.widths)),
        ("model.blocks", list(&cfg.blocks)),
        ("model.embedding_dim", cfg.embedding_dim.to_string()),
        ("model.head_hidden", cfg.head_hidden.to_string()),
        ("model.speakers", cfg.speakers.to_string()),
        ("model.slope", format!("{:?}", cfg.slope)),
        ("mask.initial_factor", format!("{:?}", cfg.mask_initial_factor)),
    ]
}

fn model_config_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut run = RunConfig::desk();
    for (k, v) in pairs {
        if !(k.starts_with("model.") || k == "mask.initial_factor") {
            return Err(Error::Config(format!("unexpected key {k:?} in model header")));
        }
        run.set(k, v)?;
    }
    run.model.validate()?;
    Ok(run.model)
}

/// Reads every `.mcf` path into memory; convenience for small corpora.
pub fn load_features(paths: &[impl AsRef<Path>]) -> Result<Vec<FeatureMatrix>> {
    paths.iter().map(|p| FeatureMatrix::load(p.as_ref())).collect()
}
