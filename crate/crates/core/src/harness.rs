//! Run configuration, optimizer, checkpoints, and the train / evaluate /
//! predict loops.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::read_weight_source;
use crate::data::{stack, DatasetDir, Normalization, Sample, SplitManifest};
use crate::decoder::ProbabilityMap;
use crate::encoder::{Branches, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{accumulate, compute_metrics, BinaryMask, ConfusionCounts, MetricsReport};
use crate::model::ChangeDetector;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "TUNET_SEED";
const META_KEY: &str = "tunet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub threshold: f32,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// safetensors file with trunk weights for the shared T1/T2 branch.
    pub pretrained: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data_root: None,
            manifest: None,
            lr: 1e-4,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            threshold: 0.5,
            max_steps: None,
            pretrained: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_size(value: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(['x', 'X', ',']).map(str::trim).collect();
    match parts.as_slice() {
        [s] => {
            let s = parse_value("input_size", s)?;
            Ok((s, s))
        }
        [h, w] => Ok((parse_value("input_size", h)?, parse_value("input_size", w)?)),
        _ => Err(Error::config(format!(
            "`input_size`: cannot parse `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Recognised keys, in the order they are written back out.
    pub const KEYS: [&'static str; 17] = [
        "branches",
        "use_mbsscca",
        "use_decoder_attention",
        "input_size",
        "pretrained_t1t2",
        "width_divisor",
        "data_root",
        "manifest",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "checkpoint_dir",
        "threshold",
        "max_steps",
        "pretrained",
        "variant",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "variant" => {
                let label = value.trim();
                let (_, cfg) = ModelConfig::ablation_grid(m.input_size)
                    .into_iter()
                    .find(|(l, _)| l.eq_ignore_ascii_case(label))
                    .ok_or_else(|| Error::config(format!("unknown variant `{label}`")))?;
                *m = ModelConfig {
                    pretrained_t1t2: m.pretrained_t1t2,
                    width_divisor: m.width_divisor,
                    ..cfg
                };
            }
            "branches" => m.branches = value.parse::<Branches>()?,
            "use_mbsscca" => m.use_mbsscca = parse_value(key, value)?,
            "use_decoder_attention" => m.use_decoder_attention = parse_value(key, value)?,
            "input_size" => m.input_size = parse_size(value)?,
            "pretrained_t1t2" => m.pretrained_t1t2 = parse_value(key, value)?,
            "width_divisor" => m.width_divisor = parse_value(key, value)?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "threshold" => self.threshold = parse_value(key, value)?,
            "max_steps" => self.max_steps = Some(parse_value(key, value)?),
            "pretrained" => self.pretrained = Some(PathBuf::from(value)),
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
        Self::parse(&text)
    }

    /// Applies `TUNET_SEED` if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("branches = {}", m.branches),
            format!("use_mbsscca = {}", m.use_mbsscca),
            format!("use_decoder_attention = {}", m.use_decoder_attention),
            format!("input_size = {}x{}", m.input_size.0, m.input_size.1),
            format!("pretrained_t1t2 = {}", m.pretrained_t1t2),
            format!("width_divisor = {}", m.width_divisor),
        ];
        if let Some(p) = &self.data_root {
            lines.push(format!("data_root = {}", p.display()));
        }
        if let Some(p) = &self.manifest {
            lines.push(format!("manifest = {}", p.display()));
        }
        lines.push(format!("lr = {}", self.lr));
        lines.push(format!("batch_size = {}", self.batch_size));
        lines.push(format!("epochs = {}", self.epochs));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!(
            "checkpoint_dir = {}",
            self.checkpoint_dir.display()
        ));
        lines.push(format!("threshold = {}", self.threshold));
        if let Some(n) = self.max_steps {
            lines.push(format!("max_steps = {n}"));
        }
        if let Some(p) = &self.pretrained {
            lines.push(format!("pretrained = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.model.pretrained_t1t2 && self.pretrained.is_none() {
            return Err(Error::config(
                "pretrained_t1t2 is set but no `pretrained` file is given",
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction, no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable tensor that received a gradient.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &candle_core::backprop::GradStore,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let update = ((&m / c1)?.div(&denom)? * self.lr)?;
            var.set(&var.as_tensor().sub(&update)?.detach())?;
            self.m.insert(name.to_string(), m.detach());
            self.v.insert(name.to_string(), v.detach());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub run: RunConfig,
    pub epoch: usize,
    pub step: usize,
    pub adam_step: u64,
    pub rng: RngState,
    pub best_val_f1: Option<f64>,
}

/// Named-tensor archive: model tensors under their canonical names, Adam
/// moments under `adam.m.*` / `adam.v.*`, metadata in the file header.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::config(e.to_string()))?;
        let header = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::serialize_to_file(self.tensors.iter(), Some(header), path)
            .map_err(|e| Error::ingest(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::ingest(path, e))?;
        let meta = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::ingest(path, "not a tunet checkpoint (no metadata)"))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta).map_err(|e| Error::ingest(path, e))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::ingest(
                path,
                format!("unsupported checkpoint version {}", meta.format_version),
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the model and copies every stored tensor into it.
    pub fn to_model(&self) -> Result<ChangeDetector> {
        let dtype = self
            .tensors
            .iter()
            .find(|(k, _)| !k.starts_with("adam."))
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let mut cfg = self.meta.model;
        // weights come from the archive, not from the pretrained file
        cfg.pretrained_t1t2 = false;
        let model = ChangeDetector::new(cfg, self.meta.run.seed, dtype, &Device::Cpu)?;
        for (name, _) in model.params().all() {
            let t = self.tensors.get(name).ok_or_else(|| Error::Load {
                name: name.to_string(),
                reason: "missing from checkpoint".into(),
            })?;
            model.params().set(name, t)?;
        }
        Ok(model)
    }
}

/// Anything that can hand out samples by index.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// One manifest split read lazily from disk.
pub struct DiskSplit {
    pub dir: DatasetDir,
    pub ids: Vec<String>,
    pub norm: Normalization,
}

impl DiskSplit {
    pub fn open(root: &Path, manifest: &SplitManifest, split: &str) -> Self {
        Self {
            dir: DatasetDir::new(root),
            ids: manifest.split(split).to_vec(),
            norm: Normalization::IMAGENET,
        }
    }
}

impl SampleSource for DiskSplit {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.dir.load_sample(&self.ids[index], &self.norm)
    }
}

/// Loss components logged after each optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs_completed: usize,
    pub best_val_f1: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    pub run: RunConfig,
    model: ChangeDetector,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
    best_val_f1: Option<f64>,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        Self::with_dtype(run, DType::F32)
    }

    pub fn with_dtype(run: RunConfig, dtype: DType) -> Result<Self> {
        run.validate()?;
        let model = ChangeDetector::new(run.model, run.seed, dtype, &Device::Cpu)?;
        if run.model.pretrained_t1t2 {
            if let Some(p) = &run.pretrained {
                model.load_pretrained_t1t2(&read_weight_source(p)?)?;
            }
        }
        Ok(Self {
            adam: Adam::new(run.lr),
            rng: ChaCha8Rng::seed_from_u64(run.seed),
            model,
            run,
            epoch: 0,
            step: 0,
            best_val_f1: None,
        })
    }

    /// Resumes from a checkpoint: weights, optimizer moments, counters and
    /// the shuffling RNG.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let mut adam = Adam::new(ck.meta.run.lr);
        adam.step = ck.meta.adam_step;
        for (name, t) in &ck.tensors {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam.v.insert(n.to_string(), t.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ck.meta.rng.seed);
        let pos: u128 = ck
            .meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::config("checkpoint RNG position is not an integer"))?;
        rng.set_word_pos(pos);
        Ok(Self {
            run: ck.meta.run.clone(),
            model,
            adam,
            rng,
            epoch: ck.meta.epoch,
            step: ck.meta.step,
            best_val_f1: ck.meta.best_val_f1,
        })
    }

    pub fn model(&self) -> &ChangeDetector {
        &self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.model.params().snapshot()?;
        for (name, t) in &self.adam.m {
            tensors.insert(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam.v {
            tensors.insert(format!("adam.v.{name}"), t.clone());
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                model: *self.model.config(),
                run: self.run.clone(),
                epoch: self.epoch,
                step: self.step,
                adam_step: self.adam.step,
                rng: RngState {
                    seed: self.run.seed,
                    word_pos: self.rng.get_word_pos().to_string(),
                },
                best_val_f1: self.best_val_f1,
            },
            tensors,
        })
    }

    /// Forward, joint loss, backward, Adam update.
    pub fn train_step(&mut self, x1: &Tensor, x2: &Tensor, y: &Tensor) -> Result<StepRecord> {
        let logits = self.model.forward_logits(x1, x2, true)?;
        let loss = total_loss(&logits, &y.to_dtype(self.model.dtype())?)?;
        let (total, bce, dice) = loss.scalars()?;
        self.step += 1;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let grads = loss.total.backward()?;
        self.adam.step(self.model.params(), &grads)?;
        Ok(StepRecord {
            epoch: self.epoch + 1,
            step: self.step,
            total,
            bce,
            dice,
        })
    }

    fn budget_left(&self) -> bool {
        self.run.max_steps.is_none_or(|n| self.step < n)
    }

    /// One shuffled pass over `train`; stops early at `max_steps`.
    pub fn run_epoch(
        &mut self,
        train: &dyn SampleSource,
        log: &mut dyn FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::config("the training split is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::new();
        for chunk in order.chunks(self.run.batch_size) {
            if !self.budget_left() {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&i| train.sample(i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (x1, x2, y) = stack(&refs)?;
            let rec = self.train_step(&x1, &x2, &y)?;
            log(&rec);
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Trains until the epoch cap or step budget, checkpointing each epoch
    /// and the best validation F1 when `checkpoint_dir` is writable.
    pub fn fit(
        &mut self,
        train: &dyn SampleSource,
        val: Option<&dyn SampleSource>,
        save: bool,
        log: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while self.epoch < self.run.epochs && self.budget_left() {
            report.steps.extend(self.run_epoch(train, log)?);
            report.epochs_completed += 1;
            let mut improved = false;
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let m = evaluate(&self.model, val, self.run.threshold, self.run.batch_size)?;
                log::info!("epoch {} val F1 {:.2}", self.epoch, m.f1);
                if self.best_val_f1.is_none_or(|b| m.f1 > b) {
                    self.best_val_f1 = Some(m.f1);
                    improved = true;
                }
            }
            if save {
                let ck = self.checkpoint()?;
                let path = self
                    .run
                    .checkpoint_dir
                    .join(format!("epoch_{:04}.safetensors", self.epoch));
                ck.save(&path)?;
                report.last_checkpoint = Some(path);
                if improved {
                    let best = self.run.checkpoint_dir.join("best.safetensors");
                    ck.save(&best)?;
                    report.best_checkpoint = Some(best);
                }
            }
        }
        report.best_val_f1 = self.best_val_f1;
        Ok(report)
    }
}

/// Full training run from `RunConfig`: reads the manifest, trains on the
/// `train` split, validates on `val`, writes checkpoints and a JSON-lines
/// step log (`steps.jsonl`) into the checkpoint directory.
pub fn train(cfg: &RunConfig) -> Result<TrainReport> {
    let root = cfg
        .data_root
        .as_deref()
        .ok_or_else(|| Error::config("`data_root` is required for training"))?;
    let manifest_path = cfg
        .manifest
        .clone()
        .unwrap_or_else(|| root.join("manifest.tsv"));
    let manifest = SplitManifest::load(&manifest_path)?;
    let train_split = DiskSplit::open(root, &manifest, "train");
    let val_split = DiskSplit::open(root, &manifest, "val");
    if train_split.is_empty() {
        return Err(Error::config("the training split is empty"));
    }
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut step_log = std::fs::File::create(cfg.checkpoint_dir.join("steps.jsonl"))?;
    let mut write_err = None;
    let mut trainer = Trainer::new(cfg.clone())?;
    let report = trainer.fit(&train_split, Some(&val_split), true, &mut |rec| {
        let line = serde_json::to_string(rec).expect("step record serializes");
        if let Err(e) = writeln!(step_log, "{line}") {
            write_err.get_or_insert(e);
        }
        log::info!(
            "step {} loss {:.5} (bce {:.5}, dice {:.5})",
            rec.step,
            rec.total,
            rec.bce,
            rec.dice
        );
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    Ok(report)
}

/// Confusion counts over a split, thresholding with `p > threshold`.
pub fn confusion_over(
    model: &ChangeDetector,
    split: &dyn SampleSource,
    threshold: f32,
    batch_size: usize,
) -> Result<ConfusionCounts> {
    if split.is_empty() {
        return Err(Error::config("the evaluation split is empty"));
    }
    let (h, w) = model.config().input_size;
    let mut acc = ConfusionCounts::default();
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|&i| split.sample(i))
            .collect::<Result<Vec<_>>>()?;
        for s in &samples {
            if s.x1.dims()[1..] != [h, w] {
                return Err(Error::invalid(format!(
                    "sample `{}` is {:?} but the model was configured for {h}x{w}",
                    s.id,
                    &s.x1.dims()[1..]
                )));
            }
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let (x1, x2, y) = stack(&refs)?;
        let probs = model.predict_proba(&x1, &x2)?;
        let p = probs
            .tensor()
            .to_dtype(DType::F32)?
            .flatten_from(1)?
            .to_vec2::<f32>()?;
        let t = y.flatten_from(1)?.to_vec2::<f32>()?;
        for (p, t) in p.iter().zip(&t) {
            let pred = BinaryMask::from_scores(w, h, p, threshold)?;
            let truth = BinaryMask::from_scores(w, h, t, 0.5)?;
            acc = accumulate(&pred, &truth, acc)?;
        }
    }
    Ok(acc)
}

pub fn evaluate(
    model: &ChangeDetector,
    split: &dyn SampleSource,
    threshold: f32,
    batch_size: usize,
) -> Result<MetricsReport> {
    compute_metrics(&confusion_over(model, split, threshold, batch_size)?)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probabilities: ProbabilityMap,
    pub mask: BinaryMask,
}

impl Prediction {
    pub fn probability_values(&self) -> Result<Vec<f32>> {
        Ok(self
            .probabilities
            .tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }
}

/// Change map for one normalized pair of shape `(3, h, w)`.
pub fn predict(
    model: &ChangeDetector,
    image_a: &Tensor,
    image_b: &Tensor,
    threshold: f32,
) -> Result<Prediction> {
    if image_a.dims() != image_b.dims() {
        return Err(Error::invalid(format!(
            "image A is {:?} but image B is {:?}",
            image_a.dims(),
            image_b.dims()
        )));
    }
    let &[c, h, w] = image_a.dims() else {
        return Err(Error::shape(format!(
            "expected a (3, h, w) image, got {:?}",
            image_a.dims()
        )));
    };
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::invalid(format!(
            "image size {h}x{w} is not divisible by 16; tile the images first (e.g. `tunet prepare`)"
        )));
    }
    let probabilities = model.predict_proba(&image_a.unsqueeze(0)?, &image_b.unsqueeze(0)?)?;
    let values = probabilities
        .tensor()
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mask = BinaryMask::from_scores(w, h, &values, threshold)?;
    Ok(Prediction {
        probabilities,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = RunConfig::parse(
            "# comment\nlr = 0.001\nbatch_size=4\ninput_size = 64x32\nvariant = Siamese/4\n",
        )
        .unwrap();
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.threshold, 0.5);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.model.input_size, (64, 32));
        assert_eq!(cfg.model.branches, Branches::Siamese);
        assert!(cfg.model.use_decoder_attention);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::default().lr, 1e-4);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("threshold = 1.0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("lr = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("input_size = 50"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut init = crate::params::ParamInit::new(0, DType::F64, &Device::Cpu);
        let w = init.ones("w", &[3]).unwrap();
        let store = init.finish();
        let g = Tensor::new(&[2.0f64, -0.5, 0.0], &Device::Cpu).unwrap();
        let loss = w.as_tensor().mul(&g).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&store, &grads).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
        assert_eq!(v[2], 1.0);
    }
}
