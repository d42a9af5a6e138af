//! Desk-scale training: corpora, batches, the optimization step,
//! checkpoints and the loss log.

mod adam;
mod data;

pub use adam::{Adam, AdamConfig};
pub use data::{prepare_batch, step_rng, Batch, BatchSpec, BatchStream, Corpus};

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::codec::{CodecProfile, Encoder, ProfileName};
use crate::error::{Error, Result};
use crate::losses::{
    HistogramGeometry, LossConfig, LossEvaluator, LossInputs, SelfSimilarityNorm, StageSchedule, StageValues,
};
use crate::model::PamaModel;
use crate::params::ParamStore;

/// Mixed into the seed for the loss subsampling generator so it never
/// shares a stream with batch preparation.
const LOSS_SEED_SALT: u64 = 0x5EED_1055;
/// Consecutive non-finite steps tolerated before training stops.
const MAX_NON_FINITE: usize = 3;

pub const LOG_FILE: &str = "losses.csv";
pub const LATEST_CHECKPOINT: &str = "latest.pama";

fn default_profile() -> ProfileName {
    ProfileName::Tiny
}
fn default_stages() -> usize {
    3
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_steps() -> u64 {
    2000
}
fn default_checkpoint_every() -> u64 {
    500
}
fn default_batch_size() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_resize() -> usize {
    512
}
fn default_crop() -> usize {
    256
}
fn default_rec_pixel() -> f64 {
    50.0
}
fn default_hist_bins() -> usize {
    HistogramGeometry::default().bins
}
fn default_hist_falloff() -> f64 {
    HistogramGeometry::default().falloff
}
fn default_subsample_limit() -> usize {
    1024
}
fn default_prefetch() -> usize {
    2
}

/// Training configuration, read from a flat TOML table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_profile")]
    pub profile: ProfileName,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    /// Checkpoint period in steps; `0` saves only at the end.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Short edge after resizing, before cropping.
    #[serde(default = "default_resize")]
    pub resize: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lambda_ss: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_r: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_m: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_h: Option<Vec<f64>>,
    #[serde(default = "default_rec_pixel")]
    pub lambda_rec_pixel: f64,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    #[serde(default = "default_hist_falloff")]
    pub hist_falloff: f64,
    #[serde(default = "default_subsample_limit")]
    pub subsample_limit: usize,
    #[serde(default)]
    pub self_similarity_norm: SelfSimilarityNorm,
    /// Batches prepared ahead of the optimizer.
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
    /// Checkpoint to copy `encoder.*` weights from, e.g. converted VGG19.
    #[serde(default)]
    pub encoder_weights: Option<PathBuf>,
}

impl TrainConfig {
    /// Config with every default and the two required corpus paths.
    pub fn new(content_dir: impl Into<PathBuf>, style_dir: impl Into<PathBuf>) -> Self {
        let mut table = toml::Table::new();
        table.insert("content_dir".into(), content_dir.into().to_string_lossy().into_owned().into());
        table.insert("style_dir".into(), style_dir.into().to_string_lossy().into_owned().into());
        table.try_into().expect("defaults deserialize")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.content_dir, &mut config.style_dir, &mut config.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = config.encoder_weights.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.crop < 32 {
            return bad("crop", "must be at least 32 (relu5_1 needs 2x2 positions)");
        }
        if self.resize < self.crop {
            return bad("resize", "must be at least crop");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if self.subsample_limit < 2 {
            return bad("subsample_limit", "must be at least 2");
        }
        self.loss_config()?;
        Ok(())
    }

    pub fn codec_profile(&self) -> CodecProfile {
        CodecProfile::named(self.profile)
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        let mut s = StageSchedule::with_stages(self.stages).map_err(|_| {
            Error::Config(format!("stages: must be 1, 2 or 3, got {}", self.stages))
        })?;
        for (given, slot) in [
            (&self.lambda_ss, &mut s.lambda_ss),
            (&self.lambda_r, &mut s.lambda_r),
            (&self.lambda_m, &mut s.lambda_m),
            (&self.lambda_h, &mut s.lambda_h),
        ] {
            if let Some(v) = given {
                *slot = v.clone();
            }
        }
        s.lambda_rec_pixel = self.lambda_rec_pixel;
        if s.stages() != self.stages {
            return Err(Error::Config(format!(
                "lambda_ss: {} entries for {} stages",
                s.stages(),
                self.stages
            )));
        }
        s.validate()?;
        Ok(s)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let histogram = HistogramGeometry {
            bins: self.hist_bins,
            falloff: self.hist_falloff,
            ..Default::default()
        };
        histogram.validate()?;
        Ok(LossConfig {
            schedule: self.schedule()?,
            histogram,
            subsample_limit: self.subsample_limit,
            self_similarity_norm: self.self_similarity_norm,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            resize: self.resize,
            crop: self.crop,
            seed: self.seed,
        }
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub profile: ProfileName,
    pub stages: usize,
    pub params: ParamStore,
    pub adam: Adam,
}

const PARAM_PREFIX: &str = "param/";
const FIRST_PREFIX: &str = "adam.m/";
const SECOND_PREFIX: &str = "adam.v/";

impl TrainState {
    /// Fresh parameters drawn from the config seed.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let mut params = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        PamaModel::init(config.codec_profile(), config.stages, &mut params, &mut rng)?;
        if let Some(path) = &config.encoder_weights {
            let ck = Checkpoint::load(path)?;
            ck.expect_profile(config.profile)?;
            let names: Vec<String> = params.names().filter(|n| n.starts_with("encoder.")).map(String::from).collect();
            for name in names {
                let key = if ck.tensors.contains_key(&name) { name.clone() } else { format!("{PARAM_PREFIX}{name}") };
                params.set(&name, ck.get(&key)?)?;
            }
        }
        Ok(Self {
            step: 0,
            profile: config.profile,
            stages: config.stages,
            params,
            adam: Adam::new(config.adam()),
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(self.profile, self.stages);
        meta.step = self.step;
        meta.config = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
        let mut ck = Checkpoint::new(meta);
        for (name, var) in self.params.iter() {
            ck.tensors.insert(format!("{PARAM_PREFIX}{name}"), var.as_tensor().copy()?);
        }
        for (name, t) in &self.adam.first {
            ck.tensors.insert(format!("{FIRST_PREFIX}{name}"), t.clone());
        }
        for (name, t) in &self.adam.second {
            ck.tensors.insert(format!("{SECOND_PREFIX}{name}"), t.clone());
        }
        ck.tensors.insert(
            "adam.updates".into(),
            Tensor::new(&[self.adam.updates as f64], &candle_core::Device::Cpu)?,
        );
        Ok(ck)
    }

    /// Restores a state, checking it against the run's profile and stage
    /// count. Optimizer hyperparameters come from `config`.
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        ck.expect_profile(config.profile)?;
        if ck.meta.stages != config.stages {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} stages, run uses {}",
                ck.meta.stages, config.stages
            )));
        }
        let mut params = ParamStore::new(DType::F32);
        let mut adam = Adam::new(config.adam());
        for (key, t) in &ck.tensors {
            if let Some(name) = key.strip_prefix(PARAM_PREFIX) {
                params.insert(name, t)?;
            } else if let Some(name) = key.strip_prefix(FIRST_PREFIX) {
                adam.first.insert(name.to_string(), t.to_dtype(DType::F32)?);
            } else if let Some(name) = key.strip_prefix(SECOND_PREFIX) {
                adam.second.insert(name.to_string(), t.to_dtype(DType::F32)?);
            }
        }
        adam.updates = ck.get("adam.updates")?.to_vec1::<f64>()?[0] as u64;
        PamaModel::from_store(config.codec_profile(), config.stages, &params)
            .map_err(|e| Error::Incompatible(format!("parameters do not fit the {} profile: {e}", config.profile)))?;
        adam.validate(&params)?;
        Ok(Self {
            step: ck.meta.step,
            profile: config.profile,
            stages: config.stages,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        self.to_checkpoint(config)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }
}

/// Builds an inference model from a training checkpoint (or a bare
/// parameter checkpoint).
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ParamStore, PamaModel)> {
    let mut params = ParamStore::new(DType::F32);
    for (key, t) in &ck.tensors {
        let name = key.strip_prefix(PARAM_PREFIX).unwrap_or(key);
        if !key.starts_with("adam.") {
            params.insert(name, t)?;
        }
    }
    let profile = CodecProfile::named(ck.meta.profile);
    let model = PamaModel::from_store(profile, ck.meta.stages, &params)
        .map_err(|e| Error::Incompatible(format!("checkpoint parameters do not match its metadata: {e}")))?;
    Ok((params, model))
}

/// Loss values of one completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub stages: Vec<StageValues>,
    /// Weighted total of each stage.
    pub stage_totals: Vec<f64>,
    pub reconstruction: f64,
    pub total: f64,
}

impl StepReport {
    pub fn csv_header(stages: usize) -> String {
        let mut cols = vec!["step".to_string()];
        for term in ["ss", "r", "m", "h"] {
            cols.extend((1..=stages).map(|i| format!("l_{term}_{i}")));
        }
        cols.push("l_rec".into());
        cols.push("total".into());
        cols.join(",")
    }

    fn columns(&self) -> Vec<(String, f64)> {
        let mut cols = Vec::new();
        for (term, get) in [
            ("ss", (|v: &StageValues| v.ss) as fn(&StageValues) -> f64),
            ("r", |v| v.r),
            ("m", |v| v.m),
            ("h", |v| v.h),
        ] {
            for (i, v) in self.stages.iter().enumerate() {
                cols.push((format!("l_{term}_{}", i + 1), get(v)));
            }
        }
        cols.push(("l_rec".into(), self.reconstruction));
        cols.push(("total".into(), self.total));
        cols
    }

    pub fn csv_row(&self) -> String {
        let mut out = self.step.to_string();
        for (_, v) in self.columns() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out
    }

    /// Name of the first non-finite term, in log column order.
    pub fn first_non_finite(&self) -> Option<String> {
        self.columns().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}

/// A training state bound to its model and loss configuration.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    model: PamaModel,
    /// The model's encoder with weights held constant inside the losses.
    loss_network: Encoder,
    losses: LossConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        let model = PamaModel::from_store(config.codec_profile(), config.stages, &state.params)?;
        let losses = config.loss_config()?;
        Ok(Self {
            config,
            state,
            loss_network: model.encoder().detached(),
            model,
            losses,
        })
    }

    pub fn model(&self) -> &PamaModel {
        &self.model
    }

    /// The full profile keeps its encoder fixed; the tiny profile trains
    /// it with everything else.
    pub fn is_trainable(profile: ProfileName, name: &str) -> bool {
        profile == ProfileName::Tiny || !name.starts_with("encoder.")
    }

    /// Forward, loss, backward and one optimizer update. On a non-finite
    /// loss or gradient nothing is updated and the offending term is
    /// named in the error.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let evaluator = LossEvaluator::new(&self.loss_network, &self.losses);
        let forward = self.model.forward_train(&batch.content, &batch.style, &mut Vec::new())?;
        let content = evaluator.reference(&batch.content)?;
        let style = evaluator.reference(&batch.style)?;
        let inputs = LossInputs {
            stage_images: &forward.stage_images,
            content: &content,
            style: &style,
            rec_content: &forward.rec_content,
            rec_style: &forward.rec_style,
        };
        let mut rng = step_rng(self.config.seed ^ LOSS_SEED_SALT, batch.step);
        let out = evaluator.total_loss(&inputs, Some(&mut rng))?;
        let report = StepReport {
            step: batch.step,
            stages: out.stages,
            stage_totals: out.stage_totals,
            reconstruction: out.reconstruction,
            total: crate::losses::scalar(&out.total)?,
        };
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite { term });
        }
        let grads = out.total.backward()?;
        let profile = self.state.profile;
        for (name, var) in self.state.params.iter().filter(|(n, _)| Self::is_trainable(profile, n)) {
            if let Some(g) = grads.get(var.as_tensor()) {
                let s = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !s.is_finite() {
                    return Err(Error::NonFinite {
                        term: format!("gradient of {name}"),
                    });
                }
            }
        }
        self.state
            .adam
            .step(&self.state.params, &grads, |n| Self::is_trainable(profile, n))?;
        self.state.step = batch.step;
        Ok(report)
    }
}

/// Where a run left its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_step: u64,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<StepReport>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step-{step:06}.pama"))
}

fn save_checkpoint(state: &TrainState, config: &TrainConfig, saved: &mut Vec<PathBuf>) -> Result<()> {
    let ck = state.to_checkpoint(config)?;
    let path = checkpoint_path(&config.out_dir, state.step);
    ck.save(&path)?;
    ck.save(config.out_dir.join(LATEST_CHECKPOINT))?;
    log::info!("saved {}", path.display());
    saved.push(path);
    Ok(())
}

/// Opens the loss log for appending. A fresh run starts a new file; a
/// resumed run drops rows past the resumed step so the log matches an
/// uninterrupted run.
fn open_log(path: &Path, stages: usize, resumed_at: Option<u64>) -> Result<File> {
    let header = StepReport::csv_header(stages);
    let mut kept = vec![header.clone()];
    if let (Some(step), true) = (resumed_at, path.exists()) {
        let reader = BufReader::new(File::open(path)?);
        for line in reader.lines().skip(1) {
            let line = line?;
            let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if row_step.is_some_and(|s| s <= step) {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path)?;
    for line in &kept {
        writeln!(f, "{line}")?;
    }
    drop(f);
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Runs training to `config.steps`, starting fresh or from `resume`.
pub fn run(config: &TrainConfig, resume: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let content = Arc::new(Corpus::discover(&config.content_dir)?);
    let style = Arc::new(Corpus::discover(&config.style_dir)?);
    std::fs::create_dir_all(&config.out_dir)?;
    let state = match resume {
        Some(path) => TrainState::load(path, config)?,
        None => TrainState::init(config)?,
    };
    let start = state.step;
    let log_path = config.out_dir.join(LOG_FILE);
    let mut log = open_log(&log_path, config.stages, resume.map(|_| start))?;
    let mut trainer = Trainer::new(config.clone(), state)?;
    let mut saved = Vec::new();
    if resume.is_none() {
        save_checkpoint(&trainer.state, config, &mut saved)?;
    }
    let mut reports = Vec::new();
    let mut failures = 0;
    if start < config.steps {
        let stream = BatchStream::spawn(
            content,
            style,
            config.batch_spec(),
            start + 1..config.steps + 1,
            config.prefetch,
        );
        for batch in stream {
            let batch = batch?;
            match trainer.train_step(&batch) {
                Ok(report) => {
                    failures = 0;
                    writeln!(log, "{}", report.csv_row())?;
                    log::debug!("step {} total {}", report.step, report.total);
                    reports.push(report);
                }
                Err(Error::NonFinite { term }) => {
                    failures += 1;
                    log::warn!("step {}: non-finite {term}, step skipped", batch.step);
                    trainer.state.step = batch.step;
                    if failures >= MAX_NON_FINITE {
                        return Err(Error::NonFinite {
                            term: format!("{term} ({MAX_NON_FINITE} consecutive steps)"),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
            let step = trainer.state.step;
            let periodic = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
            if periodic || step == config.steps {
                save_checkpoint(&trainer.state, config, &mut saved)?;
            }
        }
    }
    log.flush()?;
    Ok(RunOutcome {
        final_step: trainer.state.step,
        log: log_path,
        checkpoints: saved,
        reports,
    })
}
