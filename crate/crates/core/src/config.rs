//! Model, schedule, and run configuration.
//!
//! Every field can be set from a flat `key = value` text file. `preset`
//! selects the base values (`paper` mirrors the published hyperparameter
//! table, `desk` is the small configuration used by tests and smoke runs);
//! later keys override it.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use lamae_tensor::DType;

use crate::error::{LamaeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ImageMae,
    VideoMae,
    Lamae,
    VideoLamae,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ImageMae,
        Variant::VideoMae,
        Variant::Lamae,
        Variant::VideoLamae,
    ];

    pub fn is_video(self) -> bool {
        matches!(self, Variant::VideoMae | Variant::VideoLamae)
    }

    pub fn has_latent_attention(self) -> bool {
        matches!(self, Variant::Lamae | Variant::VideoLamae)
    }

    /// The architecture this one reduces to without the latent module.
    pub fn baseline(self) -> Variant {
        match self {
            Variant::Lamae | Variant::ImageMae => Variant::ImageMae,
            Variant::VideoLamae | Variant::VideoMae => Variant::VideoMae,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ImageMae => "image_mae",
            Variant::VideoMae => "video_mae",
            Variant::Lamae => "lamae",
            Variant::VideoLamae => "video_lamae",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::ImageMae => "Image-MAE",
            Variant::VideoMae => "VideoMAE",
            Variant::Lamae => "LAMAE",
            Variant::VideoLamae => "Video-LAMAE",
        }
    }
}

impl FromStr for Variant {
    type Err = LamaeError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LamaeError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    /// Sum over masked patches scaled by `1 / (alpha_e |V| |F|)`.
    PaperLiteral,
    /// `PaperLiteral` further divided by the tokens per frame.
    MeanMasked,
}

impl LossNorm {
    pub fn name(self) -> &'static str {
        match self {
            LossNorm::PaperLiteral => "paper_literal",
            LossNorm::MeanMasked => "mean_masked",
        }
    }
}

impl FromStr for LossNorm {
    type Err = LamaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(LossNorm::PaperLiteral),
            "mean_masked" => Ok(LossNorm::MeanMasked),
            _ => Err(LamaeError::Config(format!("unknown loss_norm {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Multilabel,
    Regression,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Multilabel => "multilabel",
            Task::Regression => "regression",
        }
    }
}

impl FromStr for Task {
    type Err = LamaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel" => Ok(Task::Multilabel),
            "regression" => Ok(Task::Regression),
            _ => Err(LamaeError::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    FinetuneFull,
    FinetuneFrozen,
    Eval,
    Generate,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::FinetuneFull => "finetune_full",
            Mode::FinetuneFrozen => "finetune_frozen",
            Mode::Eval => "eval",
            Mode::Generate => "generate",
        }
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, Mode::FinetuneFull | Mode::FinetuneFrozen)
    }
}

impl FromStr for Mode {
    type Err = LamaeError;
    fn from_str(s: &str) -> Result<Self> {
        [
            Mode::Pretrain,
            Mode::FinetuneFull,
            Mode::FinetuneFrozen,
            Mode::Eval,
            Mode::Generate,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| LamaeError::Config(format!("unknown mode {s:?}")))
    }
}

/// Pixel geometry of frames and patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Frames per spatiotemporal tube. Image variants always use 1.
    pub time_patch: usize,
}

impl PatchGrid {
    pub fn side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.side() * self.side()
    }

    /// Pixels in one spatial patch (all channels).
    pub fn patch_pixels(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn frame_pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(LamaeError::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.channels == 0 || self.time_patch == 0 {
            return Err(LamaeError::Config("channels and time_patch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub qkv_bias: bool,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(LamaeError::Config(format!(
                "{what}: embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(LamaeError::Config(format!(
                "{what}: embed dim {} must be even for sinusoidal positions",
                self.embed_dim
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(LamaeError::Config(format!("{what}: mlp_ratio must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub grid: PatchGrid,
    pub encoder: BlockConfig,
    pub decoder: BlockConfig,
    /// Latent attention stack; its width always equals the encoder's.
    pub latent: BlockConfig,
    pub alpha_e: f64,
    pub alpha_la: f64,
    pub loss_norm: LossNorm,
    pub pixel_norm: bool,
    pub views_per_study: usize,
    pub frames_per_view: usize,
    pub frame_window: usize,
    /// Learned view/frame slot embeddings added before the latent stack.
    pub identity_embeddings: bool,
    /// Standard deviation of the view/frame identity embedding init.
    pub identity_init_std: f64,
    pub num_labels: usize,
    /// Hidden width of the pooled-token head; 0 means the encoder width.
    pub head_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Regression targets are fit as `(y - offset) / scale`.
    pub regression_offset: f64,
    pub regression_scale: f64,
}

impl ModelConfig {
    /// Published hyperparameters for `variant`.
    pub fn paper(variant: Variant) -> Self {
        let block = |dim, layers, heads| BlockConfig {
            embed_dim: dim,
            num_layers: layers,
            num_heads: heads,
            mlp_ratio: 4,
            qkv_bias: true,
        };
        Self {
            variant,
            grid: PatchGrid {
                image_size: 224,
                patch_size: 14,
                channels: 1,
                time_patch: 1,
            },
            encoder: block(768, 12, 12),
            decoder: block(192, 4, 3),
            latent: block(768, 3, 12),
            alpha_e: 0.875,
            alpha_la: 0.25,
            loss_norm: LossNorm::MeanMasked,
            pixel_norm: false,
            views_per_study: 8,
            frames_per_view: 8,
            frame_window: 32,
            identity_embeddings: true,
            identity_init_std: 0.02,
            num_labels: 40,
            head_hidden: 0,
            dropout: 0.0,
            ln_eps: 1e-6,
            regression_offset: 50.0,
            regression_scale: 10.0,
        }
        .normalized()
    }

    /// Small configuration: 2 views x 2 frames of 28x28 pixels, patch 7.
    pub fn desk(variant: Variant) -> Self {
        let block = |dim, layers, heads| BlockConfig {
            embed_dim: dim,
            num_layers: layers,
            num_heads: heads,
            mlp_ratio: 4,
            qkv_bias: true,
        };
        Self {
            grid: PatchGrid {
                image_size: 28,
                patch_size: 7,
                channels: 1,
                time_patch: 1,
            },
            encoder: block(16, 2, 2),
            decoder: block(8, 1, 2),
            latent: block(16, 1, 2),
            alpha_e: 0.75,
            views_per_study: 2,
            frames_per_view: 2,
            frame_window: 8,
            num_labels: 4,
            identity_init_std: 1.0,
            ..Self::paper(variant)
        }
        .normalized()
    }

    /// Applies the constraints implied by the variant: baselines have no
    /// latent stack, no latent masking, and no slot embeddings; image variants
    /// use single-frame tubes.
    pub fn normalized(mut self) -> Self {
        self.latent.embed_dim = self.encoder.embed_dim;
        if !self.variant.has_latent_attention() {
            self.latent.num_layers = 0;
            self.alpha_la = 0.0;
            self.identity_embeddings = false;
        }
        if !self.variant.is_video() {
            self.grid.time_patch = 1;
        }
        self
    }

    pub fn head_hidden_dim(&self) -> usize {
        if self.head_hidden == 0 {
            self.encoder.embed_dim
        } else {
            self.head_hidden
        }
    }

    /// Token positions (time slots) per view in the encoder input.
    pub fn time_slots(&self) -> usize {
        if self.variant.is_video() {
            self.frames_per_view / self.grid.time_patch
        } else {
            self.frames_per_view
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoder.validate("encoder")?;
        self.decoder.validate("decoder")?;
        if self.variant.has_latent_attention() {
            self.latent.validate("latent")?;
        }
        if !(self.alpha_e > 0.0 && self.alpha_e < 1.0) {
            return Err(LamaeError::Config(format!("alpha_e {} outside (0, 1)", self.alpha_e)));
        }
        if !(0.0..1.0).contains(&self.alpha_la) {
            return Err(LamaeError::Config(format!("alpha_la {} outside [0, 1)", self.alpha_la)));
        }
        if self.views_per_study == 0 || self.frames_per_view == 0 {
            return Err(LamaeError::Config("views and frames per study must be positive".into()));
        }
        if self.variant.is_video() && !self.frames_per_view.is_multiple_of(self.grid.time_patch) {
            return Err(LamaeError::Config(format!(
                "time_patch {} does not divide {} frames",
                self.grid.time_patch, self.frames_per_view
            )));
        }
        if self.frame_window == 0 {
            return Err(LamaeError::Config("frame_window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LamaeError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.identity_init_std >= 0.0 && self.identity_init_std.is_finite()) {
            return Err(LamaeError::Config(
                "identity_init_std must be finite and non-negative".into(),
            ));
        }
        if self.regression_scale <= 0.0 {
            return Err(LamaeError::Config("regression_scale must be positive".into()));
        }
        if self.num_labels == 0 {
            return Err(LamaeError::Config("num_labels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub warmup_start_factor: f64,
    pub total_epochs: f64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Published schedule constants; the epoch budget has to be chosen.
    pub fn paper(total_epochs: f64) -> Self {
        Self {
            base_lr: 1e-4,
            warmup_epochs: 10.0,
            warmup_start_factor: 0.5,
            total_epochs,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(LamaeError::Config(format!(
                "warmup_start_factor {} outside (0, 1]",
                self.warmup_start_factor
            )));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(LamaeError::Config(format!(
                "warmup_epochs {} must be below total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.base_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(LamaeError::Config("need 0 <= min_lr <= base_lr, base_lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSet {
    /// Four predicates, each readable from a single view.
    Separable,
    /// One predicate comparing the two first views of a study.
    CrossView,
}

impl LabelSet {
    pub fn name(self) -> &'static str {
        match self {
            LabelSet::Separable => "separable",
            LabelSet::CrossView => "cross_view",
        }
    }
}

impl FromStr for LabelSet {
    type Err = LamaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(LabelSet::Separable),
            "cross_view" => Ok(LabelSet::CrossView),
            _ => Err(LamaeError::Config(format!("unknown label set {s:?}"))),
        }
    }
}

/// Synthetic study generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub studies: usize,
    pub views: usize,
    pub frames: usize,
    pub image_size: usize,
    /// Frames per beat cycle.
    pub cycle_frames: usize,
    pub noise: f64,
    pub label_set: LabelSet,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            studies: 32,
            views: 2,
            frames: 16,
            image_size: 28,
            cycle_frames: 8,
            noise: 0.0,
            label_set: LabelSet::Separable,
            val_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.frames == 0 || self.image_size < 8 || self.cycle_frames == 0 {
            return Err(LamaeError::Config(
                "generator needs views, frames, cycle > 0 and image_size >= 8".into(),
            ));
        }
        if self.label_set == LabelSet::CrossView && self.views < 2 {
            return Err(LamaeError::Config("cross_view labels need at least 2 views".into()));
        }
        if !(0.0..1.0).contains(&(self.val_fraction + self.test_fraction))
            || self.val_fraction < 0.0
            || self.test_fraction < 0.0
        {
            return Err(LamaeError::Config(
                "split fractions must be non-negative and sum below 1".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(LamaeError::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub mode: Mode,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    /// Studies per optimizer step (gradients are accumulated per study).
    pub batch_size: usize,
    pub seed: u64,
    pub dtype: DType,
    pub task: Task,
    pub augment: bool,
    pub manifest: Option<PathBuf>,
    /// Checkpoint to start from (pretrained backbone, or resume point).
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps in total (0 = run the schedule).
    pub max_steps: usize,
    pub eval_split: String,
    pub generator: GeneratorConfig,
}

impl RunConfig {
    pub fn preset(name: &str, variant: Variant) -> Result<Self> {
        let base = Self {
            preset: name.to_string(),
            mode: Mode::Pretrain,
            model: ModelConfig::paper(variant),
            schedule: ScheduleConfig::paper(f64::NAN),
            optim: OptimConfig::default(),
            batch_size: 16,
            seed: 0,
            dtype: DType::F32,
            task: Task::Multilabel,
            augment: false,
            manifest: None,
            checkpoint: None,
            checkpoint_every: 0,
            max_steps: 0,
            eval_split: "test".into(),
            generator: GeneratorConfig::default(),
        };
        match name {
            "paper" => Ok(base),
            "desk" => Ok(Self {
                model: ModelConfig::desk(variant),
                schedule: ScheduleConfig {
                    base_lr: 2e-3,
                    warmup_epochs: 5.0,
                    total_epochs: 100.0,
                    ..ScheduleConfig::paper(100.0)
                },
                ..base
            }),
            _ => Err(LamaeError::Config(format!("unknown preset {name:?}"))),
        }
    }

    /// Steps needed to cover `epochs` with `n_train` studies per epoch.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.generator.validate()?;
        if self.batch_size == 0 {
            return Err(LamaeError::Config("batch_size must be positive".into()));
        }
        match self.mode {
            Mode::Pretrain | Mode::FinetuneFull | Mode::FinetuneFrozen => {
                if !self.schedule.total_epochs.is_finite() {
                    return Err(LamaeError::Config("`epochs` must be set for training runs".into()));
                }
                self.schedule.validate()?;
            }
            Mode::Eval | Mode::Generate => {}
        }
        if (self.mode.is_finetune() || self.mode == Mode::Eval) && self.checkpoint.is_none() {
            return Err(LamaeError::Config(format!(
                "mode {} requires `checkpoint`",
                self.mode.name()
            )));
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let lookup = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let preset = lookup("preset").unwrap_or("paper");
        let variant = lookup("variant")
            .map(Variant::from_str)
            .transpose()?
            .unwrap_or(Variant::Lamae);
        let mut cfg = Self::preset(preset, variant)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.model = cfg.model.normalized();
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        let o = &mut self.optim;
        let gcfg = &mut self.generator;
        match key {
            "preset" => self.preset = value.to_string(),
            "mode" => self.mode = value.parse()?,
            "variant" => m.variant = value.parse()?,
            "image_size" => m.grid.image_size = num(key, value)?,
            "patch_size" => m.grid.patch_size = num(key, value)?,
            "channels" => m.grid.channels = num(key, value)?,
            "time_patch" => m.grid.time_patch = num(key, value)?,
            "encoder_dim" => m.encoder.embed_dim = num(key, value)?,
            "encoder_layers" => m.encoder.num_layers = num(key, value)?,
            "encoder_heads" => m.encoder.num_heads = num(key, value)?,
            "decoder_dim" => m.decoder.embed_dim = num(key, value)?,
            "decoder_layers" => m.decoder.num_layers = num(key, value)?,
            "decoder_heads" => m.decoder.num_heads = num(key, value)?,
            "latent_layers" => m.latent.num_layers = num(key, value)?,
            "latent_heads" => m.latent.num_heads = num(key, value)?,
            "mlp_ratio" => {
                let r = num(key, value)?;
                m.encoder.mlp_ratio = r;
                m.decoder.mlp_ratio = r;
                m.latent.mlp_ratio = r;
            }
            "qkv_bias" => {
                let b = flag(key, value)?;
                m.encoder.qkv_bias = b;
                m.decoder.qkv_bias = b;
                m.latent.qkv_bias = b;
            }
            "alpha_e" => m.alpha_e = num(key, value)?,
            "alpha_la" => m.alpha_la = num(key, value)?,
            "loss_norm" => m.loss_norm = value.parse()?,
            "pixel_norm" => m.pixel_norm = flag(key, value)?,
            "views" => m.views_per_study = num(key, value)?,
            "frames" => m.frames_per_view = num(key, value)?,
            "frame_window" => m.frame_window = num(key, value)?,
            "identity_embeddings" => m.identity_embeddings = flag(key, value)?,
            "identity_init_std" => m.identity_init_std = num(key, value)?,
            "num_labels" => m.num_labels = num(key, value)?,
            "head_hidden" => m.head_hidden = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "ln_eps" => m.ln_eps = num(key, value)?,
            "regression_offset" => m.regression_offset = num(key, value)?,
            "regression_scale" => m.regression_scale = num(key, value)?,
            "base_lr" => s.base_lr = num(key, value)?,
            "warmup_epochs" => s.warmup_epochs = num(key, value)?,
            "warmup_start_factor" => s.warmup_start_factor = num(key, value)?,
            "epochs" => s.total_epochs = num(key, value)?,
            "min_lr" => s.min_lr = num(key, value)?,
            "beta1" => o.beta1 = num(key, value)?,
            "beta2" => o.beta2 = num(key, value)?,
            "adam_eps" => o.eps = num(key, value)?,
            "weight_decay" => o.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(LamaeError::Config(format!("unknown dtype {value:?}"))),
                }
            }
            "task" => self.task = value.parse()?,
            "augment" => self.augment = flag(key, value)?,
            "manifest" => self.manifest = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "eval_split" => self.eval_split = value.to_string(),
            "gen_studies" => gcfg.studies = num(key, value)?,
            "gen_views" => gcfg.views = num(key, value)?,
            "gen_frames" => gcfg.frames = num(key, value)?,
            "gen_image_size" => gcfg.image_size = num(key, value)?,
            "gen_cycle_frames" => gcfg.cycle_frames = num(key, value)?,
            "gen_noise" => gcfg.noise = num(key, value)?,
            "gen_label_set" => gcfg.label_set = value.parse()?,
            "gen_val_fraction" => gcfg.val_fraction = num(key, value)?,
            "gen_test_fraction" => gcfg.test_fraction = num(key, value)?,
            _ => return Err(LamaeError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Serializes every field; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.schedule;
        let o = &self.optim;
        let g = &self.generator;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("mode", self.mode.name().into()),
            ("variant", m.variant.name().into()),
            ("image_size", m.grid.image_size.to_string()),
            ("patch_size", m.grid.patch_size.to_string()),
            ("channels", m.grid.channels.to_string()),
            ("time_patch", m.grid.time_patch.to_string()),
            ("encoder_dim", m.encoder.embed_dim.to_string()),
            ("encoder_layers", m.encoder.num_layers.to_string()),
            ("encoder_heads", m.encoder.num_heads.to_string()),
            ("decoder_dim", m.decoder.embed_dim.to_string()),
            ("decoder_layers", m.decoder.num_layers.to_string()),
            ("decoder_heads", m.decoder.num_heads.to_string()),
            ("latent_layers", m.latent.num_layers.to_string()),
            ("latent_heads", m.latent.num_heads.to_string()),
            ("mlp_ratio", m.encoder.mlp_ratio.to_string()),
            ("qkv_bias", m.encoder.qkv_bias.to_string()),
            ("alpha_e", fmt_f64(m.alpha_e)),
            ("alpha_la", fmt_f64(m.alpha_la)),
            ("loss_norm", m.loss_norm.name().into()),
            ("pixel_norm", m.pixel_norm.to_string()),
            ("views", m.views_per_study.to_string()),
            ("frames", m.frames_per_view.to_string()),
            ("frame_window", m.frame_window.to_string()),
            ("identity_embeddings", m.identity_embeddings.to_string()),
            ("identity_init_std", fmt_f64(m.identity_init_std)),
            ("num_labels", m.num_labels.to_string()),
            ("head_hidden", m.head_hidden.to_string()),
            ("dropout", fmt_f64(m.dropout)),
            ("ln_eps", fmt_f64(m.ln_eps)),
            ("regression_offset", fmt_f64(m.regression_offset)),
            ("regression_scale", fmt_f64(m.regression_scale)),
            ("base_lr", fmt_f64(s.base_lr)),
            ("warmup_epochs", fmt_f64(s.warmup_epochs)),
            ("warmup_start_factor", fmt_f64(s.warmup_start_factor)),
            ("epochs", fmt_f64(s.total_epochs)),
            ("min_lr", fmt_f64(s.min_lr)),
            ("beta1", fmt_f64(o.beta1)),
            ("beta2", fmt_f64(o.beta2)),
            ("adam_eps", fmt_f64(o.eps)),
            ("weight_decay", fmt_f64(o.weight_decay)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("dtype", self.dtype.name().into()),
            ("task", self.task.name().into()),
            ("augment", self.augment.to_string()),
            ("manifest", path(&self.manifest)),
            ("checkpoint", path(&self.checkpoint)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("eval_split", self.eval_split.clone()),
            ("gen_studies", g.studies.to_string()),
            ("gen_views", g.views.to_string()),
            ("gen_frames", g.frames.to_string()),
            ("gen_image_size", g.image_size.to_string()),
            ("gen_cycle_frames", g.cycle_frames.to_string()),
            ("gen_noise", fmt_f64(g.noise)),
            ("gen_label_set", g.label_set.name().into()),
            ("gen_val_fraction", fmt_f64(g.val_fraction)),
            ("gen_test_fraction", fmt_f64(g.test_fraction)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// CRC32 of the serialized configuration, as lowercase hex.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LamaeError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| LamaeError::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(LamaeError::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_match_hyperparameter_table() {
        let m = ModelConfig::paper(Variant::Lamae);
        assert_eq!(m.grid.tokens_per_frame(), 256);
        assert_eq!(
            (m.encoder.embed_dim, m.encoder.num_layers, m.encoder.num_heads),
            (768, 12, 12)
        );
        assert_eq!(
            (m.decoder.embed_dim, m.decoder.num_layers, m.decoder.num_heads),
            (192, 4, 3)
        );
        assert_eq!(
            (m.latent.embed_dim, m.latent.num_layers, m.latent.num_heads),
            (768, 3, 12)
        );
        assert_eq!(m.alpha_e, 0.875);
        assert_eq!((m.views_per_study, m.frames_per_view, m.frame_window), (8, 8, 32));
        let s = ScheduleConfig::paper(1600.0);
        assert_eq!((s.base_lr, s.warmup_epochs, s.warmup_start_factor), (1e-4, 10.0, 0.5));
        let o = OptimConfig::default();
        assert_eq!((o.beta1, o.beta2), (0.9, 0.999));
        assert_eq!(RunConfig::preset("paper", Variant::Lamae).unwrap().batch_size, 16);
    }

    #[test]
    fn baselines_have_no_latent_module() {
        for v in [Variant::ImageMae, Variant::VideoMae] {
            let m = ModelConfig::paper(v);
            assert_eq!(m.latent.num_layers, 0);
            assert_eq!(m.alpha_la, 0.0);
            assert!(!m.identity_embeddings);
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::preset("desk", Variant::VideoLamae).unwrap();
        cfg.seed = 42;
        cfg.manifest = Some("data/manifest.jsonl".into());
        cfg.model.alpha_la = 0.1;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(LamaeError::Config(_))));
        assert!(matches!(RunConfig::from_text("seed = x"), Err(LamaeError::Config(_))));
        assert!(matches!(
            RunConfig::from_text("no equals sign"),
            Err(LamaeError::Config(_))
        ));
    }

    #[test]
    fn finetune_requires_checkpoint() {
        let mut cfg = RunConfig::from_text("preset = desk\nmode = finetune_frozen\nepochs = 30").unwrap();
        assert!(cfg.validate().is_err());
        cfg.checkpoint = Some("x.lmae".into());
        cfg.validate().unwrap();
    }

    #[test]
    fn patch_size_must_divide_image() {
        let grid = PatchGrid {
            image_size: 30,
            patch_size: 7,
            channels: 1,
            time_patch: 1,
        };
        assert!(grid.validate().is_err());
    }
}
