//! Pretraining and finetuning loops, evaluation passes, and run state.
//!
//! All randomness is drawn from keyed streams: the epoch's batch order from
//! `[epoch]`, each study's view/frame draw and masks from `[epoch, study]`,
//! dropout from `[step, study]`. A run is therefore fully described by its
//! parameters, optimizer moments, and step counter, which is all a checkpoint
//! needs to resume exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use lamae_tensor::{Float, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig, Task};
use crate::data::manifest::{Header, Manifest};
use crate::data::sampling::{sample_views_frames, to_input, CropRotate};
use crate::data::study::{Split, Study};
use crate::data::synth::{generate_dataset, predicates};
use crate::error::{LamaeError, Result};
use crate::mask::MaskPlan;
use crate::metrics::{classification_metrics, mae, ClassificationMetrics};
use crate::model::{
    encode_study, latent_fuse, pool, predict, pretrain_loss, regression_value, sample_plan, task_loss, StudyInput,
};
use crate::optim::{lr_at, AdamW};
use crate::params::{
    ensure_params, head_outputs, head_specs, init_params, is_head_param, pretrain_specs, ParamStore, Session,
    Trainable, FEATURE_SCALE, FEATURE_SHIFT,
};
use crate::rng::{name_key, RngStreams, Stream};

/// Mask key used for validation reconstruction losses.
const EVAL_EPOCH_KEY: u64 = u64::MAX;
/// Batches prepared ahead of the training thread.
const PREFETCH_DEPTH: usize = 2;

/// Studies plus the names of their label columns.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub studies: Vec<Study>,
    pub label_names: Vec<String>,
}

impl Dataset {
    /// Reads `cfg.manifest`, or generates the synthetic set from the run seed
    /// when no manifest is given.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        match &cfg.manifest {
            Some(path) => {
                let m = Manifest::open(path)?;
                let studies = m.load_all()?;
                Ok(Self::new(studies, m.header.as_ref()))
            }
            None => Ok(Self::synthetic(cfg)?),
        }
    }

    pub fn synthetic(cfg: &RunConfig) -> Result<Self> {
        let studies = generate_dataset(&cfg.generator, cfg.seed)?;
        let label_names = predicates(cfg.generator.label_set)
            .iter()
            .map(|p| p.name.to_string())
            .collect();
        Ok(Self { studies, label_names })
    }

    pub fn new(studies: Vec<Study>, header: Option<&Header>) -> Self {
        let label_names = match header {
            Some(h) if !h.labels.is_empty() => h.labels.iter().map(|l| l.name.clone()).collect(),
            _ => {
                let k = studies
                    .iter()
                    .find_map(|s| s.labels.as_ref().map(Vec::len))
                    .unwrap_or(0);
                (0..k).map(|i| format!("label_{i}")).collect()
            }
        };
        Self { studies, label_names }
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.studies.len())
            .filter(|&i| self.studies[i].split == split)
            .collect()
    }
}

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Pretrain,
    Finetune { task: Task, frozen: bool },
}

impl Objective {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        match cfg.mode {
            Mode::Pretrain => Ok(Self::Pretrain),
            Mode::FinetuneFull => Ok(Self::Finetune {
                task: cfg.task,
                frozen: false,
            }),
            Mode::FinetuneFrozen => Ok(Self::Finetune {
                task: cfg.task,
                frozen: true,
            }),
            m => Err(LamaeError::Config(format!("mode {} does not train", m.name()))),
        }
    }

    fn trainable(self) -> Trainable {
        match self {
            Objective::Finetune { frozen: true, .. } => Trainable::HeadOnly,
            _ => Trainable::All,
        }
    }
}

/// One per-epoch record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: u64,
    pub step: u64,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
    pub mae: Option<f64>,
    pub wall_time: f64,
}

/// Append-only per-epoch log, stored as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<LogRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch < last.epoch {
                return Err(LamaeError::Integrity(format!(
                    "log epoch {} after epoch {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "epoch",
                "step",
                "split",
                "loss",
                "lr",
                "auroc",
                "f1",
                "mae",
                "wall_time",
            ])
            .map_err(csv_err)?;
        }
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LamaeError::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| LamaeError::Data(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(csv_err)?;
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LamaeError::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Rows of one split, in order.
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

fn csv_err(e: csv::Error) -> LamaeError {
    LamaeError::Data(format!("metrics log: {e}"))
}

/// One study ready for a forward pass.
pub struct Prepared<T> {
    pub input: StudyInput<T>,
    pub plan: Option<MaskPlan>,
}

/// Training-time input for `study` at `epoch`: random views, window, and
/// (optionally) augmentation, plus its masks when pretraining.
pub fn prepare_train<T: Float>(
    cfg: &RunConfig,
    streams: &RngStreams,
    study: &Study,
    epoch: u64,
    pretrain: bool,
) -> Result<Prepared<T>> {
    let m = &cfg.model;
    let key = [epoch, name_key(&study.id)];
    let mut rng = streams.stream(Stream::Data, &key);
    let sampled = sample_views_frames(
        &study.view_lengths(),
        m.views_per_study,
        m.frames_per_view,
        m.frame_window,
        &mut rng,
    )?;
    let aug: Option<Vec<CropRotate>> = cfg.augment.then(|| {
        let mut r = streams.stream(Stream::Augment, &key);
        (0..sampled.views.len()).map(|_| CropRotate::sample(&mut r)).collect()
    });
    let input = to_input(study, &sampled, m, aug.as_deref())?;
    let plan = if pretrain {
        Some(sample_plan(m, streams, epoch, &study.id)?)
    } else {
        None
    };
    Ok(Prepared { input, plan })
}

/// Evaluation input: one fixed draw per study, no augmentation.
pub fn prepare_eval<T: Float>(cfg: &RunConfig, streams: &RngStreams, study: &Study) -> Result<StudyInput<T>> {
    let m = &cfg.model;
    let mut rng = streams.stream(Stream::Eval, &[name_key(&study.id)]);
    let sampled = sample_views_frames(
        &study.view_lengths(),
        m.views_per_study,
        m.frames_per_view,
        m.frame_window,
        &mut rng,
    )?;
    to_input(study, &sampled, m, None)
}

/// Study order for one epoch.
pub fn epoch_order(streams: &RngStreams, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.stream(Stream::Data, &[epoch]));
    order
}

/// Forward pass and scalar loss of one study; `backward` also fills grads.
fn study_loss<T: Float>(
    s: &mut Session<'_, T>,
    item: &Prepared<T>,
    cfg: &RunConfig,
    objective: Objective,
) -> Result<lamae_tensor::Var> {
    match objective {
        Objective::Pretrain => {
            let plan = item
                .plan
                .as_ref()
                .ok_or_else(|| LamaeError::Integrity("pretraining item without a mask plan".into()))?;
            pretrain_loss(s, &item.input, plan, &cfg.model)
        }
        Objective::Finetune { task, .. } => {
            let out = predict(s, &item.input, &cfg.model)?;
            task_loss(s, out, &item.input, &cfg.model, task)
        }
    }
}

/// Best validation result seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub epoch: u64,
    pub value: f64,
}

/// Parameters, optimizer, and counters of one training run.
pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub objective: Objective,
    pub params: ParamStore<T>,
    pub opt: AdamW<T>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Mean batch loss of every step taken.
    pub trace: Vec<f64>,
    pub log: MetricsLog,
    pub best: Option<Best>,
    /// Sum and count of batch losses in the current epoch.
    epoch_acc: (f64, u64),
    wall_offset: f64,
    streams: RngStreams,
}

impl<T: Float> Trainer<T> {
    /// Starts a run. A checkpoint written by a run of the same mode resumes
    /// it; any other checkpoint supplies initial parameters.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let ckpt = cfg.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
        Self::with_checkpoint(cfg, ckpt.as_ref())
    }

    pub fn with_checkpoint(cfg: &RunConfig, ckpt: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let objective = Objective::of(cfg)?;
        let mut t = Self {
            cfg: cfg.clone(),
            objective,
            params: ParamStore::new(),
            opt: AdamW::new(cfg.optim),
            step: 0,
            trace: Vec::new(),
            log: MetricsLog::default(),
            best: None,
            epoch_acc: (0.0, 0),
            wall_offset: 0.0,
            streams: RngStreams::new(cfg.seed),
        };
        let specs = pretrain_specs(&cfg.model);
        match ckpt {
            None if objective != Objective::Pretrain => {
                return Err(LamaeError::Config("finetuning requires a pretrained checkpoint".into()))
            }
            None => t.params = init_params(&specs, cfg.seed),
            Some(c) => {
                t.params = load_params(c)?;
                check_backbone(&t.params, &specs)?;
                if objective == Objective::Pretrain {
                    ensure_params(&mut t.params, &specs, cfg.seed)?;
                }
                if c.get("train/mode").is_some() && c.text("train/mode")? == cfg.mode.name() {
                    t.restore_state(c)?;
                }
            }
        }
        if let Objective::Finetune { task, .. } = objective {
            ensure_params(&mut t.params, &head_specs(&cfg.model, task), cfg.seed)?;
        }
        Ok(t)
    }

    fn restore_state(&mut self, c: &Checkpoint) -> Result<()> {
        self.step = one(c.u64s("train/step")?, "train/step")?;
        self.opt.step = one(c.u64s("optim/step")?, "optim/step")?;
        for name in c.names().filter_map(|n| n.strip_prefix("optim/m/")) {
            self.opt
                .m
                .insert(name.to_string(), c.tensor(&format!("optim/m/{name}"))?);
            self.opt
                .v
                .insert(name.to_string(), c.tensor(&format!("optim/v/{name}"))?);
        }
        self.trace = c.f64s("train/trace")?.to_vec();
        let acc = c.f64s("train/epoch_acc")?;
        self.epoch_acc = (acc[0], acc[1] as u64);
        self.log = MetricsLog::from_csv(&c.text("train/log")?)?;
        self.wall_offset = self.log.rows.last().map_or(0.0, |r| r.wall_time);
        if let Ok(b) = c.f64s("train/best") {
            self.best = Some(Best {
                epoch: b[0] as u64,
                value: b[1],
            });
        }
        Ok(())
    }

    /// Full run state.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = params_checkpoint(&self.params, &self.cfg);
        c.put_text("train/mode", self.cfg.mode.name());
        c.put_u64("train/step", &[self.step]);
        c.put_u64("optim/step", &[self.opt.step]);
        for (name, m) in &self.opt.m {
            c.put_tensor(&format!("optim/m/{name}"), m);
            c.put_tensor(&format!("optim/v/{name}"), &self.opt.v[name]);
        }
        c.put_f64s("train/trace", &self.trace);
        c.put_f64s("train/epoch_acc", &[self.epoch_acc.0, self.epoch_acc.1 as f64]);
        c.put_text("train/log", &self.log.to_csv()?);
        if let Some(b) = self.best {
            c.put_f64s("train/best", &[b.epoch as f64, b.value]);
        }
        Ok(c)
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> u64 {
        self.cfg.steps_per_epoch(data.split(Split::Train).len()) as u64
    }

    /// Step count at which the run ends.
    pub fn total_steps(&self, data: &Dataset) -> u64 {
        let spe = self.steps_per_epoch(data);
        let scheduled = (self.cfg.schedule.total_epochs * spe as f64).ceil() as u64;
        if self.cfg.max_steps > 0 {
            scheduled.min(self.cfg.max_steps as u64)
        } else {
            scheduled
        }
    }

    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<()> {
        let stop = self.total_steps(data);
        self.run_until(data, stop, out)
    }

    /// Trains until `stop` optimizer steps have been taken in total.
    pub fn run_until(&mut self, data: &Dataset, stop: u64, out: Option<&Path>) -> Result<()> {
        let train = data.split(Split::Train);
        if train.is_empty() {
            return Err(LamaeError::Data("the training split is empty".into()));
        }
        self.check_data(data)?;
        if self.step == 0 && matches!(self.objective, Objective::Finetune { frozen: true, .. }) {
            fit_feature_norm(&self.cfg, &mut self.params, data, &train)?;
        }
        let val = data.split(Split::Val);
        let spe = self.steps_per_epoch(data);
        let bs = self.cfg.batch_size;
        let start = self.step;
        let clock = Instant::now();
        let pretrain = self.objective == Objective::Pretrain;
        let worker_cfg = self.cfg.clone();
        let (cfg, streams) = (&worker_cfg, self.streams);

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Vec<Prepared<T>>>>(PREFETCH_DEPTH);
            let train = &train;
            scope.spawn(move || {
                let mut order: Option<(u64, Vec<usize>)> = None;
                for step in start..stop {
                    let epoch = step / spe;
                    if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                        let perm = epoch_order(&streams, epoch, train.len());
                        order = Some((epoch, perm.into_iter().map(|i| train[i]).collect()));
                    }
                    let ids = &order.as_ref().expect("set above").1;
                    let b = (step % spe) as usize;
                    let batch: Result<Vec<_>> = ids[b * bs..((b + 1) * bs).min(ids.len())]
                        .iter()
                        .map(|&i| prepare_train(cfg, &streams, &data.studies[i], epoch, pretrain))
                        .collect();
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        return;
                    }
                }
            });

            for batch in rx.iter() {
                let batch = batch?;
                let step = self.step;
                let epoch = step / spe;
                let lr = lr_at(step as f64 / spe as f64, &self.cfg.schedule);
                let loss = self.train_step(&batch, lr)?;
                self.trace.push(loss);
                self.epoch_acc.0 += loss;
                self.epoch_acc.1 += 1;
                self.step += 1;
                if self.step.is_multiple_of(spe) {
                    let wall = self.wall_offset + clock.elapsed().as_secs_f64();
                    self.end_epoch(data, &val, epoch, lr, wall, out)?;
                }
            }
            Ok(())
        })?;

        if let Some(dir) = out {
            self.write_outputs(dir)?;
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if let Objective::Finetune { task, .. } = self.objective {
            let want = head_outputs(&self.cfg.model, task);
            for s in &data.studies {
                match task {
                    Task::Multilabel => {
                        let n = s.labels.as_ref().map_or(0, Vec::len);
                        if n != want {
                            return Err(LamaeError::Data(format!(
                                "study {} has {n} labels, the head predicts {want}",
                                s.id
                            )));
                        }
                    }
                    Task::Regression if s.target.is_none() => {
                        return Err(LamaeError::Data(format!("study {} has no regression target", s.id)))
                    }
                    Task::Regression => {}
                }
            }
        }
        Ok(())
    }

    /// One optimizer step on the mean loss of `batch`; returns that loss.
    pub fn train_step(&mut self, batch: &[Prepared<T>], lr: f64) -> Result<f64> {
        let n = batch.len() as f64;
        let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for item in batch {
            let mut s = Session::new(&self.params, self.objective.trainable());
            s.dropout_rng = Some(
                self.streams
                    .stream(Stream::Dropout, &[self.step, name_key(&item.input.study_id)]),
            );
            let loss = study_loss(&mut s, item, &self.cfg, self.objective)?;
            let value = s.value(loss).item()?.as_f64();
            if !value.is_finite() {
                return Err(LamaeError::Numeric(format!(
                    "loss is {value} at step {} (study {})",
                    self.step, item.input.study_id
                )));
            }
            loss_sum += value;
            s.backward(loss)?;
            for (name, g) in s.grads() {
                match total.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        let inv = T::from_f64(1.0 / n);
        for g in total.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        self.opt.step(&mut self.params, &total, lr)?;
        Ok(loss_sum / n)
    }

    fn end_epoch(
        &mut self,
        data: &Dataset,
        val: &[usize],
        epoch: u64,
        lr: f64,
        wall: f64,
        out: Option<&Path>,
    ) -> Result<()> {
        let (sum, count) = std::mem::take(&mut self.epoch_acc);
        self.log.push(LogRow {
            epoch,
            step: self.step,
            split: "train".into(),
            loss: sum / count.max(1) as f64,
            lr,
            auroc: None,
            f1: None,
            mae: None,
            wall_time: wall,
        })?;
        if !val.is_empty() {
            let row = self.validate(data, val, epoch, lr, wall)?;
            let (score, higher_better) = match (row.auroc, row.mae) {
                (Some(a), _) => (a, true),
                (None, Some(m)) => (m, false),
                _ => (row.loss, false),
            };
            let improved = self.best.is_none_or(|b| {
                if higher_better {
                    score > b.value
                } else {
                    score < b.value
                }
            });
            self.log.push(row)?;
            if improved {
                self.best = Some(Best { epoch, value: score });
                if let Some(dir) = out {
                    fs::create_dir_all(dir).map_err(|e| LamaeError::io(dir, e))?;
                    params_checkpoint(&self.params, &self.cfg).save(&dir.join("best.lmae"))?;
                }
            }
        }
        let every = self.cfg.checkpoint_every as u64;
        if let (Some(dir), true) = (out, every > 0 && (epoch + 1).is_multiple_of(every)) {
            fs::create_dir_all(dir).map_err(|e| LamaeError::io(dir, e))?;
            self.checkpoint()?.save(&dir.join("last.lmae"))?;
        }
        Ok(())
    }

    fn validate(&self, data: &Dataset, val: &[usize], epoch: u64, lr: f64, wall: f64) -> Result<LogRow> {
        let mut row = LogRow {
            epoch,
            step: self.step,
            split: "val".into(),
            loss: 0.0,
            lr,
            auroc: None,
            f1: None,
            mae: None,
            wall_time: wall,
        };
        match self.objective {
            Objective::Pretrain => row.loss = pretrain_eval_loss(&self.cfg, &self.params, data, val)?,
            Objective::Finetune { task, .. } => {
                let p = predict_split(&self.cfg, &self.params, data, val, task)?;
                row.loss = p.loss;
                match task {
                    Task::Multilabel => {
                        let m = classification_metrics(&data.label_names, &p.scores, &p.labels, 0.5).ok();
                        row.auroc = m.as_ref().map(|m| m.macro_auroc.value);
                        row.f1 = m.as_ref().map(|m| m.macro_f1);
                    }
                    Task::Regression => row.mae = Some(mae(&p.preds, &p.targets)),
                }
            }
        }
        Ok(row)
    }

    /// Writes `last.lmae`, `metrics.csv`, `trace.csv`, and `summary.json`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| LamaeError::io(dir, e))?;
        self.checkpoint()?.save(&dir.join("last.lmae"))?;
        write_text(&dir.join("metrics.csv"), &self.log.to_csv()?)?;
        let mut trace = String::from("step,loss\n");
        for (i, l) in self.trace.iter().enumerate() {
            trace.push_str(&format!("{},{l:?}\n", i + 1));
        }
        write_text(&dir.join("trace.csv"), &trace)?;
        let summary = serde_json::json!({
            "mode": self.cfg.mode.name(),
            "variant": self.cfg.model.variant.name(),
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
            "steps": self.step,
            "final_loss": self.trace.last(),
            "best_val": self.best,
        });
        let text = serde_json::to_string_pretty(&summary).map_err(|e| LamaeError::Data(e.to_string()))?;
        write_text(&dir.join("summary.json"), &text)
    }
}

fn one(values: &[u64], name: &str) -> Result<u64> {
    values
        .first()
        .copied()
        .ok_or_else(|| LamaeError::Checkpoint(format!("record {name} is empty")))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LamaeError::io(path, e))
}

/// Checkpoint holding only parameters and the run configuration.
pub fn params_checkpoint<T: Float>(params: &ParamStore<T>, cfg: &RunConfig) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in params {
        c.put_tensor(&format!("param/{name}"), t);
    }
    c.put_text("meta/config", &cfg.to_text());
    c
}

pub fn load_params<T: Float>(c: &Checkpoint) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for name in c.names().filter_map(|n| n.strip_prefix("param/")) {
        store.insert(name.to_string(), c.tensor(&format!("param/{name}"))?);
    }
    if store.is_empty() {
        return Err(LamaeError::Checkpoint("checkpoint holds no parameters".into()));
    }
    Ok(store)
}

/// Every encoder, latent, and embedding tensor the model needs must be present
/// with its configured shape. Decoder tensors are only needed for pretraining
/// and are filled in by the caller there.
fn check_backbone<T: Float>(params: &ParamStore<T>, specs: &[crate::params::ParamSpec]) -> Result<()> {
    for spec in specs.iter().filter(|s| !s.name.starts_with("decoder.")) {
        match params.get(&spec.name) {
            None => {
                return Err(LamaeError::Checkpoint(format!(
                    "checkpoint lacks tensor {} required by the configuration",
                    spec.name
                )))
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(LamaeError::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?}, configuration expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Mean reconstruction loss over `idx` with fixed evaluation masks.
pub fn pretrain_eval_loss<T: Float>(
    cfg: &RunConfig,
    params: &ParamStore<T>,
    data: &Dataset,
    idx: &[usize],
) -> Result<f64> {
    let streams = RngStreams::new(cfg.seed);
    let losses = shard(idx, |i| {
        let study = &data.studies[i];
        let input = prepare_eval::<T>(cfg, &streams, study)?;
        let plan = sample_plan(&cfg.model, &streams, EVAL_EPOCH_KEY, &study.id)?;
        let mut s = Session::new(params, Trainable::Nothing);
        let loss = pretrain_loss(&mut s, &input, &plan, &cfg.model)?;
        Ok(s.value(loss).item()?.as_f64())
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Head outputs for a split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub ids: Vec<String>,
    /// Raw logits (multilabel) or standardized outputs (regression).
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    /// Regression predictions and targets in target units.
    pub preds: Vec<f64>,
    pub targets: Vec<f64>,
    pub loss: f64,
}

pub fn predict_split<T: Float>(
    cfg: &RunConfig,
    params: &ParamStore<T>,
    data: &Dataset,
    idx: &[usize],
    task: Task,
) -> Result<Predictions> {
    let streams = RngStreams::new(cfg.seed);
    let outs = shard(idx, |i| {
        let study = &data.studies[i];
        let input = prepare_eval::<T>(cfg, &streams, study)?;
        let mut s = Session::new(params, Trainable::Nothing);
        let out = predict(&mut s, &input, &cfg.model)?;
        let loss = task_loss(&mut s, out, &input, &cfg.model, task)?;
        let scores = s.value(out).to_f64_vec();
        Ok((
            study.id.clone(),
            scores,
            s.value(loss).item()?.as_f64(),
            input.labels,
            input.target,
        ))
    })?;
    let mut p = Predictions::default();
    let n = outs.len();
    for (id, scores, loss, labels, target) in outs {
        p.loss += loss / n as f64;
        if task == Task::Regression {
            p.preds.push(regression_value(&cfg.model, scores[0]));
            p.targets.push(target.unwrap_or(f64::NAN));
        } else {
            p.labels.push(labels.unwrap_or_default());
        }
        p.ids.push(id);
        p.scores.push(scores);
    }
    Ok(p)
}

/// Sets the head's feature standardization to the per-channel mean and
/// inverse standard deviation of pooled features over `idx`.
pub fn fit_feature_norm<T: Float>(
    cfg: &RunConfig,
    params: &mut ParamStore<T>,
    data: &Dataset,
    idx: &[usize],
) -> Result<()> {
    let streams = RngStreams::new(cfg.seed);
    let store = &*params;
    let feats = shard(idx, |i| {
        let input = prepare_eval::<T>(cfg, &streams, &data.studies[i])?;
        let mut s = Session::new(store, Trainable::Nothing);
        let plan = MaskPlan::unmasked(input.views(), cfg.model.time_slots(), cfg.model.grid.tokens_per_frame());
        let batch = encode_study(&mut s, &input, &plan, &cfg.model)?;
        let fused = latent_fuse(&mut s, batch, &plan, &cfg.model)?;
        let pooled = pool(&mut s, &fused)?;
        Ok(s.value(pooled).to_f64_vec())
    })?;
    let d = cfg.model.encoder.embed_dim;
    let n = feats.len() as f64;
    let mut shift = vec![T::from_f64(0.0); d];
    let mut scale = vec![T::from_f64(0.0); d];
    for c in 0..d {
        let mean = feats.iter().map(|f| f[c]).sum::<f64>() / n;
        let var = feats.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
        shift[c] = T::from_f64(mean);
        scale[c] = T::from_f64(1.0 / (var.sqrt() + FEATURE_EPS));
    }
    params.insert(FEATURE_SHIFT.into(), Tensor::new(vec![1, d], shift)?);
    params.insert(FEATURE_SCALE.into(), Tensor::new(vec![1, d], scale)?);
    Ok(())
}

/// Floor on the feature standard deviation used for standardization.
pub const FEATURE_EPS: f64 = 1e-6;

/// Maps `f` over `idx` on up to `available_parallelism` threads; results come
/// back in `idx` order.
fn shard<R: Send>(idx: &[usize], f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(idx.len().max(1));
    if threads <= 1 {
        return idx.iter().map(|&i| f(i)).collect();
    }
    let chunk = idx.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = idx
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&i| f(i)).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(idx.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub n: usize,
}

/// Structured result of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    /// Training mode that produced the checkpoint.
    pub regime: String,
    pub task: String,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_studies: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| LamaeError::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LamaeError::Data(format!("report: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LamaeError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Evaluates `params` on `split` of `data`.
pub fn evaluate_params<T: Float>(
    cfg: &RunConfig,
    params: &ParamStore<T>,
    data: &Dataset,
    split: Split,
    regime: &str,
) -> Result<EvalReport> {
    let idx = data.split(split);
    if idx.is_empty() {
        return Err(LamaeError::Data(format!("split {} is empty", split.name())));
    }
    let task = cfg.task;
    if !params.keys().any(|k| is_head_param(k)) {
        return Err(LamaeError::Checkpoint(
            "checkpoint has no task head; finetune it first".into(),
        ));
    }
    let p = predict_split(cfg, params, data, &idx, task)?;
    let (classification, regression) = match task {
        Task::Multilabel => (
            Some(classification_metrics(&data.label_names, &p.scores, &p.labels, 0.5)?),
            None,
        ),
        Task::Regression => (
            None,
            Some(RegressionMetrics {
                mae: mae(&p.preds, &p.targets),
                n: p.preds.len(),
            }),
        ),
    };
    Ok(EvalReport {
        variant: cfg.model.variant.name().into(),
        regime: regime.into(),
        task: task.name().into(),
        split: split.name().into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        n_studies: idx.len(),
        loss: p.loss,
        classification,
        regression,
    })
}

/// Loads `cfg.checkpoint` and evaluates it on `cfg.eval_split`.
pub fn evaluate<T: Float>(cfg: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let path: &PathBuf = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| LamaeError::Config("evaluation requires `checkpoint`".into()))?;
    let c = Checkpoint::load(path)?;
    let params = load_params::<T>(&c)?;
    check_backbone(&params, &pretrain_specs(&cfg.model))?;
    check_head(&params, cfg)?;
    let regime = if c.get("train/mode").is_some() {
        c.text("train/mode")?
    } else {
        "unknown".into()
    };
    evaluate_params(cfg, &params, data, Split::parse(&cfg.eval_split)?, &regime)
}

fn check_head<T: Float>(params: &ParamStore<T>, cfg: &RunConfig) -> Result<()> {
    for spec in head_specs(&cfg.model, cfg.task) {
        if let Some(t) = params.get(&spec.name) {
            if t.shape() != spec.shape.as_slice() {
                return Err(LamaeError::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?}, task {} expects {:?}",
                    spec.name,
                    t.shape(),
                    cfg.task.name(),
                    spec.shape
                )));
            }
        }
    }
    Ok(())
}
