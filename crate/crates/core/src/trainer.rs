//! Semi-supervised mean-teacher training: batching, two-view forward passes, loss
//! assembly, SGD with momentum, EMA teacher updates, logging and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid3};
use crate::losses::{self, HyperParams, LossParts, LossReport};
use crate::model::backbone::{self, BackboneGrad};
use crate::model::head::{DropoutMask, PreparedHead};
use crate::model::{ema_update_in_place, ArchDescriptor, Checkpoint, CheckpointScalars, ParamSet};
use crate::rng::{derive_seed, rng_for, stream};
use crate::sdm::boundary_aware_feature;
use crate::synth::{two_view, AnnotatedCase, CropRecord, DatasetSplit, UnlabeledCase, Volume};

/// Header of the CSV training log.
pub const LOG_HEADER: &str = "iteration,sup,contrast,pd,con,rampup,total,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub crop: Dims,
    pub hyper: HyperParams,
    pub arch: ArchDescriptor,
    pub lr_initial: f64,
    pub lr_factor: f64,
    /// Iterations between learning-rate decays; 0 means `t_max / 2`.
    pub lr_interval: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub seed: u64,
    /// Standard deviation of the per-view Gaussian intensity noise.
    pub view_noise: f64,
    /// Feed the raw volume instead of volume + predicted SDM to the projection head.
    pub disable_sdm_feature: bool,
    /// Write a checkpoint every this many iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            crop: [32, 32, 32],
            hyper: HyperParams::default(),
            arch: ArchDescriptor::default(),
            lr_initial: 0.01,
            lr_factor: 0.1,
            lr_interval: 3000,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_max: 6000,
            seed: 0,
            view_noise: 0.1,
            disable_sdm_feature: false,
            checkpoint_every: 0,
            log_path: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Single-CPU configuration: 32^3 crops and 500 iterations with the decay
    /// interval scaled to `t_max / 2`.
    pub fn desk() -> Self {
        Self {
            t_max: 500,
            lr_interval: 250,
            ..Self::default()
        }
    }

    pub fn effective_interval(&self) -> usize {
        if self.lr_interval == 0 {
            (self.t_max / 2).max(1)
        } else {
            self.lr_interval
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.arch.validate()?;
        if self.labeled_per_batch == 0 || self.unlabeled_per_batch == 0 {
            return Err(Error::Config("a batch needs at least one labeled and one unlabeled case".into()));
        }
        if self.hyper.d_h != self.arch.d_h {
            return Err(Error::Config(format!(
                "hyper.d_h ({}) differs from arch.d_h ({})",
                self.hyper.d_h, self.arch.d_h
            )));
        }
        let f = self.arch.downsampling();
        if self.crop.iter().any(|&c| c == 0 || c % f != 0) {
            return Err(Error::Config(format!("crop {:?} must be a positive multiple of {f} per axis", self.crop)));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay >= 0".into()));
        }
        if !(self.view_noise >= 0.0) {
            return Err(Error::Config("view_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// `initial * factor^floor(t / interval)`.
pub fn lr_schedule(t: usize, cfg: &TrainConfig) -> f64 {
    let k = (t / cfg.effective_interval()) as i32;
    let inv = 1.0 / cfg.lr_factor;
    // Dividing by an integral inverse keeps decimal schedules exact (0.01 -> 0.001).
    if inv.fract() == 0.0 {
        cfg.lr_initial / inv.powi(k)
    } else {
        cfg.lr_initial * cfg.lr_factor.powi(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub t: usize,
    pub t_max: usize,
    pub lr: f64,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub momentum: ParamSet,
    /// Base seed; every random stream is derived from it and the iteration index.
    pub seed: u64,
    pub last_report: Option<LossReport>,
}

impl TrainState {
    /// Student from a seeded init, teacher as an exact copy, zero momentum.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = ParamSet::init(&cfg.arch, derive_seed(cfg.seed, &[stream::INIT]))?;
        Ok(Self {
            t: 0,
            t_max: cfg.t_max,
            lr: lr_schedule(0, cfg),
            teacher: student.clone(),
            momentum: student.zeros_like(),
            student,
            seed: cfg.seed,
            last_report: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scalars: CheckpointScalars {
                t: self.t,
                t_max: self.t_max,
                lr: self.lr,
                seed: self.seed,
            },
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            momentum: self.momentum.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.student.check_compatible(&ckpt.teacher)?;
        ckpt.student.check_compatible(&ckpt.momentum)?;
        Ok(Self {
            t: ckpt.scalars.t,
            t_max: ckpt.scalars.t_max,
            lr: ckpt.scalars.lr,
            seed: ckpt.scalars.seed,
            student: ckpt.student,
            teacher: ckpt.teacher,
            momentum: ckpt.momentum,
            last_report: None,
        })
    }
}

/// One mini-batch: labeled crops and full unlabeled volumes (views are drawn in
/// [`train_step`]).
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<AnnotatedCase>,
    pub unlabeled: Vec<Volume>,
}

fn pick(rng: &mut impl Rng, available: usize, k: usize) -> Vec<usize> {
    if k <= available {
        sample(rng, available, k).into_vec()
    } else {
        (0..k).map(|_| rng.gen_range(0..available)).collect()
    }
}

/// Seed-deterministic batch for iteration `t`.
pub fn sample_batch(split: &DatasetSplit, cfg: &TrainConfig, t: usize) -> Result<Batch> {
    if split.labeled.is_empty() || split.unlabeled.is_empty() {
        return Err(Error::InsufficientCases {
            required: 1,
            available: split.labeled.len().min(split.unlabeled.len()),
        });
    }
    let mut rng = rng_for(cfg.seed, &[stream::DATA, t as u64]);
    let li = pick(&mut rng, split.labeled.len(), cfg.labeled_per_batch);
    let ui = pick(&mut rng, split.unlabeled.len(), cfg.unlabeled_per_batch);
    let mut labeled = Vec::with_capacity(li.len());
    for i in li {
        let case = &split.labeled[i];
        let rec = CropRecord::random(case.dims(), cfg.crop, &mut rng)?;
        labeled.push(AnnotatedCase {
            id: case.id,
            volume: Volume::new(rec.apply(case.volume.voxels())?, case.volume.spacing())?,
            mask: rec.apply(&case.mask)?,
            sdm: rec.apply(&case.sdm)?,
        });
    }
    let unlabeled = ui.into_iter().map(|i| split.unlabeled[i].volume.clone()).collect();
    Ok(Batch { labeled, unlabeled })
}

/// PyTorch-style SGD: `g = grad + wd*theta; buf = mu*buf + g; theta -= lr*buf`.
pub fn sgd_update(params: &mut ParamSet, momentum: &mut ParamSet, grads: &ParamSet, lr: f64, mu: f64, wd: f64) {
    for ((p, m), g) in params.tensors.iter_mut().zip(momentum.tensors.iter_mut()).zip(&grads.tensors) {
        for ((x, b), &gr) in p.data.iter_mut().zip(m.data.iter_mut()).zip(&g.data) {
            let gw = gr + wd * *x;
            *b = mu * *b + gw;
            *x -= lr * *b;
        }
    }
}

/// Everything stochastic about one iteration, derived from the base seed and `t`.
struct StepSeeds {
    views: Vec<u64>,
    drop_s: Vec<u64>,
    drop_t: Vec<u64>,
    negatives: u64,
}

impl StepSeeds {
    fn new(seed: u64, t: usize, n_unlabeled: usize) -> Self {
        let t = t as u64;
        let per = |tag: u64| (0..n_unlabeled as u64).map(|k| derive_seed(seed, &[tag, t, k])).collect();
        Self {
            views: per(stream::NOISE),
            drop_s: per(stream::DROPOUT_STUDENT),
            drop_t: per(stream::DROPOUT_TEACHER),
            negatives: derive_seed(seed, &[stream::NEGATIVES, t]),
        }
    }
}

/// Loss terms and the student gradient for one batch at iteration `t`.
/// The teacher is only read.
pub fn compute_gradients(
    student: &ParamSet,
    teacher: &ParamSet,
    batch: &Batch,
    cfg: &TrainConfig,
    t: usize,
) -> Result<(LossReport, ParamSet)> {
    if batch.labeled.is_empty() || batch.unlabeled.is_empty() {
        return Err(Error::InvalidArgument("batch needs labeled and unlabeled cases".into()));
    }
    let hp = &cfg.hyper;
    let layout = student.layout();
    let weights = losses::total_loss_grad(hp, t, cfg.t_max);
    let seeds = StepSeeds::new(cfg.seed, t, batch.unlabeled.len());

    // Supervised branch.
    let labeled: Vec<_> = batch
        .labeled
        .par_iter()
        .map(|case| backbone::forward_train(student, &layout, case.volume.voxels()))
        .collect::<Result<_>>()?;
    let outs: Vec<_> = labeled.iter().map(|c| c.output()).collect();
    let (sup, sup_grads) = losses::supervised_loss_with_grad(&outs, &batch.labeled, hp.alpha)?;

    // Unlabeled branch: views, student caches and teacher outputs.
    let views: Vec<(Volume, Volume)> = batch
        .unlabeled
        .iter()
        .zip(&seeds.views)
        .map(|(v, &s)| two_view(v, s, cfg.view_noise, cfg.crop).map(|(a, b, _)| (a, b)))
        .collect::<Result<_>>()?;
    let student_caches: Vec<_> = views
        .par_iter()
        .map(|(xs, _)| backbone::forward_train(student, &layout, xs.voxels()))
        .collect::<Result<_>>()?;
    let teacher_outs: Vec<_> = views
        .par_iter()
        .map(|(_, xt)| backbone::forward(teacher, xt.voxels()))
        .collect::<Result<_>>()?;
    let s_outs: Vec<_> = student_caches.iter().map(|c| c.output()).collect();
    let s_hidden: Vec<_> = student_caches.iter().map(|c| c.hidden().rows).collect();

    let feature = |x: &Volume, sdm: &Grid3<f64>| -> Result<Grid3<f64>> {
        if cfg.disable_sdm_feature {
            Ok(x.voxels().clone())
        } else {
            Ok(boundary_aware_feature(x, sdm)?.0)
        }
    };
    let [ch, cw, _] = cfg.crop;
    let s_head = PreparedHead::new(student, ch, cw);
    let t_head = PreparedHead::new(teacher, ch, cw);
    let mut s_emb = Vec::with_capacity(views.len());
    let mut s_head_caches = Vec::with_capacity(views.len());
    let mut s_masks = Vec::with_capacity(views.len());
    let mut t_emb = Vec::with_capacity(views.len());
    for (k, ((xs, xt), (s_out, (t_out, _)))) in views.iter().zip(s_outs.iter().zip(&teacher_outs)).enumerate() {
        let ms = DropoutMask::new(seeds.drop_s[k], hp.dropout_p)?;
        let mt = DropoutMask::new(seeds.drop_t[k], hp.dropout_p)?;
        let (es, cache) = s_head.forward(&feature(xs, &s_out.sdm)?, &ms)?;
        let (et, _) = t_head.forward(&feature(xt, &t_out.sdm)?, &mt)?;
        s_emb.push(es.rows);
        s_head_caches.push(cache);
        s_masks.push(ms);
        t_emb.push(et.rows);
    }
    let total_slices: usize = s_emb.iter().map(|e| e.nrows()).sum();
    let b = hp.batch_slices.unwrap_or(total_slices).min(total_slices);
    let contrast = losses::boundary_contrast_with_grad(&t_emb, &s_emb, hp.tau, b, seeds.negatives)?;
    let t_hidden: Vec<_> = teacher_outs.iter().map(|(_, h)| h.rows.clone()).collect();
    let pd = losses::pairwise_distill_with_grad(&s_hidden, &t_hidden)?;
    let s_prob: Vec<_> = s_outs.iter().map(|o| &o.prob).collect();
    let t_prob: Vec<_> = teacher_outs.iter().map(|(o, _)| &o.prob).collect();
    let con = losses::consistency_with_grad(&s_prob, &t_prob)?;

    let report = losses::total_loss(
        LossParts {
            sup,
            contrast: contrast.value,
            pd: pd.value,
            con: con.value,
        },
        hp,
        t,
        cfg.t_max,
    )?;

    // Backward. Per-case gradients are reduced in case order for determinism.
    let mut grads = student.zeros_like();
    let sup_parts: Vec<ParamSet> = labeled
        .par_iter()
        .zip(sup_grads.par_iter())
        .map(|(cache, g)| {
            let mut acc = student.zeros_like_backbone();
            let up = BackboneGrad {
                d_prob: Some(g.d_prob.as_slice()),
                d_sdm: Some(g.d_sdm.as_slice()),
                d_hidden: None,
            };
            backbone::backward(student, &layout, cache, &up, &mut acc);
            acc
        })
        .collect();
    for part in &sup_parts {
        grads.accumulate(part);
    }
    drop(sup_parts);

    let [_, w_contrast, w_pd, w_con] = weights;
    let mut head_grads = s_head.zero_grads();
    let mut unsup_up: Vec<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Array2<f64>>)> = Vec::with_capacity(views.len());
    for k in 0..views.len() {
        let d_prob = (w_con != 0.0).then(|| con.d_student[k].as_slice().iter().map(|g| g * w_con).collect());
        let d_hidden = (w_pd != 0.0).then(|| &pd.d_student[k] * w_pd);
        let d_sdm = if w_contrast != 0.0 {
            let d_rows = &contrast.d_student[k] * w_contrast;
            let d_feat = s_head.backward(&s_head_caches[k], &d_rows, &s_masks[k], &mut head_grads);
            (!cfg.disable_sdm_feature).then(|| d_feat.into_vec())
        } else {
            None
        };
        unsup_up.push((d_prob, d_sdm, d_hidden));
    }
    if w_contrast != 0.0 {
        head_grads.finish(student, ch, cw, &mut grads);
    }
    let unsup_parts: Vec<ParamSet> = student_caches
        .par_iter()
        .zip(unsup_up.par_iter())
        .map(|(cache, (dp, ds, dh))| {
            let mut acc = student.zeros_like_backbone();
            if dp.is_some() || ds.is_some() || dh.is_some() {
                let up = BackboneGrad {
                    d_prob: dp.as_deref(),
                    d_sdm: ds.as_deref(),
                    d_hidden: dh.as_ref(),
                };
                backbone::backward(student, &layout, cache, &up, &mut acc);
            }
            acc
        })
        .collect();
    for part in &unsup_parts {
        grads.accumulate(part);
    }
    Ok((report, grads))
}

/// One optimization step: gradients, SGD on the student, EMA of the teacher, `t += 1`.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<LossReport> {
    let diverged = |state: &TrainState, what: String| Error::Diverged {
        iteration: state.t,
        reason: match &state.last_report {
            Some(r) => format!("{what}; last finite report: {r:?}"),
            None => what,
        },
    };
    let (report, grads) = match compute_gradients(&state.student, &state.teacher, batch, cfg, state.t) {
        Ok(v) => v,
        Err(Error::NonFinite(what)) => return Err(diverged(state, what)),
        Err(e) => return Err(e),
    };
    if !grads.is_finite() {
        return Err(diverged(state, "non-finite student gradient".into()));
    }
    state.lr = lr_schedule(state.t, cfg);
    sgd_update(
        &mut state.student,
        &mut state.momentum,
        &grads,
        state.lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    if !state.student.is_finite() {
        return Err(diverged(state, "non-finite student parameters after SGD".into()));
    }
    ema_update_in_place(&mut state.teacher, &state.student, cfg.hyper.ema_decay)?;
    state.t += 1;
    state.last_report = Some(report);
    Ok(report)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, r.sup, r.contrast, r.pd, r.con, r.rampup, r.total, self.lr
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidArgument(format!("log row has {} fields, expected 8", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("log field {i}: {e}")))
        };
        Ok(Self {
            iteration: f[0]
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("log iteration: {e}")))?,
            report: LossReport {
                sup: num(1)?,
                contrast: num(2)?,
                pd: num(3)?,
                con: num(4)?,
                rampup: num(5)?,
                total: num(6)?,
            },
            lr: num(7)?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LogRow::parse_csv)
        .collect()
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("ckpt_{t:06}.bin"))
}

/// Name of the checkpoint holding the final state of a run.
pub const FINAL_CHECKPOINT: &str = "final.bin";

/// Runs `t_max - state.t` steps. Passing a checkpointed state resumes the run; the
/// existing log is truncated to the resumed iteration.
pub fn run_training(cfg: &TrainConfig, split: &DatasetSplit, resume: Option<TrainState>) -> Result<(TrainState, Vec<LogRow>)> {
    cfg.validate()?;
    if split.labeled.is_empty() || split.unlabeled.is_empty() {
        return Err(Error::InsufficientCases {
            required: 1,
            available: split.labeled.len().min(split.unlabeled.len()),
        });
    }
    let mut state = match resume {
        Some(s) => {
            s.student.check_compatible(&ParamSet::zeros(&cfg.arch))?;
            if s.seed != cfg.seed || s.t_max != cfg.t_max {
                return Err(Error::Config(format!(
                    "checkpoint (seed {}, t_max {}) does not match config (seed {}, t_max {})",
                    s.seed, s.t_max, cfg.seed, cfg.t_max
                )));
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let mut rows = Vec::new();
    if let Some(path) = &cfg.log_path {
        if state.t > 0 && path.exists() {
            rows = read_log(path)?.into_iter().filter(|r| r.iteration < state.t).collect();
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_log(path, &rows)?;
    }
    let mut log_file = match &cfg.log_path {
        Some(p) => Some(fs::OpenOptions::new().append(true).open(p)?),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut new_rows = Vec::new();
    while state.t < cfg.t_max {
        let batch = sample_batch(split, cfg, state.t)?;
        let t = state.t;
        let report = train_step(&mut state, &batch, cfg)?;
        let row = LogRow {
            iteration: t,
            report,
            lr: state.lr,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
        }
        if t % 50 == 0 {
            log::info!("iter {t}: total {:.5} sup {:.5} lr {}", report.total, report.sup, state.lr);
        }
        new_rows.push(row);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0 && state.t < cfg.t_max {
                state.to_checkpoint().save(&checkpoint_path(dir, state.t))?;
            }
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        state.to_checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    }
    rows.extend(new_rows);
    Ok((state, rows))
}

/// Labeled cases whose mask and SDM are cropped away; handy for callers that only
/// hold volumes.
pub fn unlabeled_from(cases: &[AnnotatedCase]) -> Vec<UnlabeledCase> {
    cases
        .iter()
        .map(|c| UnlabeledCase {
            id: c.id,
            volume: c.volume.clone(),
        })
        .collect()
}
