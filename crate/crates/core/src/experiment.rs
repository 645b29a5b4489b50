//! Experiment harness behind the command-line tool: dataset generation, training
//! runs, evaluation reports and ablation tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset_io::{self, DatasetManifest, GeneratorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, paired_t_test, MetricsReport};
use crate::grid::Dims;
use crate::model::{ArchDescriptor, Checkpoint};
use crate::synth::{generate_cases, make_split, DatasetSplit, PhantomSpec};
use crate::trainer::{run_training, TrainConfig, TrainState, FINAL_CHECKPOINT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub shape: Dims,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub phantom: PhantomSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            seed: 0,
            shape: [32, 32, 32],
            n_labeled: 8,
            n_unlabeled: 72,
            n_test: 20,
            phantom: PhantomSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            seed: self.seed,
            shape: self.shape,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_test: self.n_test,
            phantom: self.phantom.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labeled == 0 {
            return Err(Error::Config("n_labeled must be at least 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be at least 1".into()));
        }
        Ok(())
    }

    /// Generates the split in memory.
    pub fn build(&self) -> Result<DatasetSplit> {
        self.validate()?;
        let n = self.n_labeled + self.n_unlabeled + self.n_test;
        let cases = generate_cases(n, self.shape, self.seed, &self.phantom)?;
        make_split(cases, self.n_labeled, self.n_unlabeled, self.n_test, self.seed)
    }
}

/// Switches that zero individual loss weights or alter the model for ablations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_contrast: bool,
    pub disable_pd: bool,
    pub disable_sdm_loss: bool,
    pub disable_consistency: bool,
    pub disable_sdm_feature: bool,
    pub dropout_p: Option<f64>,
    pub pool_size: Option<usize>,
}

impl AblationFlags {
    /// Training configuration with the flags applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if self.disable_contrast {
            cfg.hyper.lambda = 0.0;
        }
        if self.disable_pd {
            cfg.hyper.beta = 0.0;
        }
        if self.disable_sdm_loss {
            cfg.hyper.alpha = 0.0;
        }
        if self.disable_consistency {
            cfg.hyper.gamma = 0.0;
        }
        cfg.disable_sdm_feature |= self.disable_sdm_feature;
        if let Some(p) = self.dropout_p {
            cfg.hyper.dropout_p = p;
        }
        if let Some(s) = self.pool_size {
            cfg.arch.pool_size = s;
        }
        cfg
    }

    /// Flags selecting a named variant. Dropout variants are spelled `p=<rate>`.
    pub fn variant(name: &str) -> Result<Self> {
        let none = Self::default();
        let f = match name {
            "full" => none,
            "baseline" => Self {
                disable_contrast: true,
                disable_pd: true,
                disable_sdm_loss: true,
                disable_sdm_feature: true,
                ..none
            },
            "labeled_only" => Self {
                disable_contrast: true,
                disable_pd: true,
                disable_consistency: true,
                ..none
            },
            "wo_sdm" => Self {
                disable_sdm_loss: true,
                disable_sdm_feature: true,
                ..none
            },
            "wo_contrast_pd" => Self {
                disable_contrast: true,
                disable_pd: true,
                ..none
            },
            "wo_contrast" => Self {
                disable_contrast: true,
                ..none
            },
            "wo_pd" => Self { disable_pd: true, ..none },
            "wo_sdm_loss" => Self {
                disable_sdm_loss: true,
                ..none
            },
            other => match other.strip_prefix("p=").map(str::parse::<f64>) {
                Some(Ok(p)) => Self {
                    dropout_p: Some(p),
                    ..none
                },
                _ => return Err(Error::Config(format!("unknown variant `{other}`"))),
            },
        };
        Ok(f)
    }

    /// Row label used in ablation tables.
    pub fn label(name: &str) -> String {
        match name {
            "full" => "full".into(),
            "baseline" => "baseline (mean teacher)".into(),
            "labeled_only" => "labeled only".into(),
            "wo_sdm" => "w/o SDM".into(),
            "wo_contrast_pd" => "w/o L_contrast + L_pd".into(),
            "wo_contrast" => "w/o L_contrast".into(),
            "wo_pd" => "w/o L_pd".into(),
            "wo_sdm_loss" => "w/o L_sdm".into(),
            other => other.to_string(),
        }
    }
}

/// Component and loss ablation rows, in table order.
pub const COMPONENT_VARIANTS: [&str; 7] = [
    "baseline",
    "wo_sdm",
    "wo_contrast_pd",
    "wo_contrast",
    "wo_pd",
    "wo_sdm_loss",
    "full",
];

/// Alpha-dropout rates of the dropout sweep.
pub const DROPOUT_SWEEP: [f64; 7] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sliding-window size; defaults to the training crop.
    pub window: Option<Dims>,
    /// Defaults to half the window per axis.
    pub stride: Option<Dims>,
}

impl EvalConfig {
    pub fn resolve(&self, crop: Dims) -> (Dims, Dims) {
        let window = self.window.unwrap_or(crop);
        let stride = self
            .stride
            .unwrap_or([(window[0] / 2).max(1), (window[1] / 2).max(1), (window[2] / 2).max(1)]);
        (window, stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub dropout_sweep: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variants: COMPONENT_VARIANTS.iter().map(|s| s.to_string()).collect(),
            dropout_sweep: DROPOUT_SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            train: TrainConfig::desk(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    /// Training configuration with ablation flags applied and paths cleared.
    pub fn effective_train(&self) -> TrainConfig {
        let mut cfg = self.ablation.apply(&self.train);
        cfg.log_path = None;
        cfg.checkpoint_dir = None;
        cfg
    }

    pub fn hash(&self) -> Result<String> {
        Ok(dataset_io::sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// Outcome of [`cmd_generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateOutcome {
    Created,
    Verified,
    Overwritten,
}

/// Generates the phantom dataset into `cfg.dataset.dir`. An existing dataset with
/// the same generator and checksums is left untouched; a different one is only
/// replaced with `force`.
pub fn cmd_generate(cfg: &ExperimentConfig, force: bool) -> Result<(DatasetManifest, GenerateOutcome)> {
    cfg.dataset.validate()?;
    let dir = &cfg.dataset.dir;
    let split = cfg.dataset.build()?;
    let (manifest, files) = dataset_io::encode_split(&split, &cfg.dataset.generator());
    let mut outcome = GenerateOutcome::Created;
    if dir.join(dataset_io::MANIFEST_NAME).exists() {
        let existing = dataset_io::read_manifest(dir);
        let verified = match &existing {
            Ok(m) if *m == manifest => files.iter().all(|(name, bytes)| {
                dataset_io::read_file(&dir.join(name))
                    .map(|b| dataset_io::sha256_hex(&b) == dataset_io::sha256_hex(bytes))
                    .unwrap_or(false)
            }),
            _ => false,
        };
        if verified {
            return Ok((manifest, GenerateOutcome::Verified));
        }
        if !force {
            return Err(Error::ManifestConflict(dir.clone()));
        }
        if let Ok(old) = existing {
            for c in &old.cases {
                for f in [Some(&c.volume), c.mask.as_ref(), c.sdm.as_ref()].into_iter().flatten() {
                    let _ = fs::remove_file(dir.join(&f.path));
                }
            }
        }
        outcome = GenerateOutcome::Overwritten;
    }
    fs::create_dir_all(dir)?;
    for (name, bytes) in &files {
        dataset_io::write_atomic(&dir.join(name), bytes)?;
    }
    dataset_io::write_manifest(dir, &manifest)?;
    Ok((manifest, outcome))
}

/// Loads the configured dataset directory, or generates the split in memory if
/// the directory has no manifest.
pub fn load_or_build(cfg: &DatasetConfig) -> Result<DatasetSplit> {
    if cfg.dir.join(dataset_io::MANIFEST_NAME).exists() {
        Ok(dataset_io::load_split(&cfg.dir)?.0)
    } else {
        cfg.build()
    }
}

pub const RUN_CONFIG: &str = "config.toml";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_CSV: &str = "metrics_per_case.csv";
pub const METRICS_JSON: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub t_max: usize,
    pub final_t: usize,
    pub student_checksum: String,
    pub teacher_checksum: String,
}

/// Trains into `run_dir`, writing the config, a CSV log, checkpoints and a run
/// manifest. On failure the directory is kept for inspection.
pub fn cmd_train(cfg: &ExperimentConfig, split: &DatasetSplit, run_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(RUN_CONFIG), cfg.to_toml()?)?;
    let mut tc = cfg.effective_train();
    tc.log_path = Some(run_dir.join(TRAIN_LOG));
    tc.checkpoint_dir = Some(run_dir.join(CHECKPOINT_DIR));
    let state = match resume {
        Some(p) => Some(TrainState::from_checkpoint(Checkpoint::load(p, Some(&tc.arch))?)?),
        None => None,
    };
    let (state, _) = run_training(&tc, split, state).inspect_err(|_| {
        log::error!("training failed; run directory kept at {}", run_dir.display());
    })?;
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        seed: tc.seed,
        dataset_seed: cfg.dataset.seed,
        t_max: tc.t_max,
        final_t: state.t,
        student_checksum: state.student.checksum(),
        teacher_checksum: state.teacher.checksum(),
    };
    fs::write(run_dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(state)
}

/// Evaluates the final student of `run_dir` on the test split.
pub fn cmd_evaluate(run_dir: &Path, split: &DatasetSplit) -> Result<MetricsReport> {
    let cfg = ExperimentConfig::load(&run_dir.join(RUN_CONFIG))?;
    let tc = cfg.effective_train();
    let ckpt_path = run_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    if !ckpt_path.exists() {
        return Err(Error::NotFound(ckpt_path));
    }
    let ckpt = Checkpoint::load(&ckpt_path, Some(&tc.arch))?;
    let (window, stride) = cfg.eval.resolve(tc.crop);
    let report = evaluate_cases(&ckpt.student, &split.test, window, stride)?;
    report.write(&run_dir.join(METRICS_CSV), &run_dir.join(METRICS_JSON))?;
    Ok(report)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    /// `None` when any run of the variant failed.
    pub report: Option<MetricsReport>,
    /// One-sided paired t-test of full vs this variant on per-case Dice.
    pub p_value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,Dice[%],Jaccard[%],ASD[voxel],95HD[voxel],p_value,status\n");
        for r in &self.rows {
            let p = r.p_value.map(|p| p.to_string()).unwrap_or_default();
            match &r.report {
                Some(m) => out.push_str(&format!(
                    "{},{},{},{},{},{},ok\n",
                    r.label, m.dice, m.jaccard, m.asd, m.hd95, p
                )),
                None => out.push_str(&format!("{},,,,,,failed\n", r.label)),
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<26} {:>9} {:>11} {:>11} {:>12} {:>9}\n",
            "Method", "Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]", "p"
        );
        for r in &self.rows {
            match &r.report {
                Some(m) => {
                    let p = r.p_value.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into());
                    out.push_str(&format!(
                        "{:<26} {:>9.2} {:>11.2} {:>11.2} {:>12.2} {:>9}\n",
                        r.label, m.dice, m.jaccard, m.asd, m.hd95, p
                    ));
                }
                None => out.push_str(&format!("{:<26} failed: {}\n", r.label, r.error.as_deref().unwrap_or(""))),
            }
        }
        out
    }
}

/// Trains and evaluates one variant over every seed; per-case results are
/// concatenated in seed order.
pub fn run_variant(cfg: &ExperimentConfig, split: &DatasetSplit, variant: &str, seeds: &[u64], out_dir: Option<&Path>) -> Result<MetricsReport> {
    let flags = AblationFlags::variant(variant)?;
    let mut per_case = Vec::new();
    for &seed in seeds {
        let mut tc = flags.apply(&cfg.train);
        tc.seed = seed;
        tc.checkpoint_dir = None;
        tc.log_path = out_dir.map(|d| d.join(variant.replace('=', "_")).join(format!("seed_{seed}")).join(TRAIN_LOG));
        let (state, _) = run_training(&tc, split, None)?;
        let (window, stride) = cfg.eval.resolve(tc.crop);
        per_case.extend(evaluate_cases(&state.student, &split.test, window, stride)?.per_case);
    }
    MetricsReport::from_cases(per_case)
}

/// Runs the configured variants (plus the dropout sweep) and tests every variant
/// against the full model.
pub fn cmd_ablate(cfg: &ExperimentConfig, split: &DatasetSplit, out_dir: Option<&Path>) -> Result<AblationTable> {
    let mut variants: Vec<String> = cfg.ablate.variants.clone();
    for p in &cfg.ablate.dropout_sweep {
        variants.push(format!("p={p}"));
    }
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants configured".into()));
    }
    for v in &variants {
        AblationFlags::variant(v)?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in &variants {
        log::info!("ablation variant {v}");
        let result = run_variant(cfg, split, v, &cfg.ablate.seeds, out_dir);
        rows.push(AblationRow {
            variant: v.clone(),
            label: AblationFlags::label(v),
            error: result.as_ref().err().map(|e| e.to_string()),
            report: result.ok(),
            p_value: None,
        });
    }
    let full = rows
        .iter()
        .find(|r| r.variant == "full")
        .and_then(|r| r.report.as_ref())
        .map(|m| m.dice_scores());
    if let Some(full) = full {
        for r in rows.iter_mut().filter(|r| r.variant != "full") {
            if let Some(m) = &r.report {
                r.p_value = paired_t_test(&full, &m.dice_scores()).ok();
            }
        }
    }
    let table = AblationTable {
        seeds: cfg.ablate.seeds.clone(),
        rows,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), table.to_csv())?;
        fs::write(dir.join("ablation.txt"), table.render())?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    }
    Ok(table)
}

/// Default location of a training run inside the output directory.
pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(format!("run_seed{}", cfg.train.seed))
}

/// Architecture a run directory was trained with.
pub fn run_arch(run_dir: &Path) -> Result<ArchDescriptor> {
    Ok(ExperimentConfig::load(&run_dir.join(RUN_CONFIG))?.effective_train().arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.hyper.batch_slices = Some(16);
        cfg.ablation.dropout_p = Some(0.05);
        cfg.eval.stride = Some([16, 16, 8]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 1.0\n").is_err());
    }

    #[test]
    fn flags_touch_only_their_weight() {
        let base = TrainConfig::desk();
        let c = AblationFlags::variant("wo_contrast").unwrap().apply(&base);
        assert_eq!(c.hyper.lambda, 0.0);
        assert_eq!((c.hyper.alpha, c.hyper.beta, c.hyper.gamma), (base.hyper.alpha, base.hyper.beta, base.hyper.gamma));
        let p = AblationFlags::variant("p=0").unwrap().apply(&base);
        assert_eq!(p.hyper.dropout_p, 0.0);
        assert!(AblationFlags::variant("nonsense").is_err());
    }

    #[test]
    fn zero_labeled_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.dir = dir.path().join("ds");
        cfg.dataset.n_labeled = 0;
        assert!(cmd_generate(&cfg, false).is_err());
        assert!(!cfg.dataset.dir.exists());
    }
}
