//! Batch workflow driven by one TOML configuration file.
//!
//! Stages run in order, each reading the previous stage's files under
//! `paths.output_dir`:
//!
//! | command      | writes                                              |
//! |--------------|-----------------------------------------------------|
//! | `preprocess` | `preprocessed/template.nrrd`, `preprocessed/<id>.nrrd` |
//! | `train`      | `model/model.bin`, `model/bins.toml`, `model/training_samples.csv`, `model/train.toml` (+ `model/train_loss.csv` for boosted trees) |
//! | `synth`      | `synth/<id>.nrrd`                                   |
//! | `register`   | `registration/<mode>/<id>_*`                        |
//! | `evaluate`   | `report/landmark_errors.csv`, `report/summary.csv`  |
//! | `phantom`    | a phantom suite under `phantom.dir`                 |
//!
//! Relative paths in the configuration resolve against the directory that
//! holds the configuration file. Registration and evaluation keep going
//! when a single subject fails; the failure is recorded and the command
//! still succeeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{
    load_model, save_model, train_boosted_trees_traced, train_random_forest, BoostedTreesParams, EnsembleKind,
    RandomForestParams, TreeEnsemble,
};
use crate::error::{Error, Result};
use crate::evaluation::{emit_report, landmark_error, summarize, tally_success, ErrorSummary, SummaryRow};
use crate::features::{sample_training, FeatureSpec, LabelledSubject};
use crate::io::{load_volume, save_volume, write_atomic};
use crate::phantom::{generate_suite, PhantomParams};
use crate::registration::{register, CostKind, RegistrationOptions, RegistrationResult};
use crate::synth::{compute_bins_pooled, make_label_volume, make_training_pair, synthesize, BinSpec, DEFAULT_N_BINS};
use crate::volume::{preprocess, PreprocessParams, Volume};
use crate::xform::{AffineTransform3D, LandmarkSet};

/// Default number of training samples drawn across training subjects.
pub const DEFAULT_N_SAMPLES: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub template: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One subject volume and, optionally, its landmark file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub volume: PathBuf,
    /// BigWarp-style CSV relating this subject (moving) to the template (fixed).
    #[serde(default)]
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    #[default]
    Rf,
    Bdt,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Rf => "rf",
            LearnerKind::Bdt => "bdt",
        }
    }
}

/// Learner choice. The `seed` fields of both parameter blocks are replaced
/// by `training.seed` so one number controls the whole training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub rf: RandomForestParams,
    pub bdt: BoostedTreesParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_samples: usize,
    /// Training subject ids; empty means the first two subjects.
    pub subjects: Vec<String>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_samples: DEFAULT_N_SAMPLES,
            subjects: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub cost: CostKind,
    pub options: RegistrationOptions,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            cost: CostKind::Ncc,
            options: RegistrationOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// A run counts as a success when it did not fail and its mean landmark
    /// error is below this value.
    pub threshold_um: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { threshold_um: 5.0 }
    }
}

/// Parameters of the `phantom` command: one pair per gamma, written to `dir`
/// as `template.nrrd` and `subject_<n>.nrrd` / `subject_<n>_landmarks.csv` /
/// `subject_<n>_labels.nrrd` / `subject_<n>_params.toml` for n = 1, 2, ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dir: PathBuf,
    pub gammas: Vec<f64>,
    pub params: PhantomParams,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dir: PathBuf::from("phantom"),
            gammas: vec![1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5],
            params: PhantomParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub subjects: Vec<SubjectEntry>,
    #[serde(default)]
    pub preprocess: PreprocessParams,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    /// Directory relative paths resolve against; set by [`PipelineConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Which input the `register` command aligns to the template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Baseline,
    Synth,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Synth => "synth",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "synth" | "synthesis" => Ok(Mode::Synth),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected baseline or synth"))),
        }
    }
}

impl PipelineConfig {
    /// Parses a configuration from TOML text; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    /// Checks internal consistency. File existence is checked by each command.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if s.id.is_empty() || s.id.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid subject id {:?}", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate subject id {:?}", s.id)));
            }
        }
        for id in &self.training.subjects {
            if !seen.contains(id.as_str()) {
                return Err(Error::Config(format!("training subject {id:?} is not a configured subject")));
            }
        }
        if self.training.n_samples == 0 {
            return Err(Error::Config("training.n_samples must be >= 1".into()));
        }
        if !(self.evaluation.threshold_um > 0.0) {
            return Err(Error::Config("evaluation.threshold_um must be > 0".into()));
        }
        self.preprocess.validate().map_err(cfg)?;
        self.features.validate().map_err(cfg)?;
        self.registration.options.validate().map_err(cfg)?;
        self.phantom.params.validate().map_err(cfg)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output_dir)
    }

    /// Training subject ids, defaulting to the first two subjects.
    pub fn training_subjects(&self) -> Vec<String> {
        if self.training.subjects.is_empty() {
            self.subjects.iter().take(2).map(|s| s.id.clone()).collect()
        } else {
            self.training.subjects.clone()
        }
    }

    fn subject(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown subject {id:?}")))
    }

    /// Subjects selected by an optional `--subject` filter.
    fn selected(&self, only: Option<&str>) -> Result<Vec<&SubjectEntry>> {
        match only {
            Some(id) => Ok(vec![self.subject(id)?]),
            None => Ok(self.subjects.iter().collect()),
        }
    }

    pub fn preprocessed_template(&self) -> PathBuf {
        self.output_dir().join("preprocessed").join("template.nrrd")
    }

    pub fn preprocessed_subject(&self, id: &str) -> PathBuf {
        self.output_dir().join("preprocessed").join(format!("{id}.nrrd"))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir().join("model")
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_dir().join("model.bin")
    }

    pub fn bins_path(&self) -> PathBuf {
        self.model_dir().join("bins.toml")
    }

    pub fn synth_path(&self, id: &str) -> PathBuf {
        self.output_dir().join("synth").join(format!("{id}.nrrd"))
    }

    pub fn registration_prefix(&self, mode: Mode, id: &str) -> PathBuf {
        self.output_dir().join("registration").join(mode.name()).join(id)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir().join("report")
    }

    /// Method label used in reports, e.g. `baseline-CC` or `rf-SSD`.
    pub fn method_name(&self, mode: Mode) -> String {
        let prefix = match mode {
            Mode::Baseline => "baseline",
            Mode::Synth => self.learner.kind.name(),
        };
        format!("{prefix}-{}", self.registration.cost.name())
    }

    fn landmarks_of(&self, s: &SubjectEntry) -> Result<Option<LandmarkSet>> {
        match &s.landmarks {
            Some(p) => LandmarkSet::read_csv(self.resolve(p)).map(Some),
            None => Ok(None),
        }
    }
}

/// Process exit code for an error: 1 for configuration or usage problems,
/// 2 for I/O, malformed files and data that cannot be processed.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 1,
        _ => 2,
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) => ensure_dir(d),
        None => Ok(()),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

/// Clip, smooth and rescale the template and the selected subjects.
pub fn cmd_preprocess(cfg: &PipelineConfig, only: Option<&str>) -> Result<()> {
    let subjects = cfg.selected(only)?;
    let template = cfg.resolve(&cfg.paths.template);
    require_file(&template)?;
    for s in &subjects {
        require_file(&cfg.resolve(&s.volume))?;
    }
    let mut jobs = vec![(template, cfg.preprocessed_template())];
    jobs.extend(
        subjects
            .iter()
            .map(|s| (cfg.resolve(&s.volume), cfg.preprocessed_subject(&s.id))),
    );
    for (input, output) in jobs {
        let v = preprocess(&load_volume(&input)?, &cfg.preprocess)?;
        ensure_parent(&output)?;
        save_volume(&v, &output)?;
        log::info!("preprocessed {} -> {}", input.display(), output.display());
    }
    Ok(())
}

/// Sidecar describing how the model in `model/` was produced.
#[derive(Serialize)]
struct TrainSidecar<'a> {
    learner: &'a str,
    training_subjects: &'a [String],
    training: &'a TrainingConfig,
    features: &'a FeatureSpec,
    rf: Option<&'a RandomForestParams>,
    bdt: Option<&'a BoostedTreesParams>,
}

/// Builds decile labels on the training subjects, samples feature vectors
/// and trains the configured learner.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let ids = cfg.training_subjects();
    if ids.is_empty() {
        return Err(Error::Config("no training subjects configured".into()));
    }
    // Check every landmark file before any expensive work.
    for id in &ids {
        if cfg.subject(id)?.landmarks.is_none() {
            return Err(Error::Config(format!("training subject {id:?} has no landmarks")));
        }
    }
    let mut entries = Vec::new();
    for id in &ids {
        let s = cfg.subject(id)?;
        let lms = match &s.landmarks {
            Some(p) => {
                let p = cfg.resolve(p);
                require_file(&p)?;
                LandmarkSet::read_csv(&p)?
            }
            None => return Err(Error::Config(format!("training subject {id:?} has no landmarks"))),
        };
        let subject = cfg.preprocessed_subject(id);
        require_file(&subject)?;
        entries.push((id.clone(), subject, lms));
    }
    let template_path = cfg.preprocessed_template();
    require_file(&template_path)?;
    let template = load_volume(&template_path)?;

    let mut pairs = Vec::new();
    for (id, path, lms) in &entries {
        let subject = load_volume(path)?;
        pairs.push((id.clone(), make_training_pair(&subject, &template, lms)?));
    }
    let pooled: Vec<(&Volume, &Volume)> = pairs
        .iter()
        .map(|(_, p)| (&p.template_in_subject, &p.mask))
        .collect();
    let bins = compute_bins_pooled(&pooled, DEFAULT_N_BINS)?;
    let mut labelled = Vec::new();
    for (id, p) in pairs {
        let labels = make_label_volume(&p.template_in_subject, &bins, &p.mask)?;
        labelled.push(LabelledSubject {
            id,
            subject: p.subject,
            labels,
            mask: p.mask,
        });
    }
    let seed = cfg.training.seed;
    let ts = sample_training(&labelled, cfg.training.n_samples, &cfg.features, bins.n_bins(), seed)?;
    log::info!("sampled {} training vectors of dimension {}", ts.len(), ts.dim());

    let dir = cfg.model_dir();
    ensure_dir(&dir)?;
    write_provenance(&ts, &labelled, &dir.join("training_samples.csv"))?;

    let (model, rf, bdt): (TreeEnsemble, _, _) = match cfg.learner.kind {
        LearnerKind::Rf => {
            let p = RandomForestParams {
                seed,
                ..cfg.learner.rf.clone()
            };
            let m = train_random_forest(&ts, &p)?;
            (m.into(), Some(p), None)
        }
        LearnerKind::Bdt => {
            let p = BoostedTreesParams {
                seed,
                ..cfg.learner.bdt.clone()
            };
            let (m, trace) = train_boosted_trees_traced(&ts, &p)?;
            let mut csv = String::from("class,iteration,loss\n");
            for (c, losses) in trace.iter().enumerate() {
                for (it, l) in losses.iter().enumerate() {
                    log::debug!("class {c} iteration {it}: loss {l}");
                    csv.push_str(&format!("{c},{it},{l}\n"));
                }
            }
            write_atomic(&dir.join("train_loss.csv"), csv.as_bytes())?;
            (m.into(), None, Some(p))
        }
    };
    save_model(&model, cfg.model_path())?;
    bins.save(cfg.bins_path())?;
    let sidecar = TrainSidecar {
        learner: cfg.learner.kind.name(),
        training_subjects: &ids,
        training: &cfg.training,
        features: &cfg.features,
        rf: rf.as_ref(),
        bdt: bdt.as_ref(),
    };
    let text = toml::to_string(&sidecar).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("train.toml"), text.as_bytes())?;
    log::info!("trained {} trees", model.n_trees());
    Ok(())
}

fn write_provenance(
    ts: &crate::features::TrainingSet,
    subjects: &[LabelledSubject],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("subject,voxel,i,j,k,label\n");
    for (n, (id, idx)) in ts.provenance.iter().enumerate() {
        let s = subjects
            .iter()
            .find(|s| &s.id == id)
            .expect("provenance refers to a sampled subject");
        let [i, j, k] = s.subject.geometry().coords(*idx);
        out.push_str(&format!("{id},{idx},{i},{j},{k},{}\n", ts.labels()[n]));
    }
    write_atomic(path, out.as_bytes())
}

/// Applies the trained model to every voxel of the selected subjects.
pub fn cmd_synth(cfg: &PipelineConfig, only: Option<&str>) -> Result<()> {
    let subjects = cfg.selected(only)?;
    require_file(&cfg.model_path())?;
    require_file(&cfg.bins_path())?;
    let model = load_model(cfg.model_path())?;
    let bins = BinSpec::load(cfg.bins_path())?;
    let expected = match model.kind() {
        EnsembleKind::RandomForest => LearnerKind::Rf,
        EnsembleKind::BoostedTrees => LearnerKind::Bdt,
    };
    if expected != cfg.learner.kind {
        return Err(Error::Config(format!(
            "model file holds a {} model but learner.kind is {}",
            expected.name(),
            cfg.learner.kind.name()
        )));
    }
    for s in subjects {
        let input = cfg.preprocessed_subject(&s.id);
        require_file(&input)?;
        let v = synthesize(&load_volume(&input)?, &model, &cfg.features, &bins)?;
        let out = cfg.synth_path(&s.id);
        ensure_parent(&out)?;
        save_volume(&v, &out)?;
        log::info!("synthesized {}", s.id);
    }
    Ok(())
}

/// Per-subject outcome of the `register` command.
#[derive(Debug)]
pub struct RegisterOutcome {
    pub subject: String,
    /// `Ok(failed)` when a result was written, `Err` when the run aborted.
    pub status: std::result::Result<bool, String>,
}

/// Registers each selected subject (or its synthesized image) to the
/// template. A subject that errors is logged, its error written next to
/// where the result would be, and the loop continues.
pub fn cmd_register(cfg: &PipelineConfig, mode: Mode, only: Option<&str>) -> Result<Vec<RegisterOutcome>> {
    let subjects = cfg.selected(only)?;
    let template_path = cfg.preprocessed_template();
    require_file(&template_path)?;
    let fixed = load_volume(&template_path)?;
    let mut outcomes = Vec::new();
    for s in subjects {
        let prefix = cfg.registration_prefix(mode, &s.id);
        ensure_parent(&prefix)?;
        let error_path = error_marker(&prefix);
        let run = || -> Result<RegistrationResult> {
            let input = match mode {
                Mode::Baseline => cfg.preprocessed_subject(&s.id),
                Mode::Synth => cfg.synth_path(&s.id),
            };
            require_file(&input)?;
            let moving = load_volume(&input)?;
            let r = register(
                &fixed,
                &moving,
                cfg.registration.cost,
                &cfg.registration.options,
                &AffineTransform3D::identity(),
            )?;
            r.save(&prefix)?;
            Ok(r)
        };
        let status = match run() {
            Ok(r) => {
                if error_path.exists() {
                    std::fs::remove_file(&error_path).map_err(|e| Error::io(&error_path, e))?;
                }
                log::info!(
                    "registered {} ({}): cost {}, failed {}",
                    s.id,
                    mode.name(),
                    r.final_cost,
                    r.failed
                );
                Ok(r.failed)
            }
            Err(e) => {
                log::warn!("registration of {} ({}) aborted: {e}", s.id, mode.name());
                write_atomic(&error_path, format!("{e}\n").as_bytes())?;
                Err(e.to_string())
            }
        };
        outcomes.push(RegisterOutcome {
            subject: s.id.clone(),
            status,
        });
    }
    Ok(outcomes)
}

fn error_marker(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push("_error.txt");
    PathBuf::from(s)
}

/// Success tally of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct Tally {
    pub method: String,
    pub n_success: usize,
    pub n_total: usize,
}

/// Landmark errors of every registered subject in both modes, written as a
/// report. Subjects without landmarks are skipped; a mode is included once
/// its registration directory exists. Missing or unreadable results count as
/// failed runs.
pub fn cmd_evaluate(cfg: &PipelineConfig, only: Option<&str>) -> Result<Vec<Tally>> {
    let subjects = cfg.selected(only)?;
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut tallies = Vec::new();
    for mode in [Mode::Baseline, Mode::Synth] {
        let dir = cfg.output_dir().join("registration").join(mode.name());
        if !dir.is_dir() {
            continue;
        }
        let method = cfg.method_name(mode);
        let mut summaries = Vec::new();
        for s in &subjects {
            let Some(lms) = cfg.landmarks_of(s)? else {
                log::warn!("subject {} has no landmarks; not evaluated", s.id);
                continue;
            };
            let summary = match RegistrationResult::load(cfg.registration_prefix(mode, &s.id)) {
                Ok(r) => {
                    // Results map template points to subject points.
                    let recs = landmark_error(&r, &lms.swapped(), &s.id, &method);
                    let mut summary = if recs.is_empty() {
                        ErrorSummary::failed()
                    } else {
                        summarize(&recs)?
                    };
                    summary.failed |= r.failed;
                    records.extend(recs);
                    summary
                }
                Err(e) => {
                    log::warn!("no usable {} result for {}: {e}", mode.name(), s.id);
                    ErrorSummary::failed()
                }
            };
            summaries.push((s.id.clone(), summary));
        }
        let (n_success, n_total) = tally_success(&summaries, cfg.evaluation.threshold_um);
        tallies.push(Tally {
            method: method.clone(),
            n_success,
            n_total,
        });
        rows.extend(summaries.into_iter().map(|(subject, summary)| SummaryRow {
            subject,
            method: method.clone(),
            summary,
        }));
    }
    emit_report(&records, &rows, cfg.report_dir())?;
    Ok(tallies)
}

/// Generates a phantom suite sharing one template into `phantom.dir`.
pub fn cmd_phantom(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.resolve(&cfg.phantom.dir);
    ensure_dir(&dir)?;
    let suite = generate_suite(&cfg.phantom.params, &cfg.phantom.gammas)?;
    if let Some(first) = suite.first() {
        save_volume(&first.template, dir.join("template.nrrd"))?;
    }
    for (i, pair) in suite.iter().enumerate() {
        let stem = format!("subject_{}", i + 1);
        save_volume(&pair.subject, dir.join(format!("{stem}.nrrd")))?;
        save_volume(&pair.true_label_volume, dir.join(format!("{stem}_labels.nrrd")))?;
        pair.landmarks.write_csv(dir.join(format!("{stem}_landmarks.csv")))?;
        let toml = toml::to_string(&pair.params).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(format!("{stem}_params.toml")), toml.as_bytes())?;
    }
    log::info!("wrote {} phantom pairs to {}", suite.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[paths]
template = "t.nrrd"

[[subjects]]
id = "a"
volume = "a.nrrd"
landmarks = "a.csv"

[[subjects]]
id = "b"
volume = "b.nrrd"
"#;

    #[test]
    fn defaults_apply() {
        let cfg = PipelineConfig::from_toml(MINIMAL, "/base").unwrap();
        assert_eq!(cfg.training.n_samples, 200_000);
        assert_eq!(cfg.training_subjects(), vec!["a".to_string(), "b".to_string()]);
        assert_eq!(cfg.output_dir(), PathBuf::from("/base/out"));
        assert_eq!(cfg.method_name(Mode::Baseline), "baseline-CC");
        assert_eq!(cfg.method_name(Mode::Synth), "rf-CC");
    }

    #[test]
    fn unknown_training_subject_rejected() {
        let text = format!("{MINIMAL}\n[training]\nsubjects = [\"zz\"]\n");
        let e = PipelineConfig::from_toml(&text, ".").unwrap_err();
        assert_eq!(exit_code(&e), 1);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{MINIMAL}\n[evaluation]\nthreshold = 3.0\n");
        assert!(matches!(PipelineConfig::from_toml(&text, "."), Err(Error::Config(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Synth".parse::<Mode>().unwrap(), Mode::Synth);
        assert!("other".parse::<Mode>().is_err());
    }
}
