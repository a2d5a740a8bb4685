//! End-to-end experiments: data → base models → Λ calibration → attacks →
//! attack-rate report, plus the named presets and the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{default_iterations, run_attack, AttackConfig, AttackError, AttackMethod};
use crate::dataio::{gen_synthetic, DataError, Dataset, Provenance, Split, Task};
use crate::ensemble::{make_grad_provider, EnsemblePlan, ModelType, PlanError, PlanMember, PlanSpec};
use crate::erosion::{calibrate_lambda, Calibration, CalibrationConfig, ErosionError, ErosionKind, ErosionSpec};
use crate::evaluation::{attack_rate, filter_dataset, EvalError, EvalReport, Matrix, NamedCurve, Timing};
use crate::network::{build, train, Classifier, NetworkError, Preset, TrainConfig, TrainedNetwork};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment preset `{0}` (expected s1-s5 or m1-m6)")]
    UnknownPreset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: config does not match the schema: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("missing model file {0}")]
    MissingModel(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Erosion(#[from] ErosionError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::UnknownPreset(_) => "unknown_preset",
            ExperimentError::Config(_) => "config",
            ExperimentError::Schema { .. } => "schema_mismatch",
            ExperimentError::MissingModel(_) => "missing_model",
            ExperimentError::Data(_) => "data",
            ExperimentError::Network(_) => "network",
            ExperimentError::Erosion(_) => "erosion",
            ExperimentError::Plan(_) => "plan",
            ExperimentError::Attack(_) => "attack",
            ExperimentError::Eval(_) => "evaluation",
            ExperimentError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Named rows of the single-model (s) and multi-model (m) grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentPreset {
    S1,
    S2,
    S3,
    S4,
    S5,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

pub const ALL_PRESETS: [ExperimentPreset; 11] = [
    ExperimentPreset::S1,
    ExperimentPreset::S2,
    ExperimentPreset::S3,
    ExperimentPreset::S4,
    ExperimentPreset::S5,
    ExperimentPreset::M1,
    ExperimentPreset::M2,
    ExperimentPreset::M3,
    ExperimentPreset::M4,
    ExperimentPreset::M5,
    ExperimentPreset::M6,
];

impl ExperimentPreset {
    /// `(model type, #B, #S, #L)`.
    pub fn plan(self) -> PlanSpec {
        use ExperimentPreset::*;
        use ModelType::{Base, Ghost};
        let (t, b, s, l) = match self {
            S1 => (Base, 1, 1, 1),
            S2 => (Ghost, 1, 1, 1),
            S3 => (Ghost, 1, 1, 10),
            S4 => (Ghost, 1, 10, 1),
            S5 => (Ghost, 1, 10, 10),
            M1 => (Base, 1, 1, 1),
            M2 => (Base, 3, 3, 1),
            M3 => (Ghost, 1, 3, 1),
            M4 => (Ghost, 3, 3, 1),
            M5 => (Ghost, 1, 3, 10),
            M6 => (Ghost, 3, 3, 10),
        };
        PlanSpec::new(t, b, s, l)
    }

    pub fn name(self) -> &'static str {
        use ExperimentPreset::*;
        match self {
            S1 => "s1",
            S2 => "s2",
            S3 => "s3",
            S4 => "s4",
            S5 => "s5",
            M1 => "m1",
            M2 => "m2",
            M3 => "m3",
            M4 => "m4",
            M5 => "m5",
            M6 => "m6",
        }
    }
}

impl fmt::Display for ExperimentPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentPreset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        ALL_PRESETS
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ExperimentError::UnknownPreset(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub task: Task,
    pub count: usize,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    /// May serve as an attack source; black-box target otherwise.
    Base,
    /// Only ever attacked.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub preset: Preset,
    pub role: ModelRole,
    /// Erosion used for this model's ghosts; by default skip erosion for
    /// residual networks and dropout erosion otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erosion: Option<ErosionKind>,
    /// Fixed Λ; calibrated by the accuracy-drop rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    pub target_drop: f64,
    pub ghosts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    pub methods: Vec<AttackMethod>,
    pub epsilon: u32,
    /// Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Defaults to `min(ε + 4, ceil(1.25 ε))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub momentum: f64,
}

impl AttackSettings {
    pub fn config(&self, method: AttackMethod, seed: u64) -> AttackConfig {
        AttackConfig {
            method,
            epsilon: self.epsilon,
            alpha: self.alpha.unwrap_or(1.0),
            iterations: self.iterations.unwrap_or_else(|| default_iterations(self.epsilon)),
            momentum: self.momentum,
            seed,
        }
    }
}

/// Everything that determines an experiment's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub models: Vec<ModelConfig>,
    pub training: TrainConfig,
    pub calibration: CalibrationSettings,
    pub attack: AttackSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<ExperimentPreset>,
    pub plan: PlanSpec,
    /// Attack at most this many filtered images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
}

impl ExperimentConfig {
    /// Desk-scale setup: two plain-MLP and two res-MLP base models plus a
    /// small-CNN held-out target on the digits task.
    pub fn desk(preset: ExperimentPreset, seed: u64) -> Self {
        let model = |name: &str, preset, role| ModelConfig {
            name: name.to_string(),
            preset,
            role,
            erosion: None,
            magnitude: None,
        };
        Self {
            seed,
            dataset: DatasetConfig {
                task: Task::Digits8x8,
                count: 3000,
                noise: 0.1,
            },
            models: vec![
                model("plain-a", Preset::PlainMlp, ModelRole::Base),
                model("plain-b", Preset::PlainMlp, ModelRole::Base),
                model("res-a", Preset::ResMlp, ModelRole::Base),
                model("res-b", Preset::ResMlp, ModelRole::Base),
                model("cnn-t", Preset::SmallCnn, ModelRole::Target),
            ],
            training: TrainConfig::default(),
            calibration: CalibrationSettings {
                target_drop: 0.10,
                ghosts: 20,
            },
            attack: AttackSettings {
                methods: vec![AttackMethod::Ifgsm, AttackMethod::Mifgsm],
                epsilon: 8,
                alpha: None,
                iterations: None,
                momentum: 1.0,
            },
            preset: Some(preset),
            plan: preset.plan(),
            max_images: None,
        }
    }

    pub fn with_preset(mut self, preset: ExperimentPreset) -> Self {
        self.preset = Some(preset);
        self.plan = preset.plan();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let bases = self.models.iter().filter(|m| m.role == ModelRole::Base).count();
        if bases == 0 {
            return bad("at least one base model is required".into());
        }
        if self.plan.bases > bases {
            return bad(format!("plan needs {} base models, config has {bases}", self.plan.bases));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("model names must be unique".into());
        }
        if self.attack.methods.is_empty() {
            return bad("attack.methods is empty".into());
        }
        for method in &self.attack.methods {
            self.attack.config(*method, 0).validate()?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Loads a config, or the config embedded in a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ExperimentError::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let body = match value.get("config") {
            Some(inner) if value.get("outputs").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(body).map_err(|e| ExperimentError::Schema {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Derives a child seed from the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Trained models, calibrated erosions and the filtered attack set.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub models: Vec<TrainedNetwork>,
    /// Per model; `None` for target-only models.
    pub erosions: Vec<Option<ErosionSpec>>,
    pub calibrations: Vec<Option<Calibration>>,
    pub attack_set: Dataset,
    pub filtered_from: usize,
    pub timing: Vec<Timing>,
}

impl Prepared {
    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.config.models.len())
            .filter(|&i| self.config.models[i].role == ModelRole::Base)
            .collect()
    }

    /// Source sets for a plan with `bases` base models: every cyclic window
    /// of that length over the base list.
    pub fn source_sets(&self, bases: usize) -> Vec<Vec<usize>> {
        let all = self.base_indices();
        let n = all.len();
        if bases >= n {
            return vec![all];
        }
        (0..n).map(|i| (0..bases).map(|k| all[(i + k) % n]).collect()).collect()
    }
}

fn timed<T>(timing: &mut Vec<Timing>, label: String, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timing.push(Timing {
        label,
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Generates data, trains and calibrates every model, and filters the
/// attack split to samples all models classify correctly. With `cache`,
/// artifacts are written there and reused when their inputs match.
pub fn prepare(config: &ExperimentConfig, cache: Option<&Path>) -> Result<Prepared> {
    config.validate()?;
    let mut timing = Vec::new();
    let dataset = gen_synthetic(
        config.dataset.task,
        config.dataset.count,
        config.dataset.noise,
        derive_seed(config.seed, "dataset"),
    )?;
    if let Some(dir) = cache {
        std::fs::create_dir_all(dir.join("models")).map_err(io_err(dir))?;
        dataset.save(&dir.join("dataset.gdat"))?;
    }

    let mut models = Vec::new();
    for m in &config.models {
        let seed = derive_seed(config.seed, &format!("model/{}", m.name));
        let key = sha256_hex(
            serde_json::to_string(&(&config.dataset, config.seed, m.preset, &config.training, seed))
                .expect("serializes")
                .as_bytes(),
        );
        let path = cache.map(|d| d.join("models").join(format!("{}.gnet", m.name)));
        let key_path = path.as_ref().map(|p| p.with_extension("key"));
        let cached = match (&path, &key_path) {
            (Some(p), Some(k)) if std::fs::read_to_string(k).ok().as_deref() == Some(key.as_str()) => {
                TrainedNetwork::load(p).ok()
            }
            _ => None,
        };
        let net = match cached {
            Some(net) => net,
            None => {
                let net = timed(&mut timing, format!("train/{}", m.name), || {
                    let spec = m.preset.spec(&m.name, &dataset.sample_shape, dataset.classes);
                    let cfg = TrainConfig {
                        seed,
                        ..config.training.clone()
                    };
                    Ok(train(build(spec, seed)?, &dataset, &cfg)?)
                })?;
                if let (Some(p), Some(k)) = (&path, &key_path) {
                    net.save(p)?;
                    std::fs::write(k, &key).map_err(io_err(k))?;
                }
                net
            }
        };
        models.push(net);
    }

    let mut erosions = Vec::new();
    let mut calibrations = Vec::new();
    for (m, net) in config.models.iter().zip(&models) {
        if m.role != ModelRole::Base {
            erosions.push(None);
            calibrations.push(None);
            continue;
        }
        let kind = m.erosion.unwrap_or_else(|| ErosionKind::default_for(net));
        let seed = derive_seed(config.seed, &format!("erosion/{}", m.name));
        let (magnitude, cal) = match m.magnitude {
            Some(v) => (v, None),
            None => {
                let cfg = CalibrationConfig {
                    target_drop: config.calibration.target_drop,
                    ghosts: config.calibration.ghosts,
                    ..CalibrationConfig::new(kind, seed)
                };
                let cal = timed(&mut timing, format!("calibrate/{}", m.name), || {
                    Ok(calibrate_lambda(net, &dataset, &cfg)?)
                })?;
                (cal.magnitude, Some(cal))
            }
        };
        erosions.push(Some(ErosionSpec::new(kind, magnitude, seed)));
        calibrations.push(cal);
    }

    let attack_split = dataset.split(Split::Attack);
    let refs: Vec<&dyn Classifier> = models.iter().map(|m| m as &dyn Classifier).collect();
    let filtered = filter_dataset(&attack_split, &refs)?;
    let attack_set = match config.max_images {
        Some(n) => filtered.dataset.take(n),
        None => filtered.dataset,
    };
    Ok(Prepared {
        config: config.clone(),
        dataset,
        models,
        erosions,
        calibrations,
        attack_set,
        filtered_from: filtered.total,
        timing,
    })
}

/// One attack from one source set.
#[derive(Clone, Debug)]
pub struct AttackRun {
    pub label: String,
    pub method: AttackMethod,
    pub sources: Vec<usize>,
    /// Rate on every model, in config order.
    pub rates: Vec<f64>,
    pub black_box_mean: f64,
    pub seconds: f64,
    pub adversarial: Dataset,
}

/// Attacks the filtered set with `plan` from every source set.
pub fn run_plan(prep: &Prepared, plan: &PlanSpec, method: AttackMethod, tag: &str) -> Result<Vec<AttackRun>> {
    let attack_seed = derive_seed(prep.config.seed, "attack");
    let cfg = prep.config.attack.config(method, attack_seed);
    let images = prep.attack_set.all();
    let labels = prep.attack_set.labels();
    let mut runs = Vec::new();
    for sources in prep.source_sets(plan.bases) {
        let members = sources
            .iter()
            .map(|&i| PlanMember {
                net: &prep.models[i],
                erosion: prep.erosions[i].clone(),
            })
            .collect();
        let ensemble = EnsemblePlan::from_spec(members, plan)?;
        let provider = make_grad_provider(&ensemble, &cfg)?;
        let start = Instant::now();
        let adv = run_attack(&images, labels, &provider, &cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let rates = prep
            .models
            .iter()
            .map(|m| attack_rate(&adv, labels, m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let black: Vec<f64> = (0..rates.len())
            .filter(|i| !sources.contains(i))
            .map(|i| rates[i])
            .collect();
        let black_box_mean = black.iter().sum::<f64>() / black.len().max(1) as f64;
        let source_names: Vec<String> = sources.iter().map(|&i| prep.config.models[i].name.clone()).collect();
        let mut adversarial = prep.attack_set.with_samples(adv.into_data())?;
        adversarial.provenance = Some(Provenance {
            source_models: sources.iter().map(|&i| prep.models[i].id()).collect(),
            attack: serde_json::to_value(&cfg).expect("serializes"),
            plan_fingerprint: sha256_hex(
                serde_json::to_string(&(plan, &sources.iter().map(|&i| &prep.erosions[i]).collect::<Vec<_>>()))
                    .expect("serializes")
                    .as_bytes(),
            ),
        });
        runs.push(AttackRun {
            label: format!("{tag}/{method}/{}", source_names.join("+")),
            method,
            sources,
            rates,
            black_box_mean,
            seconds,
            adversarial,
        });
    }
    Ok(runs)
}

/// Mean black-box rate over runs of one method.
pub fn mean_black_box(runs: &[AttackRun], method: AttackMethod) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.method == method).map(|r| r.black_box_mean).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Builds the report for `runs` of one plan.
pub fn build_report(prep: &Prepared, plan: &PlanSpec, runs: &[AttackRun]) -> EvalReport {
    let cols: Vec<String> = prep.models.iter().map(|m| m.id()).collect();
    let matrix = Matrix {
        rows: runs.iter().map(|r| r.label.clone()).collect(),
        cols,
        values: runs.iter().map(|r| r.rates.clone()).collect(),
    };
    let mut summary = serde_json::Map::new();
    let mut means = serde_json::Map::new();
    for method in &prep.config.attack.methods {
        means.insert(method.to_string(), mean_black_box(runs, *method).into());
    }
    summary.insert("mean_black_box".into(), means.into());
    summary.insert("intrinsic_models".into(), plan.intrinsic_models().into());
    summary.insert("computational_cost".into(), plan.computational_cost().into());
    summary.insert("attacked_images".into(), prep.attack_set.len().into());
    summary.insert("filtered_from".into(), prep.filtered_from.into());
    let lambdas: serde_json::Map<_, _> = prep
        .config
        .models
        .iter()
        .zip(&prep.erosions)
        .filter_map(|(m, e)| e.as_ref().map(|e| (m.name.clone(), serde_json::json!({"kind": e.kind, "magnitude": e.magnitude}))))
        .collect();
    summary.insert("erosion".into(), lambdas.into());
    let mut timing = prep.timing.clone();
    timing.extend(runs.iter().map(|r| Timing {
        label: format!("attack/{}", r.label),
        seconds: r.seconds,
    }));
    EvalReport {
        config_fingerprint: prep.config.fingerprint(),
        attack_rates: Some(matrix),
        sample_counts: runs.iter().map(|_| prep.attack_set.len()).collect(),
        black_box_means: runs.iter().map(|r| r.black_box_mean).collect(),
        accuracy_curves: prep
            .models
            .iter()
            .zip(&prep.calibrations)
            .filter_map(|(m, c)| {
                c.clone().map(|calibration| NamedCurve {
                    model: m.id(),
                    calibration,
                })
            })
            .collect(),
        diversity: None,
        timing,
        summary,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path, root: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.strip_prefix(root).unwrap_or(path).display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// Outcome of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub manifest: Manifest,
    pub runs: Vec<AttackRun>,
}

/// Runs the full chain for `config` and writes everything under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    let prep = prepare(config, Some(&out.join("cache")))?;
    let tag = config.preset.map(|p| p.name().to_string()).unwrap_or_else(|| "custom".into());
    let mut runs = Vec::new();
    for method in &config.attack.methods {
        runs.extend(run_plan(&prep, &config.plan, *method, &tag)?);
    }
    let report = build_report(&prep, &config.plan, &runs);

    let exp_dir = out.join(&tag);
    let adv_dir = exp_dir.join("adversarial");
    std::fs::create_dir_all(&adv_dir).map_err(io_err(&adv_dir))?;
    let mut outputs = Vec::new();
    for path in report.write(&exp_dir, "report")? {
        outputs.push(FileHash::of(&path, out)?);
    }
    for r in &runs {
        let name: String = r
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        let path = adv_dir.join(format!("{name}.gdat"));
        r.adversarial.save(&path)?;
        outputs.push(FileHash::of(&path, out)?);
    }
    let mut inputs = vec![FileHash::of(&out.join("cache").join("dataset.gdat"), out)?];
    for m in &config.models {
        inputs.push(FileHash::of(&out.join("cache").join("models").join(format!("{}.gnet", m.name)), out)?);
    }

    let mut manifest = Manifest::new(
        &format!("experiment {tag}"),
        serde_json::to_value(config).expect("config serializes"),
    );
    manifest.seeds.insert("master".into(), config.seed);
    manifest.seeds.insert("dataset".into(), derive_seed(config.seed, "dataset"));
    manifest.seeds.insert("attack".into(), derive_seed(config.seed, "attack"));
    for m in &config.models {
        manifest
            .seeds
            .insert(format!("model/{}", m.name), derive_seed(config.seed, &format!("model/{}", m.name)));
        if m.role == ModelRole::Base {
            manifest.seeds.insert(
                format!("erosion/{}", m.name),
                derive_seed(config.seed, &format!("erosion/{}", m.name)),
            );
        }
    }
    manifest.inputs = inputs;
    manifest.outputs = outputs;
    manifest.metrics = serde_json::Value::Object(report.summary.clone());
    manifest.write(&exp_dir.join("manifest.json"))?;
    Ok(ExperimentOutcome {
        report,
        manifest,
        runs,
    })
}
