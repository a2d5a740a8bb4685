//! Command-line front end. Every command writes its artifacts plus a
//! manifest under the output root; failures print one JSON error record on
//! stderr and exit nonzero.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::attack::{run_attack, AttackConfig, AttackMethod};
use crate::dataio::{gen_synthetic, Dataset, Provenance, Split, Task};
use crate::ensemble::{make_grad_provider, EnsemblePlan, ModelType, PlanMember, PlanSpec};
use crate::erosion::{calibrate_lambda, sample_ghost, CalibrationConfig, ErosionKind, ErosionSpec};
use crate::evaluation::{attack_rate, diversity_matrix, filter_dataset, EvalReport, Matrix, NamedCurve};
use crate::experiment::{
    io_err, run_experiment, sha256_hex, ExperimentConfig, ExperimentError, ExperimentPreset, FileHash, Manifest,
    Result,
};
use crate::network::{build, train, Classifier, Optimizer, Preset, TrainConfig, TrainedNetwork};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GHOSTNET_OUT";

#[derive(Debug, Parser)]
#[command(name = "ghostnet", version, about = "Ghost-network ensembles for transferable adversarial attacks")]
pub struct Cli {
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = "ghostnet-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (GDAT).
    GenData(GenData),
    /// Train a preset network (GNET).
    Train(TrainArgs),
    /// Calibrate the erosion magnitude of a model.
    Calibrate(CalibrateArgs),
    /// Craft adversarial examples from one or more source models.
    Attack(AttackArgs),
    /// Attack rates of an adversarial set against target models.
    Evaluate(EvaluateArgs),
    /// Pairwise JSD between models (and ghosts).
    Diversity(DiversityArgs),
    /// Full chain for a named preset (s1–s5, m1–m6).
    Experiment(ExperimentArgs),
    /// Summarize every experiment report under the output root.
    Report,
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value = "digits-8x8")]
    pub task: Task,
    #[arg(long, default_value_t = 3000)]
    pub count: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// plain-mlp | res-mlp | small-cnn
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// sgd_momentum | adam
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<Optimizer>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// dropout | skip | both; defaults by architecture.
    #[arg(long)]
    pub kind: Option<ErosionKind>,
    #[arg(long, default_value_t = 0.10)]
    pub target_drop: f64,
    #[arg(long, default_value_t = 20)]
    pub ghosts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Source models, in base order.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Extra models the clean set must be correct under.
    #[arg(long = "filter-model")]
    pub filter_models: Vec<PathBuf>,
    /// Plan shape taken from a named preset.
    #[arg(long, default_value = "s1")]
    pub preset: ExperimentPreset,
    /// Erosion magnitude per source model (one value applies to all).
    #[arg(long = "magnitude")]
    pub magnitudes: Vec<f64>,
    #[arg(long)]
    pub kind: Option<ErosionKind>,
    #[arg(long, default_value = "i-fgsm")]
    pub method: AttackMethod,
    #[arg(long, default_value_t = 8)]
    pub epsilon: u32,
    #[arg(long, default_value_t = 1.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub adversarial: PathBuf,
    /// Target models.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Replace the model list by this many ghosts of the first model.
    #[arg(long)]
    pub ghosts: Option<usize>,
    #[arg(long)]
    pub kind: Option<ErosionKind>,
    #[arg(long)]
    pub magnitude: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// s1–s5 | m1–m6
    pub name: Option<String>,
    /// Same as the positional preset.
    #[arg(long, conflicts_with = "name")]
    pub preset: Option<String>,
    /// JSON config (or a manifest to re-run); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<u32>,
    #[arg(long)]
    pub max_images: Option<usize>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown network preset `{s}`"))
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown optimizer `{s}`"))
}

fn load_model(path: &Path) -> Result<TrainedNetwork> {
    if !path.exists() {
        return Err(ExperimentError::MissingModel(path.to_path_buf()));
    }
    Ok(TrainedNetwork::load(path)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializes") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn hashes(paths: &[&Path], root: &Path) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| FileHash::of(p, root)).collect()
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    create_dir(&out)?;
    match cli.command {
        Command::GenData(a) => {
            let data = gen_synthetic(a.task, a.count, a.noise, a.seed)?;
            let dir = out.join("data");
            create_dir(&dir)?;
            let path = dir.join(format!("{}-{}.gdat", a.task.name(), a.seed));
            data.save(&path)?;
            let mut m = Manifest::new("gen-data", json!({"task": a.task, "count": a.count, "noise": a.noise}));
            m.seeds.insert("data".into(), a.seed);
            m.outputs = hashes(&[&path], &out)?;
            m.metrics = json!({"class_histogram": data.class_histogram()});
            m.write(&dir.join(format!("{}-{}.manifest.json", a.task.name(), a.seed)))?;
            println!("{}", path.display());
        }
        Command::Train(a) => {
            let data = load_data(&a.data)?;
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                seed: a.seed,
                epochs: a.epochs.unwrap_or(defaults.epochs),
                learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
                optimizer: a.optimizer.unwrap_or(defaults.optimizer),
                ..defaults
            };
            let spec = a.preset.spec(&a.name, &data.sample_shape, data.classes);
            let net = train(build(spec, a.seed)?, &data, &cfg)?;
            let dir = out.join("models");
            create_dir(&dir)?;
            let path = dir.join(format!("{}.gnet", a.name));
            net.save(&path)?;
            let val = data.split(Split::Val);
            let accuracy = net.accuracy_with(&val.all(), val.labels(), &crate::network::NoErosion)?;
            let mut m = Manifest::new("train", json!({"preset": a.preset, "training": cfg}));
            m.seeds.insert("init".into(), a.seed);
            m.inputs = hashes(&[&a.data], &out)?;
            m.outputs = hashes(&[&path], &out)?;
            m.metrics = json!({"model_id": net.id(), "val_accuracy": accuracy});
            m.write(&dir.join(format!("{}.manifest.json", a.name)))?;
            println!("{} val_accuracy={accuracy:.4}", path.display());
        }
        Command::Calibrate(a) => {
            let net = load_model(&a.model)?;
            let data = load_data(&a.data)?;
            let kind = a.kind.unwrap_or_else(|| ErosionKind::default_for(&net));
            let cfg = CalibrationConfig {
                target_drop: a.target_drop,
                ghosts: a.ghosts,
                ..CalibrationConfig::new(kind, a.seed)
            };
            let cal = calibrate_lambda(&net, &data, &cfg)?;
            let dir = out.join("calibration");
            create_dir(&dir)?;
            let stem = net.spec().name.clone();
            let report = EvalReport {
                accuracy_curves: vec![NamedCurve {
                    model: net.id(),
                    calibration: cal.clone(),
                }],
                config_fingerprint: sha256_hex(serde_json::to_string(&cfg).expect("serializes").as_bytes()),
                ..EvalReport::default()
            };
            let written = report.write(&dir, &stem)?;
            let spec_path = dir.join(format!("{stem}.erosion.json"));
            write_json(&spec_path, &ErosionSpec::new(kind, cal.magnitude, a.seed))?;
            let mut m = Manifest::new("calibrate", serde_json::to_value(&cfg).expect("serializes"));
            m.seeds.insert("erosion".into(), a.seed);
            m.inputs = hashes(&[&a.model, &a.data], &out)?;
            let mut outputs: Vec<&Path> = written.iter().map(|p| p.as_path()).collect();
            outputs.push(&spec_path);
            m.outputs = hashes(&outputs, &out)?;
            m.metrics = json!({"magnitude": cal.magnitude, "crossed": cal.crossed, "base_accuracy": cal.base_accuracy});
            m.write(&dir.join(format!("{stem}.manifest.json")))?;
            println!("{stem} {kind} Λ={} crossed={}", cal.magnitude, cal.crossed);
        }
        Command::Attack(a) => {
            let data = load_data(&a.data)?;
            let sources = a.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let extra = a.filter_models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let plan: PlanSpec = a.preset.plan();
            let erosions: Vec<Option<ErosionSpec>> = if plan.model_type == ModelType::Ghost {
                if a.magnitudes.is_empty() {
                    return Err(ExperimentError::Config(
                        "ghost plans need --magnitude (see the calibrate command)".into(),
                    ));
                }
                sources
                    .iter()
                    .enumerate()
                    .map(|(i, net)| {
                        let magnitude = *a.magnitudes.get(i).unwrap_or(&a.magnitudes[0]);
                        let kind = a.kind.unwrap_or_else(|| ErosionKind::default_for(net));
                        Some(ErosionSpec::new(kind, magnitude, a.seed.wrapping_add(i as u64)))
                    })
                    .collect()
            } else {
                vec![None; sources.len()]
            };
            let filter: Vec<&dyn Classifier> =
                sources.iter().chain(&extra).map(|m| m as &dyn Classifier).collect();
            let filtered = filter_dataset(&data.split(Split::Attack), &filter)?;
            let members = sources
                .iter()
                .zip(&erosions)
                .map(|(net, erosion)| PlanMember {
                    net,
                    erosion: erosion.clone(),
                })
                .collect();
            let ensemble = EnsemblePlan::from_spec(members, &plan)?;
            let cfg = AttackConfig {
                momentum: a.momentum,
                seed: a.seed,
                ..AttackConfig::new(a.method, a.epsilon)
            };
            let provider = make_grad_provider(&ensemble, &cfg)?;
            let adv = run_attack(&filtered.dataset.all(), filtered.dataset.labels(), &provider, &cfg)?;
            let mut adversarial = filtered.dataset.with_samples(adv.into_data())?;
            adversarial.provenance = Some(Provenance {
                source_models: sources.iter().map(|m| m.id()).collect(),
                attack: serde_json::to_value(&cfg).expect("serializes"),
                plan_fingerprint: sha256_hex(
                    serde_json::to_string(&(&plan, &erosions)).expect("serializes").as_bytes(),
                ),
            });
            let dir = out.join("adversarial");
            create_dir(&dir)?;
            let stem = format!("{}-{}-eps{}", a.preset, a.method, a.epsilon);
            let path = dir.join(format!("{stem}.gdat"));
            adversarial.save(&path)?;
            let mut m = Manifest::new(
                "attack",
                json!({"plan": plan, "attack": cfg, "erosion": erosions}),
            );
            m.seeds.insert("attack".into(), a.seed);
            let mut inputs: Vec<&Path> = vec![&a.data];
            inputs.extend(a.models.iter().map(|p| p.as_path()));
            m.inputs = hashes(&inputs, &out)?;
            m.outputs = hashes(&[&path], &out)?;
            m.metrics = json!({
                "images": adversarial.len(),
                "filtered_from": filtered.total,
                "intrinsic_models": plan.intrinsic_models(),
                "computational_cost": plan.computational_cost(),
            });
            m.write(&dir.join(format!("{stem}.manifest.json")))?;
            println!("{} images={}", path.display(), adversarial.len());
        }
        Command::Evaluate(a) => {
            let adv = load_data(&a.adversarial)?;
            let targets = a.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let sources = adv.provenance.as_ref().map(|p| p.source_models.clone()).unwrap_or_default();
            let batch = adv.all();
            let rates = targets
                .iter()
                .map(|t| attack_rate(&batch, adv.labels(), t))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let black: Vec<f64> = targets
                .iter()
                .zip(&rates)
                .filter(|(t, _)| !sources.contains(&t.id()))
                .map(|(_, r)| *r)
                .collect();
            let black_mean = black.iter().sum::<f64>() / black.len().max(1) as f64;
            let stem = a
                .adversarial
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "evaluation".into());
            let report = EvalReport {
                config_fingerprint: sha256_hex(&std::fs::read(&a.adversarial).map_err(io_err(&a.adversarial))?),
                attack_rates: Some(Matrix {
                    rows: vec![stem.clone()],
                    cols: targets.iter().map(|t| t.id()).collect(),
                    values: vec![rates.clone()],
                }),
                sample_counts: vec![adv.len()],
                black_box_means: vec![black_mean],
                ..EvalReport::default()
            };
            let dir = out.join("evaluation");
            create_dir(&dir)?;
            let written = report.write(&dir, &stem)?;
            let mut m = Manifest::new("evaluate", json!({"sources": sources}));
            let mut inputs: Vec<&Path> = vec![&a.adversarial];
            inputs.extend(a.models.iter().map(|p| p.as_path()));
            m.inputs = hashes(&inputs, &out)?;
            m.outputs = hashes(&written.iter().map(|p| p.as_path()).collect::<Vec<_>>(), &out)?;
            m.metrics = json!({"rates": rates, "black_box_mean": black_mean});
            m.write(&dir.join(format!("{stem}.manifest.json")))?;
            for (t, r) in targets.iter().zip(&rates) {
                let tag = if sources.contains(&t.id()) { "white-box" } else { "black-box" };
                println!("{} {tag} {:.4}", t.id(), r);
            }
            println!("mean black-box {black_mean:.4}");
        }
        Command::Diversity(a) => {
            let data = load_data(&a.data)?.split(Split::Val);
            let models = a.models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let matrix = match a.ghosts {
                Some(k) => {
                    let base = &models[0];
                    let kind = a.kind.unwrap_or_else(|| ErosionKind::default_for(base));
                    let magnitude = a.magnitude.ok_or_else(|| {
                        ExperimentError::Config("--ghosts needs --magnitude".into())
                    })?;
                    let spec = ErosionSpec::new(kind, magnitude, a.seed);
                    let ghosts = (0..k as u64)
                        .map(|d| sample_ghost(base, &spec, d))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let refs: Vec<&dyn Classifier> = ghosts.iter().map(|g| g as &dyn Classifier).collect();
                    diversity_matrix(&refs, &data)?
                }
                None => {
                    let refs: Vec<&dyn Classifier> = models.iter().map(|m| m as &dyn Classifier).collect();
                    diversity_matrix(&refs, &data)?
                }
            };
            let mean = matrix.off_diagonal_mean();
            let report = EvalReport {
                diversity: Some(matrix),
                ..EvalReport::default()
            };
            let dir = out.join("diversity");
            create_dir(&dir)?;
            let written = report.write(&dir, "diversity")?;
            let mut m = Manifest::new(
                "diversity",
                json!({"ghosts": a.ghosts, "kind": a.kind, "magnitude": a.magnitude}),
            );
            m.seeds.insert("erosion".into(), a.seed);
            let mut inputs: Vec<&Path> = vec![&a.data];
            inputs.extend(a.models.iter().map(|p| p.as_path()));
            m.inputs = hashes(&inputs, &out)?;
            m.outputs = hashes(&written.iter().map(|p| p.as_path()).collect::<Vec<_>>(), &out)?;
            m.metrics = json!({"mean_pairwise_jsd": mean});
            m.write(&dir.join("diversity.manifest.json"))?;
            println!("mean pairwise JSD {mean:.6} nats");
        }
        Command::Experiment(a) => {
            let named = a.name.or(a.preset).map(|s| s.parse::<ExperimentPreset>()).transpose()?;
            let mut config = match &a.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::desk(named.unwrap_or(ExperimentPreset::S1), 0),
            };
            if let Some(p) = named {
                config = config.with_preset(p);
            }
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if let Some(eps) = a.epsilon {
                config.attack.epsilon = eps;
            }
            if a.max_images.is_some() {
                config.max_images = a.max_images;
            }
            let outcome = run_experiment(&config, &out)?;
            let tag = config.preset.map(|p| p.name()).unwrap_or("custom");
            println!(
                "{tag}: #I={} CC={} images={}",
                config.plan.intrinsic_models(),
                config.plan.computational_cost(),
                outcome.report.summary["attacked_images"]
            );
            for (method, rate) in outcome.report.summary["mean_black_box"].as_object().into_iter().flatten() {
                println!("  {method} mean black-box {:.4}", rate.as_f64().unwrap_or(f64::NAN));
            }
        }
        Command::Report => {
            let (csv, md, count) = summarize(&out)?;
            let csv_path = out.join("summary.csv");
            let md_path = out.join("summary.md");
            std::fs::write(&csv_path, &csv).map_err(io_err(&csv_path))?;
            std::fs::write(&md_path, &md).map_err(io_err(&md_path))?;
            let mut m = Manifest::new("report", json!({}));
            m.outputs = hashes(&[&csv_path, &md_path], &out)?;
            m.metrics = json!({"experiments": count});
            m.write(&out.join("summary.manifest.json"))?;
            print!("{md}");
        }
    }
    Ok(())
}

/// Collects `<out>/<preset>/report.json` files into CSV and Markdown tables.
pub fn summarize(out: &Path) -> Result<(String, String, usize)> {
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(out).map_err(io_err(out))?;
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("report.json");
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| ExperimentError::Schema {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let s = &report.summary;
        let rate = |m: &str| s["mean_black_box"].get(m).and_then(|v| v.as_f64());
        rows.push((
            name,
            s["intrinsic_models"].clone(),
            s["computational_cost"].clone(),
            rate("i-fgsm"),
            rate("mi-fgsm"),
            s["attacked_images"].clone(),
        ));
    }
    let pct = |v: Option<f64>| v.map(|r| format!("{:.2}", 100.0 * r)).unwrap_or_else(|| "-".into());
    let mut csv = String::from("experiment,intrinsic_models,computational_cost,ifgsm_black_box,mifgsm_black_box,images\n");
    let mut md = String::from(
        "| experiment | #I | CC | I-FGSM black-box % | MI-FGSM black-box % | images |\n|---|---|---|---|---|---|\n",
    );
    for (name, i, cc, a, b, n) in &rows {
        let num = |v: Option<f64>| v.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!("{name},{i},{cc},{},{},{n}\n", num(*a), num(*b)));
        md.push_str(&format!("| {name} | {i} | {cc} | {} | {} | {n} |\n", pct(*a), pct(*b)));
    }
    Ok((csv, md, rows.len()))
}

/// Machine-readable failure record.
pub fn error_record(err: &ExperimentError) -> serde_json::Value {
    json!({"error": err.kind(), "message": err.to_string()})
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            1
        }
    }
}
