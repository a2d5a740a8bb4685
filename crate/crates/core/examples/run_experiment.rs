//! Desk-scale experiment for one or more presets, sharing trained models.
//!
//!     cargo run --release --example run_experiment -- s1 s3 m2 m6

use ghostnet::experiment::{build_report, mean_black_box, prepare, run_plan, ExperimentConfig, ExperimentPreset};

fn main() {
    let presets: Vec<ExperimentPreset> = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap_or_else(|e| panic!("{e}")))
        .collect();
    let presets = if presets.is_empty() {
        vec![ExperimentPreset::S1, ExperimentPreset::S3]
    } else {
        presets
    };
    let seed = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = ExperimentConfig::desk(presets[0], seed);
    let prep = prepare(&config, None).unwrap();
    for (m, e) in config.models.iter().zip(&prep.erosions) {
        match e {
            Some(e) => println!("{:<8} {} Λ={}", m.name, e.kind, e.magnitude),
            None => println!("{:<8} target only", m.name),
        }
    }
    println!("attacking {} images (filtered from {})", prep.attack_set.len(), prep.filtered_from);
    for p in presets {
        let plan = p.plan();
        let mut runs = Vec::new();
        for method in &config.attack.methods {
            runs.extend(run_plan(&prep, &plan, *method, p.name()).unwrap());
        }
        let report = build_report(&prep, &plan, &runs);
        let rates: Vec<String> = config
            .attack
            .methods
            .iter()
            .map(|m| format!("{m} {:.2}%", 100.0 * mean_black_box(&runs, *m)))
            .collect();
        println!(
            "{p}: #I={} CC={}  black-box {}",
            report.summary["intrinsic_models"],
            report.summary["computational_cost"],
            rates.join(", ")
        );
    }
}
