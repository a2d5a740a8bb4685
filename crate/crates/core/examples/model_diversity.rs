//! Pairwise JSD between ghosts of one model vs independently trained models.

use ghostnet::dataio::{gen_synthetic, Split, Task};
use ghostnet::erosion::{calibrate_lambda, sample_ghost, CalibrationConfig, ErosionKind, ErosionSpec};
use ghostnet::evaluation::{diversity_matrix, jsd};
use ghostnet::network::{build, train, Classifier, Preset, TrainConfig, TrainedNetwork};

fn main() {
    println!("jsd((1,0), (.5,.5)) = {:.6} nats", jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap());

    let data = gen_synthetic(Task::Digits8x8, 3000, 0.1, 0).unwrap();
    let val = data.split(Split::Val);
    let models: Vec<TrainedNetwork> = (0..3)
        .map(|s| {
            let spec = Preset::ResMlp.spec(&format!("res-{s}"), &data.sample_shape, data.classes);
            train(build(spec, s).unwrap(), &data, &TrainConfig { seed: s, ..TrainConfig::default() }).unwrap()
        })
        .collect();
    let cal = calibrate_lambda(&models[0], &data, &CalibrationConfig::new(ErosionKind::Skip, 1)).unwrap();
    let spec = ErosionSpec::new(ErosionKind::Skip, cal.magnitude, 1);
    let ghosts: Vec<_> = (0..3).map(|d| sample_ghost(&models[0], &spec, d).unwrap()).collect();

    let indep: Vec<&dyn Classifier> = models.iter().map(|m| m as &dyn Classifier).collect();
    let ghost_refs: Vec<&dyn Classifier> = ghosts.iter().map(|g| g as &dyn Classifier).collect();
    let a = diversity_matrix(&indep, &val).unwrap();
    let b = diversity_matrix(&ghost_refs, &val).unwrap();
    print!("independent models:\n{}", a.to_csv("model"));
    print!("skip ghosts (Λ={}):\n{}", cal.magnitude, b.to_csv("model"));
    println!(
        "mean pairwise JSD: independent {:.5}, ghosts {:.5}",
        a.off_diagonal_mean(),
        b.off_diagonal_mean()
    );
}
