//! Sample ghosts of a trained model and calibrate Λ by the accuracy-drop rule.

use ghostnet::dataio::{gen_synthetic, Split, Task};
use ghostnet::erosion::{calibrate_lambda, sample_ghost, CalibrationConfig, ErosionKind, ErosionSpec};
use ghostnet::network::{build, train, Classifier, NoErosion, Preset, TrainConfig};

fn main() {
    let data = gen_synthetic(Task::Digits8x8, 3000, 0.1, 0).unwrap();
    let val = data.split(Split::Val);
    for preset in [Preset::PlainMlp, Preset::ResMlp] {
        let net = train(
            build(preset.spec(preset.name(), &data.sample_shape, data.classes), 1).unwrap(),
            &data,
            &TrainConfig::default(),
        )
        .unwrap();
        let kind = ErosionKind::default_for(&net);
        let cal = calibrate_lambda(&net, &data, &CalibrationConfig::new(kind, 7)).unwrap();
        println!(
            "{} ({kind}): base acc {:.4}, Λ = {} (crossed {})",
            preset.name(),
            cal.base_accuracy,
            cal.magnitude,
            cal.crossed
        );
        for p in cal.curve.iter().step_by((cal.curve.len() / 8).max(1)) {
            println!("    Λ {:<6} ghost acc {:.4}", p.magnitude, p.accuracy);
        }

        let spec = ErosionSpec::new(kind, cal.magnitude, 7);
        let batch = val.all();
        let base = net.predict(&batch).unwrap();
        for draw in 0..3 {
            let ghost = sample_ghost(&net, &spec, draw).unwrap();
            let pred = ghost.predict(&batch).unwrap();
            let agree = pred.iter().zip(&base).filter(|(a, b)| a == b).count() as f64 / base.len() as f64;
            println!("    {}  agrees with base on {:.1}%", ghost.model_id(), 100.0 * agree);
        }
        let identity = sample_ghost(&net, &spec.with_magnitude(0.0), 0).unwrap();
        assert_eq!(identity.logits(&batch).unwrap(), net.forward_with(&batch, &NoErosion).unwrap());
    }
}
