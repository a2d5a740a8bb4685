use ghostnet::attack::{attack_step, run_attack, AttackConfig, AttackMethod, AttackState, ModelGrad};
use ghostnet::autodiff::Tensor;
use ghostnet::dataio::{gen_synthetic, Dataset, Split, Task};
use ghostnet::erosion::{ghost_accuracy, ErosionKind, ErosionSpec};
use ghostnet::evaluation::{attack_rate, filter_dataset, jsd};
use ghostnet::network::{build, train, Classifier, Preset, TrainConfig, TrainedNetwork};
use proptest::prelude::*;

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn jsd_is_symmetric_bounded_and_zero_on_the_diagonal(
        (p, q) in (2usize..10).prop_flat_map(|k| (distribution(k), distribution(k)))
    ) {
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&a));
        prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn attack_steps_stay_in_the_ball_and_the_pixel_range(
        pixels in prop::collection::vec(0.0f64..=1.0, 12),
        grads in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..14),
        eps in 1u32..32,
        alpha in 0.25f64..4.0,
        mifgsm in any::<bool>(),
    ) {
        let images = Tensor::new(vec![3, 4], pixels).unwrap();
        let cfg = AttackConfig {
            alpha,
            iterations: grads.len(),
            ..AttackConfig::new(if mifgsm { AttackMethod::Mifgsm } else { AttackMethod::Ifgsm }, eps)
        };
        let mut state = AttackState::new(&images);
        for g in grads {
            attack_step(&mut state, &Tensor::new(vec![3, 4], g).unwrap(), &cfg).unwrap();
            prop_assert!(state.linf() <= cfg.epsilon_unit() + 1e-12);
            prop_assert!(state.adversarial.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

fn digits_model(seed: u64, preset: Preset) -> (TrainedNetwork, Dataset) {
    let data = gen_synthetic(Task::Digits8x8, 1500, 0.1, seed).unwrap();
    let spec = preset.spec("m", &data.sample_shape, data.classes);
    let cfg = TrainConfig {
        seed,
        epochs: 20,
        ..TrainConfig::default()
    };
    (train(build(spec, seed).unwrap(), &data, &cfg).unwrap(), data)
}

#[test]
fn white_box_rate_does_not_fall_as_epsilon_grows() {
    for seed in 0..3 {
        let (net, data) = digits_model(seed, Preset::PlainMlp);
        let filtered = filter_dataset(&data.split(Split::Attack), &[&net as &dyn Classifier]).unwrap().dataset;
        let batch = filtered.all();
        let mut last = 0.0;
        for eps in [2u32, 4, 8, 16] {
            let cfg = AttackConfig {
                iterations: 10,
                alpha: eps as f64 / 10.0,
                ..AttackConfig::new(AttackMethod::Ifgsm, eps)
            };
            let adv = run_attack(&batch, filtered.labels(), &ModelGrad(&net), &cfg).unwrap();
            let rate = attack_rate(&adv, filtered.labels(), &net).unwrap();
            assert!(rate >= last - 0.01, "seed {seed}: ε={eps} rate {rate} after {last}");
            last = rate;
        }
        assert!(last > 0.5, "seed {seed}: ε=16 white-box rate only {last}");
    }
}

#[test]
fn ghost_accuracy_falls_with_magnitude() {
    for (preset, kind, grid) in [
        (Preset::PlainMlp, ErosionKind::Dropout, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]),
        (Preset::ResMlp, ErosionKind::Skip, [0.0, 0.15, 0.3, 0.45, 0.6, 0.75, 0.9, 1.0]),
    ] {
        let (net, data) = digits_model(7, preset);
        let val = data.split(Split::Val);
        let batch = val.all();
        let accs: Vec<f64> = grid
            .iter()
            .map(|&m| ghost_accuracy(&net, &ErosionSpec::new(kind, m, 3), 50, &batch, val.labels()).unwrap())
            .collect();
        for w in accs.windows(2) {
            assert!(w[1] <= w[0] + 0.02, "{kind}: {accs:?}");
        }
        assert!(accs[accs.len() - 1] < accs[0], "{kind}: {accs:?}");
    }
}
