//! I-FGSM and MI-FGSM against a spiral classifier, with per-step tracing.

use ghostnet::attack::{run_attack_observed, AttackConfig, AttackMethod, ModelGrad};
use ghostnet::dataio::{gen_synthetic, Split, Task};
use ghostnet::evaluation::{attack_rate, filter_dataset};
use ghostnet::network::{build, train, Classifier, Preset, TrainConfig};

fn main() {
    let eps: u32 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let data = gen_synthetic(Task::Spirals2d, 5000, 0.0, 0).unwrap();
    let net = train(
        build(Preset::PlainMlp.spec("spiral", &data.sample_shape, 2), 0).unwrap(),
        &data,
        &TrainConfig::default(),
    )
    .unwrap();
    let clean = filter_dataset(&data.split(Split::Attack), &[&net as &dyn Classifier]).unwrap();
    println!("{} of {} attack images classified correctly", clean.kept, clean.total);

    for method in [AttackMethod::Ifgsm, AttackMethod::Mifgsm] {
        let cfg = AttackConfig::new(method, eps);
        let labels = clean.dataset.labels();
        let mut trace = Vec::new();
        let adv = run_attack_observed(&clean.dataset.all(), labels, &ModelGrad(&net), &cfg, &mut |s| {
            trace.push((s.iteration, s.linf() * 255.0, attack_rate(&s.adversarial, labels, &net).unwrap()));
        })
        .unwrap();
        println!("{method} ε={eps} N={}:", cfg.iterations);
        for (i, linf, rate) in trace {
            println!("    step {i:>2}  ‖δ‖∞ {linf:5.2}/255  rate {rate:.4}");
        }
        println!("    final white-box rate {:.4}", attack_rate(&adv, labels, &net).unwrap());
    }
}
