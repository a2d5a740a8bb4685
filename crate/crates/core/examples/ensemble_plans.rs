//! Plan accounting (#I, CC) for every preset and measured cost of ghost plans.

use ghostnet::attack::{AttackConfig, AttackMethod};
use ghostnet::dataio::{gen_synthetic, Split, Task};
use ghostnet::ensemble::{measure_cost, EnsemblePlan, PlanMember};
use ghostnet::erosion::{ErosionKind, ErosionSpec};
use ghostnet::experiment::ALL_PRESETS;
use ghostnet::network::{build, train, Preset, TrainConfig};

fn main() {
    println!("preset  type   #B  #S  #L   #I  CC");
    for p in ALL_PRESETS {
        let s = p.plan();
        println!(
            "{:<6}  {:<5} {:>3} {:>3} {:>3} {:>4} {:>3}",
            p.name(),
            format!("{:?}", s.model_type).to_lowercase(),
            s.bases,
            s.standard,
            s.longitudinal,
            s.intrinsic_models(),
            s.computational_cost()
        );
    }

    let data = gen_synthetic(Task::Digits8x8, 2000, 0.1, 0).unwrap();
    let net = train(
        build(Preset::PlainMlp.spec("p", &data.sample_shape, data.classes), 0).unwrap(),
        &data,
        &TrainConfig::default(),
    )
    .unwrap();
    let spec = ErosionSpec::new(ErosionKind::Dropout, 0.35, 1);
    let attack = data.split(Split::Attack).take(128);
    let cfg = AttackConfig::new(AttackMethod::Mifgsm, 8);
    println!("\nmeasured on {} images:", attack.len());
    for p in ALL_PRESETS.iter().filter(|p| p.plan().bases == 1) {
        let member = PlanMember {
            net: &net,
            erosion: Some(spec.clone()),
        };
        let plan = EnsemblePlan::from_spec(vec![member], &p.plan()).unwrap();
        let cost = measure_cost(&plan, &attack.all(), attack.labels(), &cfg).unwrap();
        println!("  {}  CC {:>2}  {:.3} ms/image", p.name(), cost.computational_cost, cost.seconds_per_image * 1e3);
    }
}
