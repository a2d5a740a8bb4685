//! Train each preset on its natural task and round-trip through GNET.

use ghostnet::dataio::{gen_synthetic, Split, Task};
use ghostnet::network::{build, train, NoErosion, Preset, TrainConfig, TrainedNetwork};

fn main() {
    let runs = [
        (Preset::PlainMlp, Task::Spirals2d, 5000),
        (Preset::ResMlp, Task::Digits8x8, 3000),
        (Preset::SmallCnn, Task::Digits8x8, 3000),
    ];
    for (preset, task, count) in runs {
        let data = gen_synthetic(task, count, if task == Task::Digits8x8 { 0.1 } else { 0.0 }, 0).unwrap();
        let spec = preset.spec(preset.name(), &data.sample_shape, data.classes);
        let t = std::time::Instant::now();
        let net = train(build(spec, 0).unwrap(), &data, &TrainConfig::default()).unwrap();
        let val = data.split(Split::Val);
        let acc = net.accuracy_with(&val.all(), val.labels(), &NoErosion).unwrap();

        let path = std::env::temp_dir().join(format!("{}.gnet", preset.name()));
        net.save(&path).unwrap();
        let back = TrainedNetwork::load(&path).unwrap();
        assert_eq!(back.fingerprint(), net.fingerprint());
        println!(
            "{:<10} on {:<11} val acc {acc:.4}  {:.1}s  id {}",
            preset.name(),
            task.name(),
            t.elapsed().as_secs_f64(),
            net.id()
        );
    }
}
