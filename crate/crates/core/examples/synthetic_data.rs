//! Generate the bundled tasks, save/load GDAT, dump the spiral as CSV.
//!
//!     cargo run --example synthetic_data -- /tmp/spiral.csv

use ghostnet::dataio::{gen_synthetic, Dataset, Split, Task};

fn main() {
    let dir = tempfile_dir();
    for task in [Task::Spirals2d, Task::BlobsKd, Task::Digits8x8] {
        let ds = gen_synthetic(task, 1000, 0.05, 1).unwrap();
        let path = dir.join(format!("{}.gdat", task.name()));
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        println!(
            "{:<11} shape {:?} classes {} train/val/attack {}/{}/{} histogram {:?}",
            task.name(),
            ds.sample_shape,
            ds.classes,
            ds.split(Split::Train).len(),
            ds.split(Split::Val).len(),
            ds.split(Split::Attack).len(),
            ds.class_histogram()
        );
    }
    if let Some(out) = std::env::args().nth(1) {
        let csv = gen_synthetic(Task::Spirals2d, 2000, 0.0, 1).unwrap().to_csv_2d().unwrap();
        std::fs::write(&out, csv).unwrap();
        println!("wrote {out}");
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join("ghostnet-example-data");
    std::fs::create_dir_all(&d).unwrap();
    d
}
