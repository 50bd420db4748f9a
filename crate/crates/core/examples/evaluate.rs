//! Per-frame inference and the per-class accuracy/consistency table of an
//! untrained student, plus the ground-truth consistency ceiling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempseg::data::{generate_dataset, DataConfig};
use tempseg::engine::evaluate;
use tempseg::metrics::temporal_consistency;
use tempseg::models::{tiny_net, NetConfig};

fn main() -> tempseg::Result<()> {
    let data = DataConfig {
        train_clips: 0,
        val_clips: 6,
        val_labels: tempseg::data::LabelPolicy::All,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&data, 5)?;
    let net = tiny_net(
        NetConfig::student(data.classes),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;

    let eval = evaluate(&net, &ds.val)?;
    let names: Vec<String> = (0..data.classes).map(|k| format!("class_{k}")).collect();
    println!("{}", eval.report.per_class_table(&names));
    println!("{:.1} frames/s", eval.fps);

    // consistency of the ground truth itself: disocclusions keep it below 1
    let mut ceiling = 0.0;
    for clip in &ds.val {
        let labels: Vec<_> = (0..clip.len())
            .map(|t| clip.label_at(t).unwrap().clone())
            .collect();
        ceiling += temporal_consistency(&labels, &clip.backward_flows, data.classes)?.mean;
    }
    println!("ground-truth TC {:.4}", ceiling / ds.val.len() as f64);
    Ok(())
}
