//! Generate a small synthetic dataset and write it to disk as PNG frames,
//! label maps and .flo flows.
//!
//! Usage: `cargo run --example synthetic_clip [out-dir]`

use tempseg::data::{dataset_digest, generate_dataset, save_dataset, DataConfig};

fn main() -> tempseg::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/synthetic".into());
    let cfg = DataConfig {
        train_clips: 4,
        val_clips: 2,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&cfg, 42)?;
    let clip = &ds.train[0];
    println!(
        "{}: {} frames of {}x{}, labelled at {:?}",
        clip.id,
        clip.len(),
        clip.width(),
        clip.height(),
        clip.labeled_indices()
    );
    let root = std::path::Path::new(&out);
    save_dataset(&ds, root)?;
    println!(
        "wrote {} clips to {out} (digest {})",
        ds.train.len() + ds.val.len(),
        dataset_digest(root)?
    );
    Ok(())
}
