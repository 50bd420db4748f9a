//! Run the default scheme grid (baseline, each term alone, all terms) on a
//! reduced configuration and print the table.
//!
//! Usage: `cargo run --release --example ablation [seed]`

use tempseg::data::generate_dataset;
use tempseg::engine::{run_ablation, train_teacher, Config, Scheme, TrainOptions};

fn main() -> tempseg::Result<()> {
    let mut cfg = Config::default();
    if let Some(seed) = std::env::args().nth(1) {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    cfg.data.train_clips = 60;
    cfg.data.val_clips = 20;
    cfg.train.teacher_iterations = 400;
    cfg.train.max_iterations = 200;
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    let teacher = train_teacher(&cfg, &ds.train, TrainOptions::default())?
        .checkpoint
        .net;
    let table = run_ablation(
        &cfg,
        &ds.train,
        &ds.val,
        &Scheme::DEFAULT_GRID,
        Some(&teacher),
        |msg| eprintln!("{msg}"),
    )?;
    print!("{}", table.render());
    Ok(())
}
