//! Distil a compact student from a trained teacher with every term enabled
//! and compare it to a cross-entropy-only baseline.

use tempseg::data::generate_dataset;
use tempseg::engine::{evaluate, train_student, train_teacher, Config, TrainOptions};
use tempseg::losses::TermFlags;

fn main() -> tempseg::Result<()> {
    let mut cfg = Config::default();
    cfg.data.train_clips = 40;
    cfg.data.val_clips = 10;
    cfg.train.teacher_iterations = 400;
    cfg.train.max_iterations = 200;
    let ds = generate_dataset(&cfg.data, cfg.seed)?;
    let teacher = train_teacher(&cfg, &ds.train, TrainOptions::default())?
        .checkpoint
        .net;

    for terms in ["none", "all"] {
        let mut c = cfg.clone();
        c.train.terms = TermFlags::parse(terms)?;
        let run = train_student(&c, &ds.train, &teacher, TrainOptions::default())?;
        let last = run.log.last().expect("at least one iteration");
        let eval = evaluate(&run.checkpoint.net, &ds.val)?;
        println!(
            "terms {terms:>4}: final loss {:.4}, mIoU {:.4}, TC {:.4}",
            last.loss.total, eval.report.miou, eval.report.tc
        );
    }
    Ok(())
}
