//! Train the wide teacher with cross-entropy and the temporal loss on a
//! reduced configuration, then report validation accuracy and consistency.

use tempseg::data::generate_dataset;
use tempseg::engine::{evaluate, train_teacher, Config, TrainOptions};

fn main() -> tempseg::Result<()> {
    let mut cfg = Config::default();
    cfg.data.train_clips = 40;
    cfg.data.val_clips = 10;
    cfg.train.teacher_iterations = 400;
    let ds = generate_dataset(&cfg.data, cfg.seed)?;

    let run = train_teacher(&cfg, &ds.train, TrainOptions::default())?;
    for l in run.log.iter().step_by(50) {
        println!(
            "iter {:4}  lr {:.5}  ce {:.4}  tl {:.4}",
            l.iteration, l.lr, l.loss.ce, l.loss.tl
        );
    }
    let eval = evaluate(&run.checkpoint.net, &ds.val)?;
    println!(
        "teacher: {} params, mIoU {:.4}, TC {:.4}",
        eval.param_count, eval.report.miou, eval.report.tc
    );
    Ok(())
}
