//! Evaluate every loss term on one triplet from a synthetic clip, with an
//! untrained student and teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempseg::conv_lstm::ConvLstmParams;
use tempseg::data::{generate_dataset, sample_triplet, DataConfig};
use tempseg::losses::{total_objective, ObjectiveConfig, SequenceInputs, TermFlags};
use tempseg::models::{tiny_net, NetConfig, SegmentationNet};
use tempseg::similarity::PoolSize;

fn main() -> tempseg::Result<()> {
    let data = DataConfig {
        train_clips: 1,
        val_clips: 0,
        ..DataConfig::default()
    };
    let clip = &generate_dataset(&data, 3)?.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let student = tiny_net(NetConfig::student(data.classes), &mut rng)?;
    let teacher = tiny_net(NetConfig::teacher(data.classes), &mut rng)?;
    let lstm = ConvLstmParams::random(8, 3, 0.1, &mut rng)?;

    let triplet = sample_triplet(clip, 3, &mut rng)?;
    println!("triplet frames {:?}", triplet.indices);
    let frames: Vec<_> = triplet
        .indices
        .iter()
        .map(|&i| clip.frames[i].clone())
        .collect();
    let labels: Vec<_> = triplet
        .indices
        .iter()
        .map(|&i| clip.label_at(i).cloned())
        .collect();
    let s_out = frames
        .iter()
        .map(|f| student.forward(f))
        .collect::<tempseg::Result<Vec<_>>>()?;
    let t_out = frames
        .iter()
        .map(|f| teacher.forward(f))
        .collect::<tempseg::Result<Vec<_>>>()?;

    let cfg = ObjectiveConfig {
        lambda: 0.1,
        terms: TermFlags::ALL,
        pool: PoolSize {
            height: 8,
            width: 8,
        },
        collapse_margin: Some(0.1),
    };
    let inputs = SequenceInputs {
        frames: &frames,
        flows: &triplet.flows,
        labels: &labels,
        student: &s_out,
        teacher: Some(&t_out),
    };
    let (loss, _) = total_objective(&inputs, &cfg, Some(&lstm))?;
    println!("{loss:#?}");
    Ok(())
}
