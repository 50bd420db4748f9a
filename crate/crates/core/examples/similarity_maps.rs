//! Pool a feature map to a coarse grid and compare self-similarity maps of
//! two networks with different widths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempseg::data::{generate_dataset, DataConfig};
use tempseg::losses::pairwise_distill;
use tempseg::models::{tiny_net, NetConfig, SegmentationNet};
use tempseg::similarity::{pool_to_grid, self_similarity, PoolSize};

fn main() -> tempseg::Result<()> {
    let data = DataConfig {
        train_clips: 1,
        val_clips: 0,
        ..DataConfig::default()
    };
    let ds = generate_dataset(&data, 1)?;
    let frame = &ds.train[0].frames[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let student = tiny_net(NetConfig::student(data.classes), &mut rng)?;
    let teacher = tiny_net(NetConfig::teacher(data.classes), &mut rng)?;

    let pool = PoolSize {
        height: 4,
        width: 4,
    };
    let fs = pool_to_grid(&student.forward(frame)?.features, pool)?;
    let ft = pool_to_grid(&teacher.forward(frame)?.features, pool)?;
    println!(
        "student features {}x{}, teacher {}x{}",
        fs.rows(),
        fs.cols(),
        ft.rows(),
        ft.cols()
    );

    let s = self_similarity(&fs);
    println!("student self-similarity, first 4 rows:");
    for i in 0..4 {
        let row: Vec<String> = (0..s.cols())
            .map(|j| format!("{:5.2}", s.at(i, j)))
            .collect();
        println!("  {}", row.join(" "));
    }
    println!(
        "pairwise distillation loss: {:.6}",
        pairwise_distill(&fs, &ft)?
    );
    Ok(())
}
