//! Encode a three-frame sequence of similarity maps into a ConvLSTM
//! embedding, and show that the all-zero parameters collapse it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempseg::conv_lstm::{encode_sequence, ConvLstmParams};
use tempseg::data::{generate_dataset, DataConfig};
use tempseg::models::{tiny_net, NetConfig, SegmentationNet};
use tempseg::similarity::{pool_to_grid, self_similarity, PoolSize, SimilarityMap};

fn main() -> tempseg::Result<()> {
    let data = DataConfig {
        train_clips: 1,
        val_clips: 0,
        ..DataConfig::default()
    };
    let clip = &generate_dataset(&data, 2)?.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = tiny_net(NetConfig::student(data.classes), &mut rng)?;

    let pool = PoolSize {
        height: 4,
        width: 4,
    };
    let maps = clip.frames[..3]
        .iter()
        .map(|f| {
            Ok(self_similarity(&pool_to_grid(
                &net.forward(f)?.features,
                pool,
            )?))
        })
        .collect::<tempseg::Result<Vec<SimilarityMap>>>()?;

    let params = ConvLstmParams::random(8, 3, 0.1, &mut rng)?;
    let e = encode_sequence(&params, &maps)?;
    println!("embedding ({} dims, norm {:.4}):", e.len(), e.norm());
    println!(
        "  {:?}",
        e.0.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );

    let zero = encode_sequence(&ConvLstmParams::zeros(8, 3)?, &maps)?;
    println!("zero parameters give norm {}", zero.norm());
    Ok(())
}
