use rand::Rng;

use super::VideoClip;
use crate::error::{Error, Result};
use crate::flowwarp::FlowField;

/// A training triplet `(frame_f, labelled frame, frame_b)` with the flows
/// `M_{f→l}` and `M_{l→b}` between consecutive members.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub indices: [usize; 3],
    pub flows: [FlowField; 2],
}

/// Picks a labelled frame, then one frame uniformly within `window` before
/// it and one within `window` after it.
pub fn sample_triplet(clip: &VideoClip, window: usize, rng: &mut impl Rng) -> Result<Triplet> {
    if window == 0 {
        return Err(Error::validation("sampling window must be at least 1"));
    }
    let candidates: Vec<usize> = clip
        .labeled_indices()
        .into_iter()
        .filter(|&l| l > 0 && l + 1 < clip.len())
        .collect();
    if candidates.is_empty() {
        return Err(Error::validation(format!(
            "clip {} has no labelled frame with neighbours on both sides",
            clip.id
        )));
    }
    let l = if candidates.len() == 1 {
        candidates[0]
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    };
    let f = rng.gen_range(l.saturating_sub(window)..=l - 1);
    let b = rng.gen_range(l + 1..=(l + window).min(clip.len() - 1));
    Ok(Triplet {
        indices: [f, l, b],
        flows: [clip.flow_between(f, l)?, clip.flow_between(l, b)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, DataConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip() -> VideoClip {
        let cfg = DataConfig::default();
        let spec = cfg.random_scene(&mut ChaCha8Rng::seed_from_u64(1));
        generate_clip(&spec, 11, 1).unwrap()
    }

    #[test]
    fn unit_window_gives_adjacent_frames() {
        let c = clip();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_triplet(&c, 1, &mut rng).unwrap().indices, [4, 5, 6]);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let c = clip();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_triplet(&c, 5, &mut rng).unwrap().indices)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn pair_frequencies_are_uniform() {
        let c = clip();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [[0usize; 3]; 3];
        let n = 10_000;
        for _ in 0..n {
            let [f, _, b] = sample_triplet(&c, 3, &mut rng).unwrap().indices;
            assert!((2..=4).contains(&f) && (6..=8).contains(&b));
            counts[f - 2][b - 6] += 1;
        }
        let expected = n as f64 / 9.0;
        let sigma = (expected * (1.0 - 1.0 / 9.0)).sqrt();
        let mut chi2 = 0.0;
        for row in counts {
            for k in row {
                assert!((k as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
                chi2 += (k as f64 - expected).powi(2) / expected;
            }
        }
        // 8 degrees of freedom, 99.9th percentile
        assert!(chi2 < 26.12, "chi2 {chi2}");
    }

    #[test]
    fn boundary_label_is_rejected() {
        let mut c = clip();
        let l = c.labels[0].1.clone();
        c.labels = vec![(0, l)];
        assert!(matches!(
            sample_triplet(&c, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Validation(_))
        ));
    }
}
