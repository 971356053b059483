use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sustain::mil::pooling::{attention_pool, mean_pool, AttentionParams, SegmentScores};
use sustain::Tensor;

fn random_scores(rng: &mut ChaCha8Rng, c: usize, k: usize) -> SegmentScores {
    let data = (0..c * k).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
    SegmentScores::new(Tensor::new(vec![c, k], data).unwrap()).unwrap()
}

#[test]
fn zero_attention_is_mean_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let c = rng.random_range(1..=16);
        let k = rng.random_range(1..=64);
        let s = random_scores(&mut rng, c, k);
        let pooled = attention_pool(&s, &AttentionParams::zeros(c)).unwrap();
        for (a, b) in pooled.output.iter().zip(mean_pool(&s)) {
            assert!((a - b).abs() <= 1e-12, "C={c} K={k}: {a} vs {b}");
        }
        for row in pooled.attention.data().chunks(k) {
            assert!(row.iter().all(|&w| (w - 1.0 / k as f64).abs() <= 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn attention_rows_sum_to_one(
        seed in any::<u64>(),
        c in 1usize..=16,
        k in 1usize..=64,
        scale in 0.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, c, k);
        let w: Vec<f64> = (0..c * c).map(|_| rng.random_range(-scale..=scale)).collect();
        let w = AttentionParams::new(Tensor::new(vec![c, c], w).unwrap()).unwrap();
        let pooled = attention_pool(&s, &w).unwrap();
        for (ci, row) in pooled.attention.data().chunks(k).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            // a convex combination stays inside the score range
            let lo = s.row(ci).iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.row(ci).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pooled.output[ci] >= lo - 1e-12 && pooled.output[ci] <= hi + 1e-12);
        }
    }
}
