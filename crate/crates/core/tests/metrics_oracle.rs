use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sustain::metrics::{auc_roc, average_precision, lwlrap, mean_average_precision, MetricsReport};

const INSTANCES: usize = 500;

/// Scores drawn either continuously or from a handful of levels so that
/// ties are common.
fn scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let coarse = rng.random_bool(0.5);
    (0..n)
        .map(|_| if coarse { f64::from(rng.random_range(0..4u8)) / 4.0 } else { rng.random() })
        .collect()
}

fn truth(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let rate = rng.random_range(0.05..0.95);
    (0..n).map(|_| rng.random_bool(rate)).collect()
}

/// Rank of sample `i` (1-based) with ties broken by input order.
fn stable_rank(s: &[f64], i: usize) -> usize {
    (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j <= i)).count()
}

fn ap_oracle(s: &[f64], t: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..s.len()).filter(|&i| t[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let r = stable_rank(s, i);
            let hits = pos.iter().filter(|&&j| stable_rank(s, j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

/// Pairwise comparison count, returned as the same integer ratio the
/// Mann-Whitney form reduces to.
fn auc_oracle(s: &[f64], t: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in (0..s.len()).filter(|&i| t[i]) {
        for j in (0..s.len()).filter(|&j| !t[j]) {
            pairs += 1;
            twice += if s[i] > s[j] {
                2
            } else if s[i] == s[j] {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Class-wise formulation: mean per-class label precision weighted by the
/// share of positives belonging to the class.
fn lwlrap_oracle(s: &[Vec<f64>], t: &[Vec<bool>]) -> Option<f64> {
    let c = t[0].len();
    let total: usize = t.iter().flatten().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let mut out = 0.0;
    for class in 0..c {
        let mut prec = Vec::new();
        for (row, lab) in s.iter().zip(t) {
            if !lab[class] {
                continue;
            }
            let mut rank = 0;
            let mut hits = 0;
            for l in 0..c {
                if row[l] >= row[class] {
                    rank += 1;
                    hits += usize::from(lab[l]);
                }
            }
            prec.push(hits as f64 / rank as f64);
        }
        if !prec.is_empty() {
            let per_class = prec.iter().sum::<f64>() / prec.len() as f64;
            out += per_class * prec.len() as f64 / total as f64;
        }
    }
    Some(out)
}

#[test]
fn average_precision_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=100);
        let (s, t) = (scores(&mut rng, n), truth(&mut rng, n));
        match (average_precision(&s, &t), ap_oracle(&s, &t)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-10, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn auc_matches_pairwise_count_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=100);
        let (s, t) = (scores(&mut rng, n), truth(&mut rng, n));
        assert_eq!(auc_roc(&s, &t), auc_oracle(&s, &t));
    }
}

#[test]
fn lwlrap_matches_classwise_formulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=100);
        let c = rng.random_range(1..=10);
        let s: Vec<Vec<f64>> = (0..n).map(|_| scores(&mut rng, c)).collect();
        let t: Vec<Vec<bool>> = (0..n).map(|_| truth(&mut rng, c)).collect();
        match (lwlrap(&s, &t), lwlrap_oracle(&s, &t)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-10, "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn single_label_lwlrap_is_mean_reciprocal_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let n = rng.random_range(1..=50);
        let c = rng.random_range(2..=8);
        let s: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let t: Vec<Vec<bool>> = labels.iter().map(|&l| (0..c).map(|k| k == l).collect()).collect();
        let mrr: f64 = s
            .iter()
            .zip(&labels)
            .map(|(row, &l)| 1.0 / row.iter().filter(|&&v| v >= row[l]).count() as f64)
            .sum::<f64>()
            / n as f64;
        assert!((lwlrap(&s, &t).unwrap() - mrr).abs() < 1e-12);
    }
}

#[test]
fn worked_examples() {
    // (1/1 + 2/3) / 2 in floating point is one ulp below 5/6
    let l = lwlrap(&[vec![0.9, 0.8, 0.7]], &[vec![true, false, true]]).unwrap();
    assert_eq!(l, (1.0 + 2.0 / 3.0) / 2.0);
    assert!((l - 5.0 / 6.0).abs() <= f64::EPSILON);
    assert_eq!(average_precision(&[0.9, 0.8, 0.7], &[false, true, false]), Some(0.5));
    assert_eq!(auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
    assert_eq!(auc_roc(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
    assert_eq!(average_precision(&[0.2], &[true]), Some(1.0));
}

#[test]
fn classes_without_positives_are_excluded() {
    let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
    let t = vec![vec![true, false], vec![false, false]];
    assert_eq!(mean_average_precision(&s, &t).unwrap(), 1.0);
    let r = MetricsReport::compute(&s, &t, 0.5).unwrap();
    assert_eq!(r.map, 1.0);
    assert!(r.classes[1].ap.is_none());
}
