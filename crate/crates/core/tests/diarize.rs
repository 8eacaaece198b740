use farfield::diarize::*;
use farfield::segments::{Segment, SegmentList};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn sample(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::<f64>::from_fn(chol.nrows(), |_, _| StandardNormal.sample(rng));
    chol * z
}

fn rel_frobenius(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / truth.norm()
}

struct Refit {
    between_err: f64,
    within_err: f64,
    /// Error of the sample covariance of the true speaker offsets: no
    /// estimator that only sees these speakers can be expected to beat it.
    latent_floor: f64,
}

/// Draws speakers from known covariances and refits.
fn refit(speakers: usize, per_speaker: usize, seed: u64) -> Refit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let a = gaussian_matrix(&mut rng, d, d);
    let c = gaussian_matrix(&mut rng, d, d);
    let b0 = &a * a.transpose() / d as f64;
    let w0 = &c * c.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
    let lb = b0.clone().cholesky().unwrap().l();
    let lw = w0.clone().cholesky().unwrap().l();
    let mean = DVector::from_fn(d, |_, _| 3.0 * normal(&mut rng));
    let mut latent = DMatrix::zeros(d, d);
    let groups: Vec<Vec<Vec<f64>>> = (0..speakers)
        .map(|_| {
            let y = sample(&mut rng, &lb);
            latent += &y * y.transpose();
            (0..per_speaker)
                .map(|_| {
                    (&mean + &y + sample(&mut rng, &lw))
                        .iter()
                        .copied()
                        .collect()
                })
                .collect()
        })
        .collect();
    latent /= speakers as f64;
    let model = plda_train(&groups).unwrap();
    Refit {
        between_err: rel_frobenius(model.between(), &b0),
        within_err: rel_frobenius(model.within(), &w0),
        latent_floor: rel_frobenius(&latent, &b0),
    }
}

#[test]
fn plda_refit_fifty_speakers() {
    let r = refit(50, 100, 11);
    println!(
        "50x100: B error {:.3} (latent floor {:.3}), W error {:.3}",
        r.between_err, r.latent_floor, r.within_err
    );
    assert!(r.within_err < 0.15, "W error {}", r.within_err);
    // With 50 speakers the between-speaker covariance is pinned down only as
    // well as 50 draws allow; the refit must stay close to that floor.
    assert!(
        r.between_err < r.latent_floor * 1.5 + 0.02,
        "B error {}",
        r.between_err
    );
}

#[test]
fn plda_refit_is_consistent_with_many_speakers() {
    let r = refit(2000, 20, 5);
    println!(
        "2000x20: B error {:.3}, W error {:.3}",
        r.between_err, r.within_err
    );
    assert!(r.between_err < 0.15, "B error {}", r.between_err);
    assert!(r.within_err < 0.15, "W error {}", r.within_err);
}

/// Adjusted Rand index from the contingency table.
fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

#[test]
fn ari_oracle_sanity() {
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
    assert!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
}

#[test]
fn four_separated_speakers_cluster_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 8;
    let centres: Vec<DVector<f64>> = (0..4)
        .map(|_| DVector::from_fn(d, |_, _| 4.0 * normal(&mut rng)))
        .collect();
    let draw = |rng: &mut ChaCha8Rng, s: usize| -> Vec<f64> {
        (&centres[s] + DVector::from_fn(d, |_, _| 0.3 * normal(rng)))
            .iter()
            .copied()
            .collect()
    };
    // PLDA trained on other draws from the same speakers.
    let train: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|s| (0..30).map(|_| draw(&mut rng, s)).collect())
        .collect();
    let model = plda_train(&train).unwrap();
    let mut truth = Vec::new();
    let mut embs = Vec::new();
    for s in 0..4 {
        for _ in 0..50 {
            truth.push(s);
            embs.push(draw(&mut rng, s));
        }
    }
    let sim = plda_score_matrix(&model, &embs).unwrap();
    let labels = ahc_cluster(&sim, AhcStop::NumClusters(4));
    assert_eq!(adjusted_rand_index(&labels, &truth), 1.0);
}

proptest! {
    #[test]
    fn constant_labels_round_trip(spans in prop::collection::vec((0.05f64..2.0, 0.5f64..5.0), 1..6)) {
        let mut t = 0.0;
        let mut segs = Vec::new();
        for (gap, dur) in &spans {
            t += (gap * 100.0).round() / 100.0;
            let d = (dur * 100.0).round() / 100.0;
            segs.push(Segment::new(t, d, "speech"));
            t += d;
        }
        let speech = SegmentList::new(segs).unwrap();
        let grid = cut_subsegments(&speech, 1.5, 0.25).unwrap();
        let labels: Vec<usize> = grid.windows.iter().map(|w| w.segment).collect();
        let out = windows_to_segments(&labels, &grid).unwrap();
        prop_assert_eq!(out.len(), speech.len());
        for (o, s) in out.iter().zip(speech.iter()) {
            prop_assert!((o.onset - s.onset).abs() <= 0.01 + 1e-9);
            prop_assert!((o.end() - s.end()).abs() <= 0.01 + 1e-9);
        }
    }

    #[test]
    fn windows_stay_inside_speech(spans in prop::collection::vec((0.0f64..2.0, 0.1f64..6.0), 1..6), stride in 0.1f64..1.5) {
        let mut t = 0.0;
        let mut segs = Vec::new();
        for (gap, dur) in &spans {
            t += gap + 0.01;
            segs.push(Segment::new(t, *dur, "speech"));
            t += dur;
        }
        let speech = SegmentList::new(segs).unwrap();
        let grid = cut_subsegments(&speech, 1.5, stride).unwrap();
        for w in &grid.windows {
            let s = &speech.as_slice()[w.segment];
            prop_assert!(w.onset >= s.onset - 1e-9 && w.onset + w.duration <= s.end() + 1e-9);
            prop_assert!(w.duration >= 0.5 - 1e-9 && w.duration <= 1.5 + 1e-12);
        }
    }

    #[test]
    fn plda_score_is_symmetric(x in prop::collection::vec(-3.0f64..3.0, 3), y in prop::collection::vec(-3.0f64..3.0, 3)) {
        let groups = vec![
            vec![vec![1.0, 0.0, 0.2], vec![1.2, 0.1, 0.0], vec![0.9, -0.1, 0.1]],
            vec![vec![-1.0, 0.5, 0.0], vec![-0.8, 0.4, 0.3], vec![-1.1, 0.7, 0.1]],
            vec![vec![0.0, -1.0, 1.0], vec![0.2, -1.2, 0.8], vec![0.1, -0.9, 1.1]],
        ];
        let model = plda_train(&groups).unwrap();
        prop_assert_eq!(model.score(&x, &y).unwrap(), model.score(&y, &x).unwrap());
    }
}
