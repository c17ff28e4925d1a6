//! Property tests for invariants that span modules.

use grucnn_core::analysis::{
    accuracy_curve, bayes_over_frames, bins_from_pool, calibrate, confidence_cdf, pooled_predictions, CalibrationFit,
    PredictionTable, Which,
};
use grucnn_core::cells::{gru_conv_step, CellKind};
use grucnn_core::data::{jitter_frame, make_sequence, LabeledImage, SnrLevel, MAX_JITTER};
use grucnn_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn snr_level() -> impl Strategy<Value = SnrLevel> {
    (1u32..=64, 1u32..=64).prop_map(|(n, d)| SnrLevel::new(n, d).unwrap())
}

fn image(size: usize) -> impl Strategy<Value = LabeledImage> {
    (prop::collection::vec(-3.0f64..3.0, 3 * size * size), 0usize..10).prop_map(move |(px, label)| LabeledImage {
        pixels: Tensor::from_vec([3, size, size], px).unwrap(),
        label,
    })
}

/// `items` random tables rows: `[items, reps, frames, 10]` normalized.
fn table(max_items: usize) -> impl Strategy<Value = PredictionTable> {
    (1..=max_items, 1usize..=2, 1usize..=4).prop_flat_map(|(items, reps, frames)| {
        (
            prop::collection::vec(0usize..10, items),
            prop::collection::vec(prop::sample::select(vec![SnrLevel::whole(4), SnrLevel::inverse(4)]), items),
            prop::collection::vec(1e-6f64..1.0, items * reps * frames * 10),
        )
            .prop_map(move |(labels, snr, mut probs)| {
                for row in probs.chunks_exact_mut(10) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= s);
                }
                PredictionTable::new("m", vec![0], "default", reps, frames, labels, snr, probs).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snr_text_round_trips(s in snr_level()) {
        let back: SnrLevel = s.to_string().parse().unwrap();
        prop_assert_eq!(back, s);
        prop_assert!((s.noise_std().powi(-2) - s.value()).abs() < 1e-9 * s.value());
    }

    #[test]
    fn snr_order_follows_value(a in snr_level(), b in snr_level()) {
        prop_assert_eq!(a.cmp(&b), a.value().partial_cmp(&b.value()).unwrap());
    }

    #[test]
    fn sequences_are_standardized(img in image(8), frames in 1usize..6, snr in snr_level(), seed: u64) {
        let seq = make_sequence(&img, frames, snr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(seq.frames.shape(), &[frames, 3, 8, 8][..]);
        let d = seq.frames.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((sd - 1.0).abs() < 1e-9);
        prop_assert_eq!(seq.label, img.label);
    }

    #[test]
    fn jitter_moves_pixels_with_edge_replication(
        img in image(8),
        dx in -MAX_JITTER..=MAX_JITTER,
        dy in -MAX_JITTER..=MAX_JITTER,
    ) {
        let out = jitter_frame(&img.pixels, dx, dy).unwrap();
        let (src, dst) = (img.pixels.data(), out.data());
        for c in 0..3 {
            for y in 0..8i32 {
                for x in 0..8i32 {
                    let sy = (y - dy).clamp(0, 7) as usize;
                    let sx = (x - dx).clamp(0, 7) as usize;
                    prop_assert_eq!(dst[(c * 8 + y as usize) * 8 + x as usize], src[(c * 8 + sy) * 8 + sx]);
                }
            }
        }
    }

    #[test]
    fn reshape_round_trips(data in prop::collection::vec(-1.0f64..1.0, 24)) {
        let t = Tensor::from_vec([2, 3, 4], data.clone()).unwrap();
        let back = t.reshape([6, 4]).unwrap().reshape([2, 3, 4]).unwrap();
        prop_assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn gru_state_stays_in_unit_ball(seed: u64, scale in 0.1f64..1.0, steps in 1usize..30) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor<f64>> = CellKind::GruConv
            .param_shapes(2, 3)
            .iter()
            .map(|(_, s, _)| {
                let n = s.iter().product();
                Tensor::from_vec(s.clone(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
            })
            .collect();
        let mut h = Tensor::<f64>::zeros([1, 3, 4, 4]);
        for _ in 0..steps {
            let x = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let mut g = Graph::new();
            let pv: Vec<_> = params.iter().map(|p| g.input(p.clone())).collect();
            let (xv, hv) = (g.input(x), g.input(h.clone()));
            let out = gru_conv_step(&mut g, xv, hv, &pv).unwrap();
            h = g.value(out).clone();
            prop_assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn prediction_tables_round_trip_through_csv(t in table(6)) {
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = PredictionTable::read_csv(&buf[..]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn posteriors_are_distributions(t in table(4)) {
        for item in 0..t.items() {
            for rep in 0..t.reps {
                let (post, _) = bayes_over_frames(t.sequence(item, rep), 10).unwrap();
                for row in post.chunks_exact(10) {
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn accuracy_is_a_percentage(t in table(8), bayes: bool) {
        for c in accuracy_curve(&t, bayes).unwrap() {
            prop_assert_eq!(c.percent.len(), t.frames);
            prop_assert!(c.percent.iter().all(|p| (0.0..=100.0).contains(p)));
        }
    }

    #[test]
    fn reliability_bins_partition_the_pool(t in table(8), bins in 1usize..12) {
        let pool = pooled_predictions(&t, t.frames - 1).unwrap();
        if pool.len() < bins {
            prop_assert!(bins_from_pool(&pool, bins).is_err());
            return Ok(());
        }
        let b = bins_from_pool(&pool, bins).unwrap();
        prop_assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), pool.len());
        prop_assert_eq!(b.iter().map(|x| x.positives).sum::<usize>(), pool.iter().filter(|p| p.1).count());
        for w in b.windows(2) {
            prop_assert!(w[0].mean_p <= w[1].mean_p + 1e-15);
        }
    }

    #[test]
    fn confidence_cdf_is_monotone(t in table(6), xs in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let cdf = confidence_cdf(&t, 0, Which::Negative).unwrap();
        let mut xs = xs;
        xs.sort_by(f64::total_cmp);
        for w in xs.windows(2) {
            prop_assert!(cdf.at(w[0]) <= cdf.at(w[1]));
        }
        prop_assert_eq!(cdf.at(1.0), 1.0);
    }

    #[test]
    fn calibrated_rows_stay_normalized(t in table(5), a in -12.0f64..-0.1, c in 0.05f64..3.0) {
        let fit = CalibrationFit { a, c, r2: 1.0, bins_used: 50, iterations: 0, converged: true };
        let out = calibrate(&t, &fit);
        out.validate().unwrap();
        for row in out.probs.chunks_exact(10) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
