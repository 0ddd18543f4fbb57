use std::collections::BTreeSet;

use lamae_core::checkpoint::Checkpoint;
use lamae_core::data::icd::normalize_icd;
use lamae_core::data::sampling::sample_views_frames;
use lamae_core::mask::{masked_count, sample_encoder_mask, MaskPlan};
use lamae_core::metrics::{auroc, macro_average};
use lamae_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn encoder_masks_partition_every_frame(
        t in prop::sample::select(vec![16usize, 64, 256]),
        alpha in 0.05f64..0.95,
        frames in 1usize..5,
        tube in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = sample_encoder_mask(t, alpha, &mut rng, tube, frames).unwrap();
        prop_assert_eq!(masks.len(), frames);
        for m in &masks {
            prop_assert!(m.is_partition_of(t));
            prop_assert_eq!(m.masked.len(), masked_count(t, alpha));
        }
        if tube {
            prop_assert!(masks.iter().all(|m| *m == masks[0]));
        }
    }

    #[test]
    fn latent_mask_is_a_subset_of_visible_tokens(
        views in 1usize..4,
        slots in 1usize..4,
        alpha_e in 0.3f64..0.9,
        alpha_la in 0.0f64..0.9,
        seed in any::<u64>(),
    ) {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let plan = MaskPlan::sample(views, slots, 16, alpha_e, alpha_la, false, &mut a, &mut b).unwrap();
        plan.validate().unwrap();
        let visible: BTreeSet<_> = plan.visible_coords().into_iter().collect();
        prop_assert!(plan.latent_dropped.is_subset(&visible));
        let n = visible.len();
        prop_assert_eq!(plan.latent_dropped.len(), masked_count(n, alpha_la).min(n - 1));
    }

    #[test]
    fn auroc_ignores_monotone_rescaling(
        rows in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<f64> = rows.iter().map(|r| if r.1 { 1.0 } else { 0.0 }).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        let a = auroc(&scores, &labels);
        let b = auroc(&mapped, &labels);
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
        if let Some(a) = a {
            let flipped: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
            let c = auroc(&scores, &flipped).unwrap();
            prop_assert!((a + c - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn macro_average_ignores_column_order(
        values in prop::collection::vec(prop::option::of(0.0f64..1.0), 1..12),
        seed in any::<u64>(),
    ) {
        prop_assume!(values.iter().any(Option::is_some));
        let mut shuffled = values.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let a = macro_average(&values).unwrap();
        let b = macro_average(&shuffled).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert_eq!(a.excluded.len(), b.excluded.len());
    }

    #[test]
    fn icd_normalization_is_idempotent(code in "[A-Za-z][0-9]{2}(\\.?[0-9A-Za-z]{1,4})?") {
        let once = normalize_icd(&code).unwrap();
        prop_assert_eq!(once.len(), 3);
        prop_assert_eq!(normalize_icd(&once).unwrap(), once);
    }

    #[test]
    fn sampling_yields_views_times_frames_pairs(
        lengths in prop::collection::vec(1usize..40, 1..6),
        n_views in 1usize..6,
        n_frames in 1usize..6,
        window in 1usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_views_frames(&lengths, n_views, n_frames, window, &mut rng).unwrap();
        prop_assert_eq!(s.views.len(), n_views);
        prop_assert_eq!(s.pairs(), n_views * n_frames);
        prop_assert!(s.views.windows(2).all(|w| w[0] <= w[1]));
        for (v, frames) in s.views.iter().zip(&s.frames) {
            prop_assert!(frames.iter().all(|&f| f < lengths[*v]));
        }
        if lengths.len() >= n_views {
            prop_assert!(s.views.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        a in prop::collection::vec(-1e6f64..1e6, 0..20),
        b in prop::collection::vec(-1e3f32..1e3, 1..20),
        counters in prop::collection::vec(any::<u64>(), 0..4),
        text in ".{0,40}",
    ) {
        let mut c = Checkpoint::new();
        c.put_tensor("a", &Tensor::new(vec![a.len()], a.clone()).unwrap());
        c.put_tensor("b", &Tensor::new(vec![1, b.len()], b.clone()).unwrap());
        c.put_u64("counters", &counters);
        c.put_text("text", &text);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(&back, &c);
        let ta = back.tensor::<f64>("a").unwrap();
        let tb = back.tensor::<f32>("b").unwrap();
        prop_assert_eq!(ta.data(), a.as_slice());
        prop_assert_eq!(tb.shape(), &[1, b.len()]);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let mut c = Checkpoint::new();
    c.put_f64s("x", &[1.0, 2.0, 3.0]);
    let mut bytes = c.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
