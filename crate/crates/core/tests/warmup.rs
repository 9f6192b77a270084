use advit::autograd::Graph;
use advit::rng::RngState;
use advit::vit::{bind_params, patch_embed, ModelParams, ViTConfig};
use advit::warmup::{
    expand_mask, masked_patch_count, sample_gates, sample_patch_mask, PatchGrid, WarmupMode, WarmupSchedule,
};
use advit::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn decay_is_non_increasing_and_ends_at_zero(nw in 1usize..20, r in 1usize..50) {
        let s = WarmupSchedule::new(nw, r, WarmupMode::Combined).unwrap();
        let mut prev = 1.0f64;
        for t in 0..nw + 2 {
            for a in 0..r {
                let p = s.drop_prob(t, a).unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!(p <= prev);
                if t >= nw {
                    prop_assert_eq!(p, 0.0);
                }
                prev = p;
            }
        }
        prop_assert_eq!(s.drop_prob(nw - 1, r - 1).unwrap(), 0.0);
    }

    #[test]
    fn modes_follow_the_shared_decay(nw in 1usize..10, r in 1usize..20, t in 0usize..12, a in 0usize..20) {
        prop_assume!(a < r);
        let v = WarmupSchedule::new(nw, r, WarmupMode::Combined).unwrap().decay(t, a).unwrap();
        let at = |mode| {
            let s = WarmupSchedule::new(nw, r, mode).unwrap();
            (s.drop_prob(t, a).unwrap(), s.mask_fraction(t, a).unwrap())
        };
        prop_assert_eq!(at(WarmupMode::Combined), (v, v));
        prop_assert_eq!(at(WarmupMode::ArdOnly), (v, 0.0));
        prop_assert_eq!(at(WarmupMode::PrmOnly), (0.0, v));
        prop_assert_eq!(at(WarmupMode::Off), (0.0, 0.0));
    }

    #[test]
    fn expanded_mask_zeroes_whole_patches(k in 0.0f64..=1.0, seed in any::<u64>(), c in 1usize..4, side in 1usize..5, p in 1usize..4) {
        let grid = PatchGrid { channels: c, image_size: side * p, patch_size: p };
        let mask = sample_patch_mask(k, grid.num_patches(), &mut RngState::new(seed)).unwrap();
        let pixels = expand_mask::<f64>(&mask, &grid).unwrap();
        let zeros = pixels.data().iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(zeros, masked_patch_count(grid.num_patches(), k) * p * p * c);
        prop_assert!(pixels.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn schedule_reference_points() {
    let s = WarmupSchedule::new(10, 100, WarmupMode::Combined).unwrap();
    assert_eq!(s.drop_prob(0, 0).unwrap(), 1.0 - 1.0 / 1000.0);
    assert_eq!(s.drop_prob(0, 99).unwrap(), 1.0 - 100.0 / 1000.0);
    assert_eq!(s.drop_prob(10, 42).unwrap(), 0.0);
    assert!(s.drop_prob(0, 100).is_err());
    let zero = WarmupSchedule::new(0, 100, WarmupMode::Combined).unwrap();
    assert_eq!(zero.drop_prob(0, 0).unwrap(), 0.0);
}

#[test]
fn gates_are_closed_with_probability_p() {
    let mut rng = RngState::new(1);
    assert!(sample_gates(0.0, 12, &mut rng).all_open());
    assert!(sample_gates(1.0, 12, &mut rng).as_slice().iter().all(|&g| !g));
    let n = 10_000;
    let open: usize = (0..n).map(|_| sample_gates(0.3, 12, &mut rng).values().iter().map(|&v| v as usize).sum::<usize>()).sum();
    let mean = open as f64 / (n * 12) as f64;
    assert!((0.69..=0.71).contains(&mean), "mean gate {mean}");
}

#[test]
fn floor_is_exact_at_representable_boundaries() {
    assert_eq!(masked_patch_count(16, 0.5), 8);
    assert_eq!(masked_patch_count(16, 1.0), 16);
    assert_eq!(masked_patch_count(10, 0.3), 3);
    assert_eq!(masked_patch_count(64, 0.999), 63);
    assert_eq!(masked_patch_count(16, 0.0), 0);
}

#[test]
fn masked_perturbation_only_moves_unmasked_patch_tokens() {
    let cfg = ViTConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 2.0,
        num_classes: 3,
    };
    let mut rng = RngState::new(2);
    let mut params = ModelParams::<f64>::randomized(&cfg, 0.5, &mut rng);
    params.patch_b = Tensor::zeros(&[8]);
    params.pos_embed = Tensor::zeros(&[17, 8]);
    let n = 3 * 16 * 16;
    let x = Tensor::new(vec![3, 16, 16], (0..n).map(|_| rng.unit()).collect()).unwrap();
    let delta: Vec<f64> = (0..n).map(|_| rng.uniform(-0.03, 0.03)).collect();
    let mask = sample_patch_mask(0.5, 16, &mut rng).unwrap();
    let m = expand_mask::<f64>(&mask, &PatchGrid::from(&cfg)).unwrap();
    let xp = Tensor::new(
        vec![3, 16, 16],
        x.data().iter().zip(&delta).zip(m.data()).map(|((a, d), mv)| a + d * mv).collect(),
    )
    .unwrap();
    let embed = |img: &Tensor<f64>| {
        let mut g = Graph::new();
        let w = bind_params(&mut g, &params, false);
        let v = g.constant(img.clone());
        let z = patch_embed(&mut g, &cfg, v, &w).unwrap();
        g.value(z).data().to_vec()
    };
    let (a, b) = (embed(&x), embed(&xp));
    assert_eq!(a[..8], b[..8]);
    for j in 0..16 {
        let row = (j + 1) * 8..(j + 2) * 8;
        if mask.is_masked(j) {
            assert_eq!(a[row.clone()], b[row]);
        } else {
            assert_ne!(a[row.clone()], b[row]);
        }
    }
}
