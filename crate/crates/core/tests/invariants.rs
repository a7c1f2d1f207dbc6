mod common;

use able_core::diffcore::{Checkpoint, Graph};
use able_core::model::{build_ray_mask, AbleModel, AttentionMask, ModelConfig, SampleOptions, TokenSequence, LE_BANK, RAY_TOKEN_INIT};
use able_core::sampling::stratified_intervals;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{freeze_samples, some_rays};

fn random_sequence(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TokenSequence<f64> {
    let mut token = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    TokenSequence { ray_token: token(), volume_tokens: (0..n).map(|_| token()).collect() }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_block_ignores_rear_volumes(seed in 0u64..1000, n in 2usize..10, i in 0usize..9) {
        let i = i % (n - 1);
        let model: AbleModel<f64> = AbleModel::init(ModelConfig::tiny(), seed).unwrap().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(&mut rng, n, model.config.dim);
        let mut bumped = seq.clone();
        for t in &mut bumped.volume_tokens[i + 1..] {
            t.iter_mut().for_each(|v| *v += rng.random_range(-2.0..2.0));
        }
        let mask = build_ray_mask(n);
        let a = model.ab_blocks_values("coarse", 0, 1, &seq, &mask).unwrap();
        let b = model.ab_blocks_values("coarse", 0, 1, &bumped, &mask).unwrap();
        for j in 0..=i {
            prop_assert!(max_diff(&a.volume_tokens[j], &b.volume_tokens[j]) < 1e-12);
        }
        prop_assert!(max_diff(&a.ray_token, &b.ray_token) > 0.0);
    }

    #[test]
    fn unmasked_block_sees_rear_volumes(seed in 0u64..1000, n in 2usize..10) {
        let model: AbleModel<f64> = AbleModel::init(ModelConfig::tiny(), seed).unwrap().cast();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = random_sequence(&mut rng, n, model.config.dim);
        let mut bumped = seq.clone();
        bumped.volume_tokens[n - 1].iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        let mask = AttentionMask::unmasked(n);
        let a = model.ab_blocks_values("coarse", 0, 1, &seq, &mask).unwrap();
        let b = model.ab_blocks_values("coarse", 0, 1, &bumped, &mask).unwrap();
        prop_assert!(max_diff(&a.volume_tokens[0], &b.volume_tokens[0]) > 1e-9);
    }

    #[test]
    fn ray_outputs_are_well_formed(seed in 0u64..1000, rays in 1usize..4) {
        let model = AbleModel::init(ModelConfig::tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ray in some_rays(rays) {
            let o = model.render_ray(&ray, 2.0, 6.0, Some(&mut rng)).unwrap();
            prop_assert!(o.rgb_fine.iter().chain(&o.rgb_coarse).all(|c| (0.0..=1.0).contains(c)));
            for attn in [&o.attn_coarse, &o.attn_fine] {
                prop_assert!(attn.iter().all(|&a| a >= 0.0));
                prop_assert!((attn.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
            prop_assert!(o.fine_intervals.iter().all(|iv| 2.0 <= iv.t0 && iv.t1 <= 6.0));
        }
    }
}

#[test]
fn multi_layer_stack_is_not_prefix_truncatable() {
    let cfg = ModelConfig { coarse_layers: 2, ..ModelConfig::tiny() };
    let model: AbleModel<f64> = AbleModel::init(cfg, 3).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_sequence(&mut rng, 4, model.config.dim);
    let full = model.ab_blocks_values("coarse", 0, 2, &seq, &build_ray_mask(4)).unwrap();
    let part = model.ab_blocks_values("coarse", 0, 2, &seq.prefix(1), &build_ray_mask(1)).unwrap();
    assert!(max_diff(&full.volume_tokens[0], &part.volume_tokens[0]) > 1e-9);
}

#[test]
fn direct_colour_has_no_gradient_from_le_bank() {
    let model: AbleModel<f64> = AbleModel::init(ModelConfig::tiny(), 8).unwrap().cast();
    let rays = some_rays(3);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let pass = model.forward(&mut g, &p, &rays, 2.0, 6.0, &mut SampleOptions::default()).unwrap();
    let direct = g.sum(pass.fine.direct).unwrap();
    let coarse_direct = g.sum(pass.coarse.direct).unwrap();
    let both = g.add(direct, coarse_direct).unwrap();
    g.backward(both).unwrap();
    let bank = p.get(LE_BANK).unwrap();
    assert!(g.grad(bank).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    let init = p.get(RAY_TOKEN_INIT).unwrap();
    assert!(g.grad(init).is_some_and(|gr| gr.iter().any(|&v| v != 0.0)));
}

#[test]
fn coarse_ray_token_feeds_fine_network() {
    let model: AbleModel<f64> = AbleModel::init(ModelConfig::tiny(), 12).unwrap().cast();
    let rays = some_rays(2);
    let s = freeze_samples(&model, &rays, 2.0, 6.0);
    let fine_rgb = |m: &AbleModel<f64>| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, false);
        let mut opts = SampleOptions { coarse_override: Some(&s.coarse), fine_override: Some(&s.fine), ..Default::default() };
        let pass = m.forward(&mut g, &p, &rays, 2.0, 6.0, &mut opts).unwrap();
        g.value(pass.fine.direct).to_vec()
    };
    let base = fine_rgb(&model);
    let mut bumped = model.clone();
    for (i, v) in bumped.params.get_mut("coarse/ab/0/ff/l2/b").unwrap().data_mut().iter_mut().enumerate() {
        *v += 0.1 * (i as f64).sin();
    }
    assert!(max_diff(&base, &fine_rgb(&bumped)) > 1e-9);
    let mut coarse_head_only = model.clone();
    for (i, v) in coarse_head_only.params.get_mut("coarse/head/l2/b").unwrap().data_mut().iter_mut().enumerate() {
        *v += 0.1 * (i as f64).sin();
    }
    assert_eq!(base, fine_rgb(&coarse_head_only));
}

#[test]
fn checkpoint_round_trip_reproduces_renders() {
    let model = AbleModel::init(ModelConfig::tiny(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(serde_json::json!({})).save(&path).unwrap();
    let back = AbleModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let rays = some_rays(4);
    assert_eq!(model.render_rays(&rays, 2.0, 6.0, 3).unwrap(), back.render_rays(&rays, 2.0, 6.0, 2).unwrap());
}

#[test]
fn no_mask_flag_is_recorded_in_checkpoint() {
    let model = AbleModel::init(ModelConfig { use_mask: false, n_le: 0, ..ModelConfig::tiny() }, 1).unwrap();
    let ck = model.to_checkpoint(serde_json::json!({}));
    assert_eq!(ck.metadata["no_mask"], true);
    assert_eq!(ck.metadata["no_le"], true);
    assert!(ck.get(LE_BANK).is_none());
    assert!(!AbleModel::from_checkpoint(&ck).unwrap().config.use_mask);
}

#[test]
fn jittered_sampling_is_seeded() {
    let mut a = ChaCha8Rng::seed_from_u64(5);
    let mut b = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(stratified_intervals(2.0, 6.0, 16, Some(&mut a)).unwrap(), stratified_intervals(2.0, 6.0, 16, Some(&mut b)).unwrap());
}
