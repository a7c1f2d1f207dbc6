use super::*;
use crate::sampling::{generate_rays, Camera};
use nalgebra::{Matrix4, Vector3};

fn test_rays(n: usize) -> Vec<Ray> {
    let pose = Matrix4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 4.0, 0.0, 0.0, 0.0, 1.0);
    let cam = Camera::new(8, 8, 10.0, pose).unwrap();
    let px: Vec<_> = (0..n).map(|i| (i % 8, (3 * i) % 8)).collect();
    generate_rays(&cam, &px).unwrap()
}

#[test]
fn ray_mask_shape() {
    let m = build_ray_mask(3);
    let a = m.allowed();
    assert_eq!(a.row(0), &[true; 4]);
    assert_eq!(a.row(1), &[true, true, false, false]);
    assert_eq!(a.row(3), &[true; 4]);
    for r in 0..4 {
        assert!(a.count_row(r) >= 1);
    }
    assert_eq!(build_ray_mask(0).allowed().row(0), &[true]);
}

#[test]
fn tone_map_examples() {
    assert_eq!(tone_map([0.0; 3], [0.0; 3]).unwrap(), [0.0; 3]);
    let v = tone_map([0.5; 3], [0.5; 3]).unwrap();
    assert!(v.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    let v = tone_map([0.0018; 3], [0.0; 3]).unwrap();
    assert!((v[0] - 12.92 * 0.0018).abs() < 1e-12);
    assert_eq!(tone_map([2.0; 3], [3.0; 3]).unwrap(), [1.0; 3]);
    assert!(matches!(tone_map([-0.1, 0.0, 0.0], [0.0; 3]), Err(ModelError::NegativeRadiance(_))));
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig { dim: 30, ..ModelConfig::tiny() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { coarse_samples: 1, ..ModelConfig::tiny() };
    assert!(bad.validate().is_err());
}

#[test]
fn forward_outputs_are_well_formed() {
    let model = AbleModel::init(ModelConfig::tiny(), 3).unwrap();
    let rays = test_rays(3);
    let out = model.render_rays(&rays, 2.0, 6.0, 2).unwrap();
    assert_eq!(out.len(), 3);
    for o in &out {
        assert!(o.rgb_fine.iter().chain(&o.rgb_coarse).all(|c| (0.0..=1.0).contains(c)));
        assert!(o.direct_rgb.iter().chain(&o.viewdep_rgb).all(|&c| c >= 0.0));
        assert!((o.attn_fine.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert_eq!(o.fine_intervals.len(), 8);
        assert!(o.fine_intervals.windows(2).all(|w| w[0].t1 == w[1].t0));
        assert!(o.depth >= 2.0 && o.depth <= 6.0 * rays[0].direction.norm());
    }
    let again = model.render_rays(&rays, 2.0, 6.0, 3).unwrap();
    assert_eq!(out, again);
}

#[test]
fn no_le_gives_zero_viewdep() {
    let model = AbleModel::init(ModelConfig { n_le: 0, ..ModelConfig::tiny() }, 1).unwrap();
    assert!(!model.params.contains(LE_BANK));
    let out = model.render_rays(&test_rays(2), 2.0, 6.0, 8).unwrap();
    assert!(out.iter().all(|o| o.viewdep_rgb == [0.0; 3]));
}

#[test]
fn ab_transformer_rejects_mask_mismatch() {
    let model = AbleModel::init(ModelConfig::tiny(), 0).unwrap();
    let seq = TokenSequence { ray_token: vec![0.1f32; 32], volume_tokens: vec![vec![0.2; 32]; 3] };
    assert!(model.ab_blocks_values("coarse", 0, 1, &seq, &build_ray_mask(5)).is_err());
    assert!(model.ab_blocks_values("coarse", 0, 1, &seq, &build_ray_mask(3)).is_ok());
}

#[test]
fn le_branch_rejects_bad_width() {
    let model = AbleModel::init(ModelConfig::tiny(), 0).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let vol = g.constant(&[1, 3, 16], vec![0.0f32; 48]).unwrap();
    let view = model.encode_view_token(&mut g, &p, "fine", &[Vector3::new(0.0, 0.0, -1.0)]).unwrap();
    assert!(model.le_transformer(&mut g, &p, "fine", vol, Some(view)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let model = AbleModel::init(ModelConfig::tiny(), 9).unwrap();
    let ck = model.to_checkpoint(serde_json::json!({"iter": 3}));
    assert_eq!(ck.metadata["iter"], 3);
    let back = AbleModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    for (name, t) in model.params.iter() {
        assert_eq!(back.params.get(name).unwrap().data(), t.data());
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = AbleModel::init(ModelConfig::tiny(), 5).unwrap();
    let b = AbleModel::init(ModelConfig::tiny(), 5).unwrap();
    let c = AbleModel::init(ModelConfig::tiny(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
