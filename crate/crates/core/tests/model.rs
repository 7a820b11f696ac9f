use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xego::dataset::{segment_round, Task, WindowConfig};
use xego::model::{check_single_team, FrozenExtractor, Model, ModelConfig};
use xego::ndmath::Tensor;
use xego::objectives::ContrastiveParams;
use xego::sim::{build_default_map, generate_round, ObsConfig, SimConfig, Team, FRAME_DIM, N_AREAS};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d_h: 16,
        d_enc: 12,
        d_proj: 8,
        d_agg: 10,
        d_s: 4,
        pov_sizes: vec![1, 2, 3, 4, 5],
    }
}

fn model(seed: u64) -> Model {
    Model::new(small_cfg(), FRAME_DIM, seed, ContrastiveParams::default(), true).unwrap()
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
    Tensor::new(&[t, FRAME_DIM], (0..t * FRAME_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn embeddings_are_unit_and_deterministic_on_real_segments() {
    let map = build_default_map();
    let round = generate_round(&map, &SimConfig::desk(), 2);
    let segs = segment_round(&map, &round, &WindowConfig::default(), &ObsConfig::default(), 0).unwrap();
    let m = model(7);
    for s in &segs {
        let e = m.encode(s).unwrap();
        let norm = e.u.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        assert_eq!(e, m.encode(&s.clone()).unwrap());
        assert_eq!(e.embedding.len(), 8);
    }
    assert_eq!(model(7).encode(&segs[0]).unwrap(), m.encode(&segs[0]).unwrap());
}

#[test]
fn extractor_rejects_wrong_width() {
    let ex = FrozenExtractor::new(FRAME_DIM, 16, 12, 0);
    assert!(ex.encode(&Tensor::zeros(&[20, FRAME_DIM - 1])).is_err());
    assert_eq!(ex.encode(&Tensor::zeros(&[20, FRAME_DIM])).unwrap().len(), 12);
}

#[test]
fn predictions_have_one_logit_per_area() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embs: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    for k in 1..=5 {
        let refs: Vec<&[f64]> = embs[..k].iter().map(Vec::as_slice).collect();
        for task in Task::ALL {
            assert_eq!(m.predict(&refs, Team::T, task).unwrap().len(), N_AREAS);
        }
    }
    let refs: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
    assert!(m.predict(&[], Team::T, Task::Tln).is_err());
    assert!(m.predict(&[refs[0]; 6], Team::T, Task::Tln).is_err());
}

#[test]
fn concatenation_is_order_sensitive() {
    let m = model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let embs: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let fwd: Vec<&[f64]> = embs.iter().map(Vec::as_slice).collect();
    let rev: Vec<&[f64]> = embs.iter().rev().map(Vec::as_slice).collect();
    let a = m.predict(&fwd, Team::CT, Task::Eln).unwrap();
    let b = m.predict(&rev, Team::CT, Task::Eln).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, m.predict(&fwd, Team::CT, Task::Eln).unwrap());
}

#[test]
fn side_row_changes_logits() {
    let m = model(5);
    let e = vec![0.3; 8];
    let t = m.predict(&[&e], Team::T, Task::Tln).unwrap();
    let ct = m.predict(&[&e], Team::CT, Task::Tln).unwrap();
    assert_ne!(t, ct);
}

#[test]
fn mixed_team_subsets_rejected() {
    assert_eq!(check_single_team(&[Team::CT, Team::CT]).unwrap(), Team::CT);
    assert!(check_single_team(&[Team::T, Team::CT]).is_err());
    assert!(check_single_team(&[]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = model(9);
    let mut buf = Vec::new();
    m.save(&mut buf).unwrap();
    let back = Model::load(&buf[..]).unwrap();
    assert_eq!(back.cfg, m.cfg);
    assert_eq!(back.extractor.digest(), m.extractor.digest());
    assert_eq!(back.params.digest(""), m.params.digest(""));
    assert_eq!(back.contrastive().unwrap(), m.contrastive().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames = random_frames(&mut rng, 6);
    let pooled = m.extractor.encode(&frames).unwrap();
    let e = m.encode_pooled(&pooled).unwrap();
    assert_eq!(back.encode_pooled(&back.extractor.encode(&frames).unwrap()).unwrap(), e);
    assert_eq!(
        back.predict(&[&e.embedding], Team::T, Task::Tln).unwrap(),
        m.predict(&[&e.embedding], Team::T, Task::Tln).unwrap()
    );

    let mut bad = buf.clone();
    bad[1] = b'?';
    assert!(Model::load(&bad[..]).is_err());
    assert!(Model::load(&buf[..buf.len() / 2]).is_err());
}

#[test]
fn frozen_bias_stays_out_of_optimization() {
    let m = Model::new(small_cfg(), FRAME_DIM, 1, ContrastiveParams::new(10.0, 0.0).unwrap(), false).unwrap();
    let (_, b) = m.params.iter().find(|(k, _)| *k == "contrastive.b").unwrap();
    assert!(!b.trainable);
    let (_, t) = m.params.iter().find(|(k, _)| *k == "contrastive.t_log").unwrap();
    assert!(t.trainable);
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = small_cfg();
    cfg.pov_sizes = vec![0];
    assert!(Model::new(cfg, FRAME_DIM, 0, ContrastiveParams::default(), true).is_err());
    let mut cfg = small_cfg();
    cfg.d_proj = 0;
    assert!(Model::new(cfg, FRAME_DIM, 0, ContrastiveParams::default(), true).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_ignores_frame_order(seed in any::<u64>(), t in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = random_frames(&mut rng, t);
        let mut order: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Tensor::new(
            &[t, FRAME_DIM],
            order.iter().flat_map(|&i| frames.row(i).to_vec()).collect(),
        )
        .unwrap();
        let m = model(seed ^ 0x55);
        let a = m.encode_pooled(&m.extractor.encode(&frames).unwrap()).unwrap();
        let b = m.encode_pooled(&m.extractor.encode(&shuffled).unwrap()).unwrap();
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let norm = a.u.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
    }
}
