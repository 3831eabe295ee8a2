//! Encoder, adapter, parameter heads, initialization schemes, and the
//! checkpoint round-trip.

use mtpc::circuit::{build, build_cp, build_ff, build_hmm, ArchKind, ArchitectureSpec};
use mtpc::inference::{enumerate_joint, total_variation};
use mtpc::neural::{
    encode, encode_draft, init_btree_from_ff, init_cp_from_ff, init_hmm_identity,
    load_checkpoint, parameterize, save_checkpoint, target_next_dist, DraftAdapter, ModelBundle,
    ParamHead, Pooling, TargetStp, ToyBackbone,
};
use mtpc::{Error, Rng};
use rand::{Rng as _, SeedableRng};

fn backbone(v: usize, d: usize, l: usize, seed: u64) -> ToyBackbone {
    let mut rng = Rng::seed_from_u64(seed);
    ToyBackbone::random(v, d, l, Pooling::default(), &mut rng)
}

#[test]
fn encoding_is_deterministic_with_the_declared_width() {
    let bb = backbone(6, 5, 3, 1);
    let e1 = encode(&bb, &[0, 3, 5]).unwrap();
    let e2 = encode(&bb, &[0, 3, 5]).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.len(), 5);
}

#[test]
fn the_last_token_reaches_the_embedding() {
    for seed in 0..5u64 {
        let bb = backbone(8, 6, 2, seed);
        let mut rng = Rng::seed_from_u64(seed + 100);
        let mut prefix: Vec<usize> = (0..6).map(|_| rng.random_range(0..8)).collect();
        let a = encode(&bb, &prefix).unwrap();
        let last = prefix[5];
        prefix[5] = (last + 1) % 8;
        let b = encode(&bb, &prefix).unwrap();
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap > 1e-9, "seed {seed}: last token ignored");
    }
}

#[test]
fn recency_pooling_separates_permuted_prefixes() {
    let mut rng = Rng::seed_from_u64(9);
    let recency = ToyBackbone::random(4, 5, 2, Pooling::Recency { beta: 0.75 }, &mut rng);
    let a = encode(&recency, &[0, 1]).unwrap();
    let b = encode(&recency, &[1, 0]).unwrap();
    assert_ne!(a, b);

    // The running mean only sees the token histogram.
    let mut rng = Rng::seed_from_u64(9);
    let uniform = ToyBackbone::random(4, 5, 2, Pooling::Uniform, &mut rng);
    let a = encode(&uniform, &[0, 1]).unwrap();
    let b = encode(&uniform, &[1, 0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoding_contracts_reject_bad_prefixes() {
    let bb = backbone(4, 5, 2, 2);
    assert!(matches!(encode(&bb, &[]), Err(Error::Contract(_))));
    assert!(matches!(encode(&bb, &[0, 4]), Err(Error::Contract(_))));
    let adapter = DraftAdapter::new(1, 2, 5, &mut Rng::seed_from_u64(3));
    assert!(matches!(encode_draft(&bb, &adapter, &[]), Err(Error::Contract(_))));
    let deep = DraftAdapter::new(3, 2, 5, &mut Rng::seed_from_u64(3));
    assert!(matches!(encode_draft(&bb, &deep, &[0]), Err(Error::Contract(_))));
}

#[test]
fn fresh_adapters_leave_the_embedding_untouched() {
    let bb = backbone(6, 5, 3, 4);
    let mut rng = Rng::seed_from_u64(5);
    let prefix = [2, 0, 5, 1];
    let base = encode(&bb, &prefix).unwrap();
    for k in 0..=3 {
        let adapter = DraftAdapter::new(k, 2, 5, &mut rng);
        let draft = encode_draft(&bb, &adapter, &prefix).unwrap();
        assert_eq!(draft, base, "k = {k}: zero deltas must be exact");
    }
}

#[test]
fn a_trained_adapter_shares_the_trunk_but_not_the_top() {
    let bb = backbone(6, 5, 3, 6);
    let mut rng = Rng::seed_from_u64(7);
    let k = 2;
    let mut adapter = DraftAdapter::new(k, 2, 5, &mut rng);
    for x in &mut adapter.layers[0].b {
        *x = rng.random::<f64>() - 0.5;
    }
    let prefix = [1, 4, 2];
    let mut pool = bb.pool_init();
    for &t in &prefix {
        bb.pool_push(&mut pool, t);
    }
    let trunk_h = bb.trunk(&bb.pooled(&pool), k);
    // Both paths consume the same trunk activations; only the last k
    // layers diverge.
    assert_eq!(bb.finish_base(&trunk_h, k), encode(&bb, &prefix).unwrap());
    let draft = adapter.finish_draft(&bb, &trunk_h);
    assert_eq!(draft, encode_draft(&bb, &adapter, &prefix).unwrap());
    assert_ne!(draft, encode(&bb, &prefix).unwrap());
}

#[test]
fn parameterization_lands_on_the_simplex_for_wild_weights() {
    let mut rng = Rng::seed_from_u64(11);
    for kind in [ArchKind::Ff, ArchKind::Cp, ArchKind::Hmm, ArchKind::BTree] {
        let r = if kind == ArchKind::Ff { 1 } else { 3 };
        let c = build(ArchitectureSpec::new(kind, 3, r, 4).unwrap()).unwrap();
        let head = ParamHead::random(&c, 5, 30.0, &mut rng);
        let e: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let params = parameterize(&head, &c, &e).unwrap();
        params.validate_for(&c).unwrap();
    }
}

#[test]
fn zero_heads_emit_uniform_tables() {
    let c = build_cp(2, 3, 2).unwrap();
    let mut head = ParamHead::random(&c, 4, 0.5, &mut Rng::seed_from_u64(12));
    head.w.iter_mut().for_each(|w| *w = 0.0);
    for s in &mut head.sums {
        s.r.iter_mut().for_each(|w| *w = 0.0);
        s.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let params = parameterize(&head, &c, &[0.3, -0.2, 0.9, 0.1]).unwrap();
    for group in &params.phi {
        for row in group {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() <= 1e-12);
            }
        }
    }
    for &p in &params.omega[0][0] {
        assert!((p - 0.5).abs() <= 1e-12);
    }
}

#[test]
fn parameterization_contracts_catch_mismatches() {
    let c = build_cp(2, 3, 2).unwrap();
    let head = ParamHead::random(&c, 4, 0.5, &mut Rng::seed_from_u64(13));
    assert!(matches!(parameterize(&head, &c, &[0.0; 3]), Err(Error::Contract(_))));
    let other = build_cp(2, 3, 3).unwrap();
    assert!(matches!(parameterize(&head, &other, &[0.0; 4]), Err(Error::Contract(_))));
    assert!(matches!(head.shapes_match(&other), Err(Error::Contract(_))));
}

#[test]
fn the_target_head_reproduces_softmax_arithmetic() {
    // Logits (1, 0, 0): softmax = (e, 1, 1) / (e + 2).
    let stp = TargetStp {
        v: 3,
        d: 3,
        u: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    };
    let p = target_next_dist(&stp, &[1.0, 0.0, 0.0]);
    assert!((p[0] - 0.5761).abs() <= 1e-4);
    assert!((p[1] - 0.2119).abs() <= 1e-4);
    assert!((p[2] - 0.2119).abs() <= 1e-4);
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

    let zero = TargetStp { v: 4, d: 2, u: vec![0.0; 8] };
    for &p in &target_next_dist(&zero, &[0.7, -0.3]) {
        assert!((p - 0.25).abs() <= 1e-12);
    }

    // Adding a constant to every logit changes nothing.
    let mut shifted = stp.clone();
    for t in 0..3 {
        shifted.u[t * 3 + 1] += 7.0;
    }
    let q = target_next_dist(&shifted, &[1.0, 1.0, 0.0]);
    let base = target_next_dist(&stp, &[1.0, 1.0, 0.0]);
    for (a, b) in q.iter().zip(&base) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn rank_lift_preserves_the_joint_for_every_context() {
    let mut rng = Rng::seed_from_u64(21);
    let ff = build_ff(2, 3).unwrap();
    let cp = build_cp(2, 3, 3).unwrap();
    let ff_head = ParamHead::random(&ff, 4, 0.8, &mut rng);
    let cp_head = init_cp_from_ff(&ff_head, 3, &mut rng).unwrap();
    for seed in 0..6u64 {
        let mut erng = Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..4).map(|_| erng.random::<f64>() * 2.0 - 1.0).collect();
        let want = enumerate_joint(&ff, &parameterize(&ff_head, &ff, &e).unwrap()).unwrap();
        let got = enumerate_joint(&cp, &parameterize(&cp_head, &cp, &e).unwrap()).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9);
        }
        // Symmetry is already broken: the mixture row is not uniform.
        let params = parameterize(&cp_head, &cp, &e).unwrap();
        let row = &params.omega[0][0];
        assert!(row.iter().any(|&p| (p - row[0]).abs() > 1e-12));
    }
    let same = init_cp_from_ff(&ff_head, 1, &mut rng).unwrap();
    assert_eq!(same.w, ff_head.w);
    // Lifting a head that is already rank 2 is rejected.
    let cp2 = build_cp(2, 3, 2).unwrap();
    let wide = ParamHead::random(&cp2, 4, 0.5, &mut rng);
    assert!(matches!(init_cp_from_ff(&wide, 3, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn identity_biased_chains_track_the_mixture_joint() {
    let mut rng = Rng::seed_from_u64(31);
    let ff = build_ff(3, 3).unwrap();
    let cp = build_cp(3, 3, 4).unwrap();
    let hmm = build_hmm(3, 3, 4).unwrap();
    let ff_head = ParamHead::random(&ff, 4, 0.8, &mut rng);
    let cp_head = init_cp_from_ff(&ff_head, 4, &mut rng).unwrap();
    let hmm_head = init_hmm_identity(&cp_head, 10.0).unwrap();
    let e: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
    let cp_params = parameterize(&cp_head, &cp, &e).unwrap();
    let hmm_params = parameterize(&hmm_head, &hmm, &e).unwrap();
    let want = enumerate_joint(&cp, &cp_params).unwrap();
    let near = enumerate_joint(&hmm, &hmm_params).unwrap();
    assert!(total_variation(&near, &want) <= 1e-3);

    // Exact identity transitions, injected past the softmax, close the
    // gap completely: the chain collapses to a single shared latent.
    let mut exact = hmm_params.clone();
    for table in &mut exact.omega[..2] {
        for (z, row) in table.iter_mut().enumerate() {
            for (zz, p) in row.iter_mut().enumerate() {
                *p = if z == zz { 1.0 } else { 0.0 };
            }
        }
    }
    exact.omega[2] = cp_params.omega[0].clone();
    for i in 0..3 {
        exact.phi[i] = cp_params.phi[i].clone();
    }
    let got = enumerate_joint(&hmm, &exact).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9);
    }

    assert!(matches!(init_hmm_identity(&cp_head, 0.0), Err(Error::Contract(_))));
    assert!(matches!(init_hmm_identity(&ff_head, -1.0), Err(Error::Contract(_))));
}

#[test]
fn the_identity_bias_hits_the_stated_diagonal_mass() {
    // softmax of (beta, 0, ..., 0) at beta = 10 over 32 entries:
    // diagonal = 1 / (1 + 31 e^{-10}).
    let c = build_hmm(2, 2, 32).unwrap();
    let ff = build_ff(2, 2).unwrap();
    let ff_head = ParamHead::random(&ff, 4, 0.5, &mut Rng::seed_from_u64(41));
    let cp_head = init_cp_from_ff(&ff_head, 32, &mut Rng::seed_from_u64(42)).unwrap();
    let hmm_head = init_hmm_identity(&cp_head, 10.0).unwrap();
    let params = parameterize(&hmm_head, &c, &[0.1, -0.4, 0.8, 0.0]).unwrap();
    let closed = 1.0 / (1.0 + 31.0 * (-10.0f64).exp());
    for (z, row) in params.omega[0].iter().enumerate() {
        assert!((row[z] - closed).abs() <= 1e-12);
        assert!((row[z] - 0.99859).abs() <= 1e-5);
    }
}

#[test]
fn hierarchy_lift_stays_within_tolerance_of_the_base_joint() {
    let mut rng = Rng::seed_from_u64(51);
    let ff = build_ff(4, 2).unwrap();
    let ff_head = ParamHead::random(&ff, 4, 0.8, &mut rng);
    let bt = build(ArchitectureSpec::new(ArchKind::BTree, 4, 4, 2).unwrap()).unwrap();
    let bt_head = init_btree_from_ff(&ff_head, 4, 10.0, &mut rng).unwrap();
    let e: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
    let want = enumerate_joint(&ff, &parameterize(&ff_head, &ff, &e).unwrap()).unwrap();
    let got = enumerate_joint(&bt, &parameterize(&bt_head, &bt, &e).unwrap()).unwrap();
    assert!(total_variation(&got, &want) <= 1e-3);

    // Rank 1 is exact, and the lift is reproducible under its seed.
    let bt1 = build(ArchitectureSpec::new(ArchKind::BTree, 4, 1, 2).unwrap()).unwrap();
    let head1 = init_btree_from_ff(&ff_head, 1, 10.0, &mut Rng::seed_from_u64(0)).unwrap();
    let exact = enumerate_joint(&bt1, &parameterize(&head1, &bt1, &e).unwrap()).unwrap();
    for (a, b) in exact.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9);
    }
    let again = init_btree_from_ff(&ff_head, 4, 10.0, &mut Rng::seed_from_u64(7)).unwrap();
    let twice = init_btree_from_ff(&ff_head, 4, 10.0, &mut Rng::seed_from_u64(7)).unwrap();
    assert_eq!(again, twice);
    assert!(matches!(
        init_btree_from_ff(&ff_head, 4, 0.0, &mut rng),
        Err(Error::Contract(_))
    ));
}

fn toy_bundle(seed: u64) -> ModelBundle {
    let mut rng = Rng::seed_from_u64(seed);
    let arch = ArchitectureSpec::new(ArchKind::Hmm, 3, 2, 5).unwrap();
    let circuit = build(arch).unwrap();
    let backbone = ToyBackbone::random(5, 4, 3, Pooling::default(), &mut rng);
    let mut adapter = DraftAdapter::new(2, 2, 4, &mut rng);
    for x in &mut adapter.layers[1].b {
        *x = rng.random::<f64>() - 0.5;
    }
    let head = ParamHead::random(&circuit, 4, 0.6, &mut rng);
    let stp = TargetStp::random(5, 4, 1.0, &mut rng);
    ModelBundle { backbone, adapter, head, stp, arch }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let bundle = toy_bundle(61);
    let mut buf = Vec::new();
    save_checkpoint(&bundle, &mut buf).unwrap();
    let back = load_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, bundle);
    // The loaded bundle behaves identically, not just structurally.
    let e = encode(&back.backbone, &[0, 2, 4]).unwrap();
    assert_eq!(e, encode(&bundle.backbone, &[0, 2, 4]).unwrap());
}

#[test]
fn damaged_checkpoints_are_refused() {
    let bundle = toy_bundle(62);
    let mut buf = Vec::new();
    save_checkpoint(&bundle, &mut buf).unwrap();
    let mut doc: serde_json::Value = serde_json::from_slice(&buf).unwrap();

    let mut wrong_format = doc.clone();
    wrong_format["format"] = "mtpc-ckpt-9".into();
    let text = wrong_format.to_string();
    assert!(matches!(load_checkpoint(&mut text.as_bytes()), Err(Error::Spec(_))));

    let mut missing = doc.clone();
    missing["tensors"].as_object_mut().unwrap().remove("stp.u");
    let text = missing.to_string();
    assert!(matches!(load_checkpoint(&mut text.as_bytes()), Err(Error::Spec(_))));

    doc["tensors"]["embed"]["shape"] = serde_json::json!([1, 1]);
    let text = doc.to_string();
    assert!(matches!(load_checkpoint(&mut text.as_bytes()), Err(Error::Spec(_))));
}
