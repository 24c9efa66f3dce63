use dynmoe::analytics::RoutingTelemetry;
use dynmoe::curriculum::*;
use dynmoe::fusion::{Checkpoint, StageTag};
use dynmoe::model::is_routed_param;
use dynmoe::moe::routed_active_bound;
use dynmoe::{Error, Tensor};

fn smoke() -> CurriculumConfig {
    CurriculumConfig::preset(Preset::Smoke, 1234)
}

fn spec_with(transitions: Vec<Tensor>, v: usize) -> DomainSpec {
    DomainSpec { name: "T".into(), vocab_size: v, transitions, band: (0, v), len_min: 50, len_max: 50 }
}

#[test]
fn permutation_chain_gives_periodic_sequences() {
    let v = 6;
    // cyclic shift i -> i+1
    let t = Tensor::from_fn(&[v, v], |k| if (k / v + 1) % v == k % v { 1.0 } else { 0.0 });
    let spec = spec_with(vec![t], v);
    for s in generate_domain(&spec, 0, 20, 3).unwrap() {
        for w in s.tokens.windows(2) {
            assert_eq!((w[0] as usize + 1) % v, w[1] as usize);
        }
    }
}

#[test]
fn uniform_chain_has_uniform_unigrams() {
    let v = 16;
    let spec = spec_with(vec![Tensor::full(&[v, v], 1.0 / v as f64)], v);
    let seqs = generate_domain(&spec, 0, 2500, 9).unwrap();
    let mut counts = vec![0f64; v];
    let mut n = 0f64;
    for s in &seqs {
        for &t in &s.tokens {
            counts[t as usize] += 1.0;
            n += 1.0;
        }
    }
    assert!(n >= 1e5);
    let p = 1.0 / v as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c - n * p).abs() <= 3.0 * sigma, "count {c} vs {}", n * p);
    }
}

#[test]
fn generation_is_reproducible_and_domain_ordered() {
    let m = smoke().data;
    let a = Datasets::generate(&m).unwrap();
    let b = Datasets::generate(&m).unwrap();
    assert_eq!(a, b);
    let spec = &a.specs[2];
    assert_eq!(generate_domain(spec, 2, 5, m.seed).unwrap(), generate_domain(spec, 2, 5, m.seed).unwrap());
}

#[test]
fn degenerate_rows_are_rejected() {
    let mut t = Tensor::full(&[4, 4], 0.25);
    t.row_mut(2)[0] = 0.9;
    assert!(matches!(generate_domain(&spec_with(vec![t], 4), 0, 1, 0), Err(Error::Param(_))));
    let mut t = Tensor::full(&[4, 4], 0.25);
    t.row_mut(1)[1] = f64::NAN;
    assert!(generate_domain(&spec_with(vec![t], 4), 0, 1, 0).is_err());
}

#[test]
fn domains_are_distinguishable() {
    let data = Datasets::generate(&DatasetManifest::desk(5)).unwrap();
    for i in 0..4 {
        for j in i + 1..4 {
            assert!(transition_tv(&data.specs[i], &data.specs[j]).unwrap() >= MIN_DOMAIN_TV);
        }
    }
    let same = vec![data.specs[0].clone(), data.specs[0].clone()];
    assert!(check_distinguishable(&same).is_err());
}

#[test]
fn desk_manifest_has_the_intended_imbalance() {
    let m = DatasetManifest::desk(1);
    let shares = m.raw_shares();
    assert_eq!(shares[0], 0.4);
    assert_eq!(shares[3], 0.05);
    assert_eq!(m.warmup_count(), 200);
}

#[test]
fn splits_have_manifest_sizes_and_warmup_is_a_prefix() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    for (i, s) in data.splits.iter().enumerate() {
        assert_eq!(s.raw.len(), cfg.data.raw_counts[i]);
        assert_eq!(s.balanced.len(), cfg.data.balanced_per_domain);
        assert_eq!(s.eval.len(), cfg.data.eval_per_domain);
        assert!(s.raw.iter().chain(&s.balanced).chain(&s.eval).all(|q| q.domain == i));
        assert_eq!(data.warmup(i), &s.balanced[..cfg.data.warmup_count()]);
    }
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = Datasets::generate(&smoke().data).unwrap();
    data.save(dir.path()).unwrap();
    assert_eq!(Datasets::load(dir.path()).unwrap(), data);
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Datasets::load(empty.path()), Err(Error::Missing(_))));
}

#[test]
fn aux_weight_is_linear_with_exact_endpoints() {
    let cfg = StageConfig::new(101, 4, 1e-3, 1e-2, 1e-3);
    assert_eq!(cfg.aux_weight(0), 1e-2);
    assert_eq!(cfg.aux_weight(100), 1e-3);
    assert_eq!(cfg.aux_weight(50), (1e-2 + 1e-3) / 2.0);
    for t in 0..101 {
        let f = t as f64 / 100.0;
        assert_eq!(cfg.aux_weight(t), 1e-2 * (1.0 - f) + 1e-3 * f);
        // the other algebraic form of the same line agrees to rounding
        let alt = 1e-2 + (1e-3 - 1e-2) * t as f64 / 100.0;
        assert!((cfg.aux_weight(t) - alt).abs() <= 4.0 * f64::EPSILON * 1e-2);
    }
    assert_eq!(StageConfig::new(1, 4, 1e-3, 0.5, 0.1).aux_weight(0), 0.5);
}

#[test]
fn cosine_schedule_decays_to_floor() {
    let cfg = StageConfig::new(100, 4, 1e-3, 0.0, 0.0);
    assert_eq!(cfg.learning_rate(0), 1e-3);
    assert!((cfg.learning_rate(50) - 1e-3 * 0.55).abs() < 1e-15);
    assert!((cfg.learning_rate(100) - 1e-4).abs() < 1e-18);
    for t in 1..100 {
        assert!(cfg.learning_rate(t) < cfg.learning_rate(t - 1));
    }
}

#[test]
fn zero_steps_return_the_input_model() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let base = base_model(&cfg).unwrap();
    let stage = StageConfig { steps: 0, ..cfg.specialist.clone() };
    let out = train_stage(&base, StageKind::Specialist, &stage, &data.splits[0].raw, cfg.domains(), 1, 0).unwrap();
    assert_eq!(out.checkpoint.model, base);
    assert!(out.trace.rows.is_empty());
}

fn fused(cfg: &CurriculumConfig, data: &Datasets) -> Checkpoint {
    let specs: Vec<Checkpoint> = (0..4).map(|d| train_specialist(cfg, data, d).unwrap().checkpoint).collect();
    fuse_specialists(cfg, &specs).unwrap().0
}

#[test]
fn warmup_only_touches_gates_and_shared_experts() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let f = fused(&cfg, &data);
    let out = train_warmup(&cfg, &f, &data).unwrap();
    let after = &out.checkpoint.model.params;
    let mut changed_trainable = 0;
    for (name, before) in &f.model.params {
        let same = before.data().iter().zip(after[name].data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if StageKind::Warmup.trains(name) {
            changed_trainable += usize::from(!same);
        } else {
            assert!(same, "{name} changed during warmup");
        }
    }
    assert!(changed_trainable > 0);
    assert!(f.meta.frozen.iter().all(|n| is_routed_param(n)));
    assert_eq!(out.checkpoint.meta.stage, StageTag::Warmup);
}

#[test]
fn stage_mask_must_match_the_model() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let base = base_model(&cfg).unwrap();
    let r = train_stage(&base, StageKind::Warmup, &cfg.warmup, &data.warmup_all(), cfg.domains(), 1, 0);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = train_stage(&base, StageKind::Specialist, &cfg.specialist, &[], cfg.domains(), 1, 0);
    assert!(matches!(r, Err(Error::Empty(_))));
}

#[test]
fn stages_reject_checkpoints_from_the_wrong_stage() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let f = fused(&cfg, &data);
    assert!(matches!(train_joint(&cfg, &f, &data), Err(Error::Config(_))));
}

#[test]
fn runaway_learning_rate_is_a_numeric_failure() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let mut stage = StageConfig::new(400, 8, 50.0, 0.0, 0.0);
    stage.divergence_patience = 5;
    stage.min_lr_ratio = 1.0;
    let err = train_stage(&base_model(&cfg).unwrap(), StageKind::Specialist, &stage, &data.splits[0].raw, cfg.domains(), 1, 0)
        .unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn loss_trace_csv_round_trips() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let out = train_specialist(&cfg, &data, 1).unwrap();
    let csv = out.trace.to_csv().unwrap();
    assert!(csv.starts_with("step,stage,total,primary,aux,aux_weight,lr,loss_A,loss_B,loss_C,loss_D\n"));
    let back = LossTrace::from_csv(&csv).unwrap();
    assert_eq!(back, out.trace);
    assert_eq!(back.to_csv().unwrap(), csv);
    assert_eq!(out.trace.rows.len(), cfg.specialist.steps);
}

#[test]
fn specialist_sees_only_its_domain() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let out = train_specialist(&cfg, &data, 3).unwrap();
    assert!(out.domain_tokens[3] > 0);
    assert_eq!(&out.domain_tokens[..3], &[0, 0, 0]);
    assert!(out.trace.rows.iter().all(|r| r.domain_losses[..3].iter().all(Option::is_none)));
}

#[test]
fn baseline_stream_follows_raw_proportions() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let out = train_dense_baseline(&cfg, &data).unwrap();
    assert_eq!(out.trace.rows.len(), cfg.step_budget());
    let total: u64 = out.domain_tokens.iter().sum();
    let share_a = out.domain_tokens[0] as f64 / total as f64;
    assert!((share_a - 0.4).abs() < 0.02, "{share_a}");
    assert!(out.checkpoint.model.params.iter().all(|(n, t)| t.data() != base_model(&cfg).unwrap().params[n].data()));
}

#[test]
fn specialists_do_not_depend_on_training_order() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let fwd: Vec<_> = (0..4).map(|d| train_specialist(&cfg, &data, d).unwrap().checkpoint.to_bytes().unwrap()).collect();
    let mut rev: Vec<_> = (0..4).rev().map(|d| train_specialist(&cfg, &data, d).unwrap().checkpoint.to_bytes().unwrap()).collect();
    rev.reverse();
    assert_eq!(fwd, rev);
}

#[test]
fn pipeline_emits_seven_checkpoints_and_is_deterministic() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = run_curriculum(&cfg, &data, Some(dir.path())).unwrap();
    assert_eq!(a.checkpoints().len(), 7);
    let files = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ckpt").count();
    assert_eq!(files, 7);
    let b = run_curriculum(&cfg, &data, None).unwrap();
    assert_eq!(a.joint.checkpoint.to_bytes().unwrap(), b.joint.checkpoint.to_bytes().unwrap());
    let loaded = Checkpoint::load(&dir.path().join("joint.ckpt")).unwrap();
    assert_eq!(loaded, a.joint.checkpoint);
}

#[test]
fn routed_counts_stay_within_bounds_during_training() {
    for n_null in [1, 0] {
        let mut cfg = smoke();
        cfg.fusion.n_null = n_null;
        let data = Datasets::generate(&cfg.data).unwrap();
        let run = run_curriculum(&cfg, &data, None).unwrap();
        let (nr, p) = (8, 0.7);
        let (lo, hi) = if n_null == 0 { (1, (p * nr as f64).ceil() as usize) } else { (0, routed_active_bound(p, nr, n_null)) };
        for tel in [run.warmup.telemetry.as_ref().unwrap(), run.joint.telemetry.as_ref().unwrap()] {
            for c in tel.layers.values() {
                for (k, &n) in c.active_hist.iter().enumerate() {
                    assert!(n == 0 || (lo..=hi).contains(&k), "k={k} outside [{lo},{hi}] with {n_null} nulls");
                }
            }
        }
    }
}

#[test]
fn eval_reports_every_domain_and_records_telemetry() {
    let cfg = smoke();
    let data = Datasets::generate(&cfg.data).unwrap();
    let f = fused(&cfg, &data);
    let mut tel = RoutingTelemetry::new(8, 1, cfg.domains().to_vec());
    let r = evaluate(&f.model, &data.eval_all(), cfg.domains(), 7, Some(&mut tel)).unwrap();
    assert!(r.losses.iter().all(|l| l.unwrap().is_finite()));
    assert_eq!(tel.layers.len(), cfg.model.n_layers);
    let one = evaluate(&f.model, &data.eval_all(), cfg.domains(), 1000, None).unwrap();
    for d in 0..4 {
        assert!((r.loss(d).unwrap() - one.loss(d).unwrap()).abs() < 1e-12);
    }
    assert!(matches!(evaluate(&f.model, &[], cfg.domains(), 4, None), Err(Error::Empty(_))));
}

#[test]
fn config_round_trips_through_toml() {
    for p in [Preset::Smoke, Preset::Full] {
        let cfg = CurriculumConfig::preset(p, 77);
        assert_eq!(CurriculumConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.dense_baseline.steps, cfg.step_budget());
    }
    assert!("huge".parse::<Preset>().is_err());
    let mut bad = smoke();
    bad.model.vocab_size = 10;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
