use cadaseg::config::{ExperimentConfig, FinetuneScope, Method};
use cadaseg::data::{generate_synthetic_domains, DomainDatasets, SplitCounts, StructureKind, SyntheticStyle};
use cadaseg::eval::mean_dice;
use cadaseg::model::{build_model, Architecture, ModelParams};
use cadaseg::trainer::{finetune_run, train};
use cadaseg::{DomainId, Error};

fn tiny(method: Method, k_max: usize) -> (ExperimentConfig, DomainDatasets) {
    let mut cfg = ExperimentConfig::desk(method);
    cfg.seed = 5;
    cfg.model = Architecture::new(vec![2, 4], 3);
    cfg.train.k_max = k_max;
    cfg.train.validate_every = 0;
    cfg.train.finetune_iters = 3;
    cfg.data.size = Some(16);
    cfg.data.counts = Some(SplitCounts {
        source_labeled: 6,
        target_labeled: 4,
        target_unlabeled: 6,
        validation: 2,
        test: 2,
    });
    let ds = generate_synthetic_domains(&cfg.data.synthetic_spec()).unwrap();
    (cfg, ds)
}

fn tensors(m: &ModelParams, keep: impl Fn(&str) -> bool) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit(&mut |name, _, _, v| {
        if keep(name) {
            out.push((name.to_string(), v.to_vec()));
        }
    });
    out
}

#[test]
fn every_method_reads_only_its_pools_and_terms() {
    // (source, labeled target, unlabeled target)
    let allowed = |m: Method| match m {
        Method::BaselineSource => (true, false, false),
        Method::BaselineTarget => (false, true, false),
        Method::JointTraining | Method::DsbnOnly | Method::FinetuneLast | Method::FinetuneAll => (true, true, false),
        Method::SemtOnly => (false, true, true),
        Method::SsCada | Method::CsCada => (true, true, true),
    };
    for m in Method::ALL {
        let (cfg, ds) = tiny(m, 4);
        let out = train(&cfg, &ds).unwrap();
        let (s, t, u) = allowed(m);
        let a = out.access;
        assert_eq!(a.source_labeled > 0, s, "{m} source pool");
        assert_eq!(a.target_labeled > 0, t, "{m} labeled target pool");
        assert_eq!(a.target_unlabeled > 0, u, "{m} unlabeled pool");
        for row in &out.history.losses {
            if !m.consistency() {
                assert_eq!(row.l_unsup, 0.0, "{m} consistency term");
                assert_eq!(row.consistency_weight, 0.0);
            }
            if !m.contrastive() {
                assert_eq!(row.l_ct, 0.0, "{m} contrastive term");
            }
        }
        assert_eq!(out.teacher.is_some(), m.consistency(), "{m} teacher");
    }
}

#[test]
fn logged_total_is_the_weighted_sum_of_its_terms() {
    for m in [Method::SemtOnly, Method::SsCada, Method::CsCada, Method::JointTraining] {
        let (cfg, ds) = tiny(m, 6);
        let out = train(&cfg, &ds).unwrap();
        let t = &cfg.train;
        for r in &out.history.losses {
            let lambda2 = if m.contrastive() { t.lambda2 } else { 0.0 };
            let expect = r.l_sup + t.lambda1 * r.consistency_weight * r.l_unsup + lambda2 * r.l_ct;
            assert!((r.total - expect).abs() <= 1e-6, "{m} iter {}: {} vs {expect}", r.iter, r.total);
        }
        if m.contrastive() {
            assert!(out.history.losses.iter().all(|r| r.l_ct > 0.0));
        }
    }
}

#[test]
fn ramp_reaches_its_ceiling_on_the_last_iteration() {
    let (cfg, ds) = tiny(Method::CsCada, 5);
    let out = train(&cfg, &ds).unwrap();
    let rows = &out.history.losses;
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.last().unwrap().consistency_weight, 0.1);
    assert!(rows.windows(2).all(|w| w[0].consistency_weight <= w[1].consistency_weight));
}

#[test]
fn zero_iterations_leave_the_initial_model() {
    let (cfg, ds) = tiny(Method::CsCada, 0);
    let out = train(&cfg, &ds).unwrap();
    let init = build_model(&cfg.model, cfg.seed).unwrap();
    assert!(out.history.losses.is_empty());
    assert_eq!(out.student, init);
    assert_eq!(out.best, init);
    assert_eq!(out.access.source_labeled + out.access.target_labeled + out.access.target_unlabeled, 0);
}

#[test]
fn last_block_finetuning_freezes_everything_else() {
    let (mut cfg, ds) = tiny(Method::FinetuneLast, 0);
    cfg.train.finetune_iters = 5;
    let pretrained = build_model(&cfg.model, 9).unwrap();
    let out = finetune_run(&pretrained, FinetuneScope::LastBlock, &ds.target_labeled, &cfg).unwrap();
    let inside = |n: &str| n.starts_with("dec.0.") || n.starts_with("dsbn.dec.0.") || n.starts_with("out.");
    assert_eq!(tensors(&out.student, |n| !inside(n)), tensors(&pretrained, |n| !inside(n)));
    assert_ne!(tensors(&out.student, inside), tensors(&pretrained, inside));
    assert_eq!(out.access.source_labeled + out.access.target_unlabeled, 0);
    assert_eq!(out.history.losses.len(), 5);
}

#[test]
fn finetuning_without_iterations_is_the_identity() {
    let (mut cfg, ds) = tiny(Method::FinetuneAll, 0);
    cfg.train.finetune_iters = 0;
    let pretrained = build_model(&cfg.model, 9).unwrap();
    for scope in [FinetuneScope::All, FinetuneScope::LastBlock] {
        let out = finetune_run(&pretrained, scope, &ds.target_labeled, &cfg).unwrap();
        assert_eq!(out.student, pretrained);
    }
}

#[test]
fn finetuning_rejects_bad_inputs() {
    assert!(matches!("middle".parse::<FinetuneScope>(), Err(Error::Parameter(_))));
    let (cfg, _) = tiny(Method::FinetuneAll, 0);
    let pretrained = build_model(&cfg.model, 9).unwrap();
    assert!(matches!(finetune_run(&pretrained, FinetuneScope::All, &[], &cfg), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic_per_seed() {
    let (cfg, ds) = tiny(Method::CsCada, 4);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.student, b.student);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(train(&other, &ds).unwrap().history, a.history);
}

fn separable() -> (ExperimentConfig, DomainDatasets) {
    let clean = SyntheticStyle {
        background_level: 0.1,
        foreground_contrast: 0.8,
        noise_sigma: 0.0,
        blur_radius: 0,
        texture_seed: 1,
        texture_amplitude: 0.0,
        distractors: 0,
        scale: 1.0,
    };
    let mut cfg = ExperimentConfig::desk(Method::BaselineTarget);
    cfg.train.lr0 = 5e-4;
    cfg.train.k_max = 300;
    cfg.train.validate_every = 0;
    cfg.model = Architecture::new(vec![8, 16, 32], 2);
    cfg.data.kind = StructureKind::Tubular;
    cfg.data.size = Some(32);
    cfg.data.source_style = Some(SyntheticStyle {
        foreground_contrast: -0.05,
        ..clean.clone()
    });
    cfg.data.target_style = Some(clean);
    cfg.data.counts = Some(SplitCounts {
        source_labeled: 2,
        target_labeled: 16,
        target_unlabeled: 2,
        validation: 8,
        test: 2,
    });
    let ds = generate_synthetic_domains(&cfg.data.synthetic_spec()).unwrap();
    (cfg, ds)
}

#[test]
fn target_baseline_fits_a_separable_task() {
    let (cfg, ds) = separable();
    let out = train(&cfg, &ds).unwrap();
    let best = out.history.losses.iter().map(|r| r.l_sup).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "lowest training segmentation loss {best}");
}

#[test]
fn full_finetuning_improves_a_source_model_on_the_target() {
    let (mut cfg, _) = tiny(Method::FinetuneAll, 0);
    cfg.model = Architecture::new(vec![4, 8], 3);
    cfg.data.size = Some(32);
    cfg.data.counts = Some(SplitCounts {
        source_labeled: 16,
        target_labeled: 8,
        target_unlabeled: 2,
        validation: 12,
        test: 2,
    });
    let ds = generate_synthetic_domains(&cfg.data.synthetic_spec()).unwrap();
    let mut src = cfg.clone();
    src.method = Method::BaselineSource;
    src.train.k_max = 200;
    let pretrained = train(&src, &ds).unwrap().student;
    cfg.train.finetune_iters = 150;
    let tuned = finetune_run(&pretrained, FinetuneScope::All, &ds.target_labeled, &cfg).unwrap().student;
    let before = mean_dice(&pretrained, &ds.validation, DomainId::Target).unwrap();
    let after = mean_dice(&tuned, &ds.validation, DomainId::Target).unwrap();
    assert!(after > before, "validation Dice {before} -> {after}");
}
