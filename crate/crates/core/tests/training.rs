use std::collections::BTreeSet;

use reid_core::data::{generate_synthetic, hide_labels, DatasetSplit, SplitRole};
use reid_core::embedding::EmbeddingModel;
use reid_core::objectives::AdversarialMode;
use reid_core::training::{
    adapt_target, adapt_target_with, model_seed, mu_sweep, pretrain_source, source_classes,
    DataRef, ExperimentConfig, Models, Pretrainer, TargetData,
};

fn source(cfg: &ExperimentConfig) -> DatasetSplit {
    let DataRef::Synthetic { spec } = &cfg.data.source else {
        unreachable!()
    };
    generate_synthetic(spec)
        .unwrap()
        .target_train
        .with_role(SplitRole::SourceTrain)
        .unwrap()
}

fn target(cfg: &ExperimentConfig) -> TargetData {
    let DataRef::Synthetic { spec } = &cfg.data.target else {
        unreachable!()
    };
    let s = generate_synthetic(spec).unwrap();
    TargetData {
        train: hide_labels(s.target_train).unwrap(),
        gallery: s.gallery,
        query: s.query,
    }
}

fn fresh_model(cfg: &ExperimentConfig, src: &DatasetSplit) -> EmbeddingModel {
    let mut mc = cfg.model.clone();
    mc.num_source_ids = Some(source_classes(src).unwrap().len());
    EmbeddingModel::new(mc, model_seed(cfg.seed, 0)).unwrap()
}

fn pretrained(cfg: &ExperimentConfig) -> EmbeddingModel {
    pretrain_source(&source(cfg), cfg, |_, _| {}).unwrap()
}

#[test]
fn pretraining_loss_falls_across_50_step_windows() {
    let cfg = ExperimentConfig::toy();
    let mut losses = Vec::new();
    pretrain_source(&source(&cfg), &cfg, |_, l| losses.push(l.value)).unwrap();
    assert_eq!(losses.len(), 200);
    let means: Vec<f64> = losses
        .chunks(50)
        .map(|w| w.iter().sum::<f64>() / 50.0)
        .collect();
    for pair in means.windows(2) {
        assert!(pair[1] < pair[0], "window means {means:?}");
    }
}

#[test]
fn zero_lambda_never_computes_triplet() {
    let mut cfg = ExperimentConfig::toy();
    cfg.pretrain.lambda = 0.0;
    cfg.pretrain.steps = 10;
    pretrain_source(&source(&cfg), &cfg, |_, l| {
        assert!(l.part("triplet").is_none());
        assert!(l.part("ce").is_some());
    })
    .unwrap();
}

#[test]
fn resumed_pretraining_matches_next_step_bitwise() {
    let cfg = ExperimentConfig::toy();
    let src = source(&cfg);
    let mut a = Pretrainer::new(fresh_model(&cfg, &src), &src, &cfg).unwrap();
    for _ in 0..7 {
        a.step().unwrap();
    }
    let state: reid_core::training::PretrainState =
        serde_json::from_str(&serde_json::to_string(&a.state()).unwrap()).unwrap();
    let mut b = Pretrainer::resume(&state, &src, &cfg).unwrap();
    for _ in 0..3 {
        assert_eq!(
            a.step().unwrap().value.to_bits(),
            b.step().unwrap().value.to_bits()
        );
    }
    assert_eq!(a.model().state(), b.model().state());
}

#[test]
fn pretraining_needs_two_identities() {
    let cfg = ExperimentConfig::toy();
    let src = source(&cfg);
    let one: Vec<_> = src
        .samples()
        .iter()
        .filter(|s| s.person_id == src.samples()[0].person_id)
        .cloned()
        .collect();
    let one = DatasetSplit::new(one, SplitRole::SourceTrain, Some(src.num_cameras())).unwrap();
    assert!(pretrain_source(&one, &cfg, |_, _| {}).is_err());
}

#[test]
fn baseline_reports_have_no_adversarial_parts() {
    let mut cfg = ExperimentConfig::toy();
    cfg.mode = AdversarialMode::Baseline;
    cfg.epochs = 2;
    let out = adapt_target(
        Models::from_pretrained(&pretrained(&cfg), cfg.composition).unwrap(),
        &target(&cfg),
        &cfg,
    )
    .unwrap();
    for r in &out.reports {
        assert!(
            r.losses
                .keys()
                .all(|k| !k.contains("adv") && k != "discriminator"),
            "{:?}",
            r.losses.keys()
        );
        assert!(r.losses.contains_key("ps_id"));
    }
    let mut cfg = cfg.clone();
    cfg.mode = AdversarialMode::Canu;
    let out = adapt_target(
        Models::from_pretrained(&pretrained(&cfg), cfg.composition).unwrap(),
        &target(&cfg),
        &cfg,
    )
    .unwrap();
    assert!(out.reports.iter().all(|r| r.losses.contains_key("adv")));
}

#[test]
fn outliers_never_enter_a_batch() {
    let mut cfg = ExperimentConfig::toy();
    cfg.epochs = 2;
    let mut checked = 0;
    adapt_target_with(
        Models::from_pretrained(&pretrained(&cfg), cfg.composition).unwrap(),
        &target(&cfg),
        &cfg,
        |info| {
            for (branch, rows) in info.batches {
                let labeling = &info.labelings[branch];
                assert!(rows.iter().all(|&i| labeling.assignments[i].is_some()));
                // every anchor has a positive and a negative
                let labels: Vec<usize> = rows
                    .iter()
                    .map(|&i| labeling.assignments[i].unwrap())
                    .collect();
                for &l in &labels {
                    assert!(labels.iter().filter(|&&m| m == l).count() >= 2);
                    assert!(labels.iter().any(|&m| m != l));
                }
                checked += 1;
            }
        },
    )
    .unwrap();
    assert!(checked > 0);
}

#[test]
fn ssg_and_mmt_adapt_end_to_end() {
    for comp in [
        reid_core::training::Composition::Ssg,
        reid_core::training::Composition::Mmt,
    ] {
        let mut cfg = ExperimentConfig::toy();
        cfg.composition = comp;
        cfg.epochs = 2;
        let t = target(&cfg);
        let out = adapt_target(
            Models::from_pretrained(&pretrained(&cfg), comp).unwrap(),
            &t,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.reports.len(), 2);
        let branches: BTreeSet<_> = out.reports[0].labeling.keys().copied().collect();
        assert_eq!(
            branches.len(),
            if comp == reid_core::training::Composition::Ssg {
                3
            } else {
                1
            }
        );
        let r = reid_core::training::evaluate_models(&out.models, &t, cfg.evaluation.feature_mode)
            .unwrap();
        assert!((0.0..=1.0).contains(&r.rank1) && (0.0..=1.0).contains(&r.map));
    }
}

#[test]
fn sweep_at_zero_reproduces_baseline() {
    let mut cfg = ExperimentConfig::toy();
    cfg.epochs = 2;
    let pre = pretrained(&cfg);
    let t = target(&cfg);
    let rows = mu_sweep(&pre, &t, &cfg, &[0.0, 0.05, 0.1]).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(
        rows.iter().map(|r| r.mu).collect::<Vec<_>>(),
        vec![0.0, 0.05, 0.1]
    );
    let mut b = cfg.clone();
    b.mode = AdversarialMode::Baseline;
    let out = adapt_target(
        Models::from_pretrained(&pre, b.composition).unwrap(),
        &t,
        &b,
    )
    .unwrap();
    let r =
        reid_core::training::evaluate_models(&out.models, &t, b.evaluation.feature_mode).unwrap();
    assert_eq!((rows[0].rank1, rows[0].map), (r.rank1, r.map));
}

#[test]
fn positive_mu_moves_parameters_away_from_baseline() {
    let mut cfg = ExperimentConfig::toy();
    cfg.epochs = 1;
    let pre = pretrained(&cfg);
    let t = target(&cfg);
    let run = |mode| {
        let mut c = cfg.clone();
        c.mode = mode;
        let out = adapt_target(
            Models::from_pretrained(&pre, c.composition).unwrap(),
            &t,
            &c,
        )
        .unwrap();
        out.models.all()[0].state()
    };
    let base = run(AdversarialMode::Baseline);
    assert_ne!(run(AdversarialMode::PlainAdv).params, base.params);
    assert_ne!(run(AdversarialMode::Canu).params, base.params);
}
