mod common;

use std::collections::HashSet;

use robad_core::attacks::{AttackKind, AttackSpec};
use robad_core::data::{encode_users, filter_users, gen_synthetic, preprocess, PreprocessSettings, RawUser, Vocab};
use robad_core::model::{init_params, Model};
use robad_core::train::{
    ablate, ablation_table, cross_validate, evaluate, load_checkpoint, prepare_folds, robustness_eval, run_fold,
    save_checkpoint, sweep, CvConfig, Knob, ParamGrid, TrainConfig,
};
use robad_core::{labels_of, Error, ModelConfig, UserSequence, Variant};

fn small_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        tokens_per_post: 8,
        window: 6,
        emb_dim: 8,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_mult: 2,
        dropout: 0.0,
        variant: Variant::Full,
    }
}

fn small_cv(epochs: usize) -> CvConfig {
    let mut tc = TrainConfig::new(small_model(2));
    tc.epochs = epochs;
    tc.batch_size = 8;
    tc.seed = 3;
    let mut cv = CvConfig::new(tc);
    cv.eval_attacks = vec![
        AttackSpec::new(AttackKind::ForeignPost, 1),
        AttackSpec::new(AttackKind::Identity, 1),
    ];
    cv
}

fn small_corpus() -> Vec<RawUser> {
    gen_synthetic(30, 0.9, 5).unwrap()
}

fn encoded(raw: &[RawUser], d: usize, window: usize) -> (Vec<UserSequence>, Vocab) {
    let s = PreprocessSettings {
        tokens_per_post: d,
        window,
        ..Default::default()
    };
    preprocess(raw, &s).unwrap()
}

#[test]
fn zero_epochs_returns_initial_params() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let mut cfg = TrainConfig::new(small_model(vocab.len()));
    cfg.epochs = 0;
    cfg.seed = 9;
    let out = robad_core::train::train(&cfg, &users, &[]).unwrap();
    assert_eq!(out.params, init_params(&cfg.model, 9).unwrap());
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn zero_weight_total_equals_classification_loss() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let mut cfg = TrainConfig::new(small_model(vocab.len()));
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.w_contrastive = 0.0;
    let out = robad_core::train::train(&cfg, &users, &[]).unwrap();
    assert!(!out.log.is_empty());
    for step in &out.log {
        assert_eq!(step.loss.l_total, step.loss.l_clf);
        assert!(step.loss.l_infonce.is_some());
    }
}

#[test]
fn single_label_training_set_is_rejected() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let bad: Vec<UserSequence> = users.into_iter().filter(|u| u.label == 1).collect();
    let cfg = TrainConfig::new(small_model(vocab.len()));
    assert!(matches!(
        robad_core::train::train(&cfg, &bad, &[]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn no_adversary_aware_log_has_no_contrastive_terms() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let mut cfg = TrainConfig::new(small_model(vocab.len()).with_variant(Variant::NoAdversaryAware));
    cfg.epochs = 2;
    cfg.batch_size = 8;
    let out = robad_core::train::train(&cfg, &users, &[]).unwrap();
    assert!(out
        .log
        .iter()
        .all(|s| s.loss.l_infonce.is_none() && s.loss.l_ce_attack.is_none()));
    assert!(out
        .log_text()
        .lines()
        .skip(1)
        .all(|l| l.split('\t').nth(5) == Some("-")));
}

#[test]
fn training_is_deterministic() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let mut cfg = TrainConfig::new(small_model(vocab.len()));
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.model.dropout = 0.1;
    let a = robad_core::train::train(&cfg, &users[..20], &users[20..]).unwrap();
    let b = robad_core::train::train(&cfg, &users[..20], &users[20..]).unwrap();
    assert_eq!(a.log_text(), b.log_text());
    assert_eq!(a.params, b.params);
}

#[test]
fn learns_separable_synthetic_corpus() {
    let raw = gen_synthetic(200, 0.9, 7).unwrap();
    let (users, vocab) = preprocess(&raw, &PreprocessSettings::default()).unwrap();
    let mut cfg = TrainConfig::new(ModelConfig::tiny(vocab.len()));
    cfg.epochs = 10;
    cfg.seed = 7;
    let out = robad_core::train::train(&cfg, &users, &[]).unwrap();
    for step in &out.log {
        assert!(step.loss.identity_error() <= 1e-12, "{step:?}");
    }
    let first = out.epochs[0].mean_total;
    let tenth = out.epochs[9].mean_total;
    assert!(tenth < first, "epoch 10 loss {tenth} not below epoch 1 loss {first}");
    let model = Model::from_params(cfg.model.clone(), out.params).unwrap();
    let f1 = evaluate(&model, &users).unwrap().f1;
    assert!(f1 >= 0.95, "train F1 {f1}");
}

#[test]
fn folds_isolate_test_users_and_vocabulary() {
    let cv = small_cv(1);
    let raw = small_corpus();
    let (users, folds) = prepare_folds(&cv, &raw).unwrap();
    let fold = &folds[1];
    let run = run_fold(&cv, &users, fold, 1).unwrap();
    let train_only: Vec<_> = fold.train.iter().map(|&i| users[i].clone()).collect();
    assert_eq!(run.vocab, Vocab::build(&train_only, cv.min_freq));
    let test_ids: HashSet<&str> = fold.test.iter().map(|&i| users[i].user_id.as_str()).collect();
    let train_ids: HashSet<&str> = fold.train.iter().map(|&i| users[i].user_id.as_str()).collect();
    assert!(test_ids.is_disjoint(&train_ids));
    assert_eq!(test_ids.len() + train_ids.len(), users.len());
}

#[test]
fn identity_attack_drops_nothing() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let model = Model::new(small_model(vocab.len()), 2).unwrap();
    let pre = evaluate(&model, &users).unwrap().f1;
    let after = robustness_eval(&model, &users, &users, &[AttackSpec::new(AttackKind::Identity, 0)]).unwrap();
    assert_eq!(after["identity"], pre);
    assert_eq!(robad_core::train::relative_drop(pre, after["identity"]), 0.0);
}

#[test]
fn cross_validation_is_reproducible() {
    let cv = small_cv(2);
    let raw = small_corpus();
    let a = cross_validate(&cv, &raw).unwrap();
    let b = cross_validate(&cv, &raw).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.per_fold.len(), 5);
    assert_eq!(a.report.relative_drop_pct["identity"], 0.0);
    for f in &a.report.per_fold {
        assert!((0.0..=1.0).contains(&f.f1));
        let (p, r) = (f.precision, f.recall);
        let expected = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        assert!((f.f1 - expected).abs() < 1e-12);
    }

    let mut parallel = cv.clone();
    parallel.jobs = 2;
    assert_eq!(
        cross_validate(&parallel, &raw).unwrap().report.to_json(),
        a.report.to_json()
    );
}

#[test]
fn ablation_shares_folds_and_has_three_rows() {
    let rows = ablate(&small_cv(1), &small_corpus()).unwrap();
    let variants: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(
        variants,
        vec![Variant::Full, Variant::NoLocalGlobal, Variant::NoAdversaryAware]
    );
    assert!(rows.iter().all(|r| r.fold_hash == rows[0].fold_hash));
    let table = ablation_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 4));
    let no_adv = &rows[2].result.folds[0].training.log;
    assert!(no_adv.iter().all(|s| s.loss.l_infonce.is_none()));
}

#[test]
fn sweep_rows_match_direct_runs() {
    let cv = small_cv(1);
    let raw = small_corpus();
    let single = sweep(&cv, &ParamGrid::cartesian(&[vec![Knob::WContrastive(0.1)]]), &raw).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].report, cross_validate(&cv, &raw).unwrap().report);

    let two = sweep(
        &cv,
        &ParamGrid::cartesian(&[vec![Knob::WContrastive(0.0), Knob::WContrastive(0.1)]]),
        &raw,
    )
    .unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!(two[0].setting, "w_contrastive=0");
    assert!(two.iter().all(|r| r.report.per_fold.len() == 5));
    assert!(matches!(sweep(&cv, &ParamGrid::default(), &raw), Err(Error::Config(_))));

    let weights = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9].map(Knob::WContrastive).to_vec();
    assert_eq!(ParamGrid::cartesian(&[weights]).len(), 6);
}

#[test]
fn checkpoint_files_round_trip_and_reject_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_model(40);
    let params = init_params(&cfg, 1).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let back = load_checkpoint(&path, &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, a), (_, b)) in params.named().iter().zip(back.named()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x != 0.0 {
                worst = worst.max(((x - y) / x).abs());
            }
        }
    }
    assert!(worst <= 2f64.powi(-20));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, &cfg), Err(Error::Format(_))));
    let wrong = ModelConfig {
        emb_dim: 16,
        ..cfg.clone()
    };
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, &wrong), Err(Error::Compatibility(_))));
    assert!(matches!(
        load_checkpoint(dir.path().join("missing"), &cfg),
        Err(Error::Io { .. })
    ));
}

#[test]
fn evaluate_matches_labels_of_perfect_model() {
    let (users, vocab) = encoded(&small_corpus(), 8, 6);
    let mut model = Model::new(small_model(vocab.len()), 0).unwrap();
    // push everything to "bad": recall 1, precision = share of bad users
    model.params.classifier = robad_core::Tensor::zeros(&[8, 2]);
    let s = evaluate(&model, &users).unwrap();
    let bad = labels_of(&users).iter().filter(|&&l| l == 1).count() as f64;
    assert_eq!(s.recall, 1.0);
    assert!((s.precision - bad / users.len() as f64).abs() < 1e-12);
    let kept = filter_users(&small_corpus(), &PreprocessSettings::default());
    assert_eq!(encode_users(&kept, &vocab, 8).len(), users.len());
}
