use mrn_core::config::ExperimentConfig;
use mrn_core::glyphgen::GrayImage;
use mrn_core::router::VotingMode;
use mrn_core::trainer::*;

fn smoke(order: &[u8]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::smoke();
    cfg.order = order.to_vec();
    cfg
}

fn untimed(r: &RunReport) -> String {
    let mut r = r.clone();
    r.steps.iter_mut().for_each(|s| s.seconds = 0.0);
    serde_json::to_string(&r).unwrap()
}

#[test]
fn pooled_and_summary_examples() {
    let scores = [
        TaskScore { task: 0, correct: 8, total: 10 },
        TaskScore { task: 1, correct: 6, total: 10 },
    ];
    assert!((pooled(&scores) - 0.70).abs() < 1e-12);
    let uneven = [
        TaskScore { task: 0, correct: 1, total: 1 },
        TaskScore { task: 1, correct: 0, total: 9 },
    ];
    assert!((pooled(&uneven) - 0.1).abs() < 1e-12);
    assert!((macro_mean(&uneven) - 0.5).abs() < 1e-12);

    let m = AccuracyMatrix {
        acc: vec![0.9, 0.7],
        per_task: vec![Vec::new(), Vec::new()],
    };
    assert!((m.avg() - 0.8).abs() < 1e-12);
    assert_eq!(m.last(), 0.7);
}

#[test]
fn mrn_schedule_protocol() {
    let cfg = smoke(&[0, 1, 2]);
    let mut cache = ModelCache::new();
    let (report, art) = run_schedule(&cfg, &mut cache).unwrap();

    assert_eq!(report.audit_violations, 0);
    assert!(art.audit.iter().all(|e| e.allowed));
    assert_eq!(art.branches.len(), 3);
    assert!(art.branches.iter().all(|b| b.is_frozen()));
    // three categories are aliased into every script
    let sizes: Vec<usize> = report.steps.iter().map(|s| s.union_size).collect();
    assert_eq!(sizes, vec![60, 77, 154]);
    for s in &report.steps[1..] {
        let log = s.stage2.as_ref().unwrap();
        assert!(log.branches_unchanged);
        assert_eq!(log.frozen_gradient_mass, 0.0);
    }
    let memory = art.rehearsal.as_ref().unwrap();
    assert!(memory.len() <= cfg.rehearsal.capacity);

    // matrix entries agree with the persisted predictions
    for (i, row) in report.matrix.per_task.iter().enumerate() {
        let preds: Vec<_> = report.predictions.iter().filter(|p| p.step == i + 1).collect();
        let correct = preds.iter().filter(|p| p.correct).count();
        assert_eq!(correct, row.iter().map(|s| s.correct).sum::<usize>());
        assert!((report.matrix.acc[i] - correct as f64 / preds.len() as f64).abs() < 1e-12);
        assert!(row.iter().all(|s| (0.0..=1.0).contains(&s.accuracy())));
    }
    let avg = report.matrix.acc.iter().sum::<f64>() / 3.0;
    assert_eq!(report.avg, avg);
    assert_eq!(report.last, report.matrix.acc[2]);

    // a fresh cache retrains everything and lands on the same bits
    let (again, art2) = run_schedule(&cfg, &mut ModelCache::new()).unwrap();
    assert_eq!(untimed(&report), untimed(&again));
    assert_eq!(report.predictions, again.predictions);
    for (a, b) in art.branches.iter().zip(&art2.branches) {
        assert_eq!(a.checksum(), b.checksum());
    }

    // with the oracle router the newest task scores exactly its own branch
    let (_, datasets) = cache.datasets(&cfg).unwrap();
    let newest = &art.branches[2];
    let test = &datasets[2].test;
    let oracle = evaluate(3, &art.branches, Scorer::Oracle, &art.union, &[(newest.language_id, test)], VotingMode::Soft).unwrap();
    let images: Vec<&GrayImage> = test.iter().map(|i| &i.image).collect();
    let alone = newest.predict_union(&images, &newest.own_mask(&art.union).unwrap(), &art.union).unwrap();
    let standalone: Vec<_> = alone.iter().map(|p| art.union.decode(&p.decode()).unwrap()).collect();
    let routed: Vec<_> = oracle.predictions.iter().map(|p| p.predicted.clone()).collect();
    assert_eq!(routed, standalone);
    let hits = test.iter().zip(&standalone).filter(|(i, p)| &i.labels == *p).count();
    assert_eq!(oracle.scores[0].correct, hits);
}

#[test]
fn single_language_run_is_the_branch() {
    let cfg = smoke(&[1]);
    let mut cache = ModelCache::new();
    let (report, art) = run_schedule(&cfg, &mut cache).unwrap();
    let (_, datasets) = cache.datasets(&cfg).unwrap();
    let branch = &art.branches[0];
    let images: Vec<&GrayImage> = datasets[0].test.iter().map(|i| &i.image).collect();
    let alone = branch.predict_union(&images, &branch.own_mask(&art.union).unwrap(), &art.union).unwrap();
    assert_eq!(report.predictions.len(), images.len());
    for (p, probs) in report.predictions.iter().zip(&alone) {
        assert_eq!(p.predicted, art.union.decode(&probs.decode()).unwrap());
        assert_eq!(p.scores, vec![1.0]);
    }
}

#[test]
fn baseline_and_bound_references() {
    let cfg = smoke(&[0, 1]);
    let mut cache = ModelCache::new();
    let (mrn, _) = run_mode(RunMode::Mrn, &cfg, &mut cache).unwrap();
    let (base, base_art) = run_mode(RunMode::Baseline, &cfg, &mut cache).unwrap();
    assert_eq!(base.matrix.per_task[0], mrn.matrix.per_task[0]);
    assert_eq!(base.matrix.acc[0], mrn.matrix.acc[0]);
    assert_eq!(base.audit_violations, 0);
    assert!(!base_art.branches[0].is_frozen());

    let (bound, _) = run_mode(RunMode::Bound, &cfg, &mut cache).unwrap();
    assert_eq!(bound.matrix.acc.len(), 1);
    assert_eq!(bound.audit_violations, 0);
    let mut other = cfg.clone();
    other.rehearsal.capacity = 3;
    other.rehearsal.strategy = mrn_core::rehearsal::Strategy::Length;
    let (bound2, _) = run_mode(RunMode::Bound, &other, &mut ModelCache::new()).unwrap();
    assert_eq!(bound.matrix, bound2.matrix);
    assert_eq!(bound.predictions, bound2.predictions);
}

#[test]
fn vault_refuses_old_raw_data() {
    let cfg = smoke(&[0, 1, 2]);
    let (_, datasets) = ModelCache::new().datasets(&cfg).unwrap();
    let vault = DataVault::new(datasets);
    assert!(vault.train(2, 2, "stage2").is_ok());
    assert!(vault.train(2, 1, "stage2").is_err());
    assert!(vault.test(1, 2).is_err());
    assert!(vault.test(3, 1).is_ok());
    assert_eq!(vault.violations(), 2);
}

#[test]
fn run_mode_parsing() {
    assert_eq!("bound".parse::<RunMode>().unwrap(), RunMode::Bound);
    assert!("joint".parse::<RunMode>().is_err());
    assert_eq!(RunMode::Baseline.to_string(), "baseline");
}
