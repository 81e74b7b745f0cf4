use mrn_core::config::ExperimentConfig;
use mrn_core::datastore::{self, GenStatus};
use mrn_core::report::*;
use mrn_core::trainer::{run_mode, ModelCache, RunMode, RunReport};

fn smoke_runs() -> (ExperimentConfig, RunReport, RunReport, RunReport) {
    let cfg = ExperimentConfig::smoke();
    let mut cache = ModelCache::new();
    let (mrn, _) = run_mode(RunMode::Mrn, &cfg, &mut cache).unwrap();
    let (base, _) = run_mode(RunMode::Baseline, &cfg, &mut cache).unwrap();
    let (bound, _) = run_mode(RunMode::Bound, &cfg, &mut cache).unwrap();
    (cfg, mrn, base, bound)
}

/// Parses `svg`, rejects any external reference and returns the legend labels.
fn legend_of(svg: &str) -> Vec<String> {
    let doc = roxmltree::Document::parse(svg).expect("valid XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    for node in doc.descendants() {
        for attr in node.attributes() {
            assert!(attr.name() != "href", "external reference in {}", node.tag_name().name());
            assert!(!attr.value().contains("url("), "external reference");
        }
        assert!(!["image", "use", "script", "foreignObject", "style"].contains(&node.tag_name().name()));
    }
    doc.descendants()
        .filter(|n| n.attribute("class") == Some("legend"))
        .map(|n| n.descendants().filter(|t| t.is_text()).map(|t| t.text().unwrap()).collect())
        .collect()
}

fn series_points(svg: &str) -> Vec<(String, usize)> {
    let doc = roxmltree::Document::parse(svg).unwrap();
    doc.descendants()
        .filter(|n| n.attribute("class") == Some("series"))
        .map(|n| (n.attribute("data-name").unwrap().to_string(), n.children().filter(|c| c.tag_name().name() == "circle").count()))
        .collect()
}

#[test]
fn run_files_round_trip_and_agree_with_predictions() {
    let (_, mrn, base, bound) = smoke_runs();
    let dir = tempfile::tempdir().unwrap();
    for r in [&mrn, &base, &bound] {
        let d = dir.path().join(r.mode.to_string());
        write_run(&d, r).unwrap();

        let rows = read_results_csv(&d.join(RESULTS)).unwrap();
        assert_eq!(rows, result_rows(r));
        let header = std::fs::read_to_string(d.join(RESULTS)).unwrap();
        assert!(header.starts_with("step,task,split,correct,total,accuracy\n"));

        let s = read_summary(&d.join(SUMMARY)).unwrap();
        assert_eq!(s, Summary::of(r));
        assert_eq!(s.config, r.config);

        let preds = read_predictions(&d.join(PREDICTIONS)).unwrap();
        assert_eq!(preds, r.predictions);
        // Avg and Last recomputed from the persisted predictions
        let acc: Vec<f64> = accuracy_from_predictions(&preds).into_iter().map(|(_, a)| a).collect();
        assert_eq!(acc.len(), s.acc.len());
        for (a, b) in acc.iter().zip(&s.acc) {
            assert!((a - b).abs() < 1e-12);
        }
        let avg = acc.iter().sum::<f64>() / acc.len() as f64;
        assert!((avg - s.avg).abs() < 1e-12);
        assert!((acc.last().unwrap() - s.last).abs() < 1e-12);
        for row in rows.iter().filter(|r| r.task == "all") {
            assert!((row.accuracy - acc[s.step_numbers().iter().position(|&k| k == row.step).unwrap()]).abs() < 1e-12);
        }
    }
}

#[test]
fn plots_are_self_contained_with_one_legend_entry_per_mode() {
    let (cfg, mrn, base, bound) = smoke_runs();
    let runs = vec![
        ("a".to_string(), Summary::of(&mrn)),
        ("b".to_string(), Summary::of(&base)),
        ("c".to_string(), Summary::of(&bound)),
    ];
    let svg = accuracy_svg(&runs[..2]);
    assert_eq!(legend_of(&svg), vec!["mrn", "baseline"]);
    assert_eq!(series_points(&svg), vec![("mrn".into(), 4), ("baseline".into(), 4)]);

    let task1 = first_task_svg(&runs);
    assert_eq!(legend_of(&task1), vec!["mrn", "baseline", "bound"]);
    let steps = cfg.order.len();
    let points = series_points(&task1);
    assert_eq!(points[0].1, steps);
    assert_eq!(points[1].1, steps);
    assert_eq!(points[2].1, 1);
    assert_eq!(Summary::of(&mrn).first_task_curve().len(), steps);

    let md = comparison_markdown(&runs[..1]);
    assert_eq!(md.lines().count(), 3);
    assert_eq!(comparison_markdown(&runs).lines().count(), 5);

    // duplicate modes stay distinguishable
    let twice = vec![runs[0].clone(), ("z".to_string(), Summary::of(&mrn))];
    assert_eq!(legend_of(&accuracy_svg(&twice)), vec!["mrn [a]", "mrn [z]"]);
}

#[test]
fn escaped_labels_stay_valid_xml() {
    let svg = line_chart("a < b & \"c\"", "x", &["<1>".into()], &[Series {
        name: "s&t".into(),
        points: vec![(0, 0.5)],
    }]);
    assert_eq!(legend_of(&svg), vec!["s&t"]);
}

#[test]
fn malformed_summary_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("summary.json");
    std::fs::write(&path, "{\"avg\": 1").unwrap();
    let err = read_summary(&path).unwrap_err().to_string();
    assert!(err.contains(path.to_str().unwrap()), "{err}");
}

#[test]
fn ablation_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<AblationRow> = ["100", "150", "200"]
        .iter()
        .zip([0.5, 0.45, 0.6])
        .map(|(v, a)| AblationRow {
            axis: Axis::RehearsalSize,
            value: v.to_string(),
            avg: a,
            last: a / 2.0,
            domain_accuracy: Some(0.75),
            violation: false,
        })
        .collect();
    let path = dir.path().join("a.csv");
    write_ablation_csv(&path, &rows).unwrap();
    let back = read_ablation_csv(&path).unwrap();
    assert_eq!(back.iter().map(|r| r.violation).collect::<Vec<_>>(), vec![false, true, false]);
    assert_eq!(back.iter().map(|r| r.avg).collect::<Vec<_>>(), vec![0.5, 0.45, 0.6]);
    assert!(ablation_markdown(Axis::RehearsalSize, &rows).contains("decreases at: 150"));
    assert_eq!(legend_of(&ablation_svg(Axis::RehearsalSize, &rows)), vec!["Avg", "Last"]);
}

#[test]
fn dataset_cache_writes_skips_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("fresh/data");
    let cfg = ExperimentConfig::smoke();
    let (status, manifest) = datastore::gen_data(&cfg, &data).unwrap();
    assert_eq!(status, GenStatus::Written);
    let mut files: Vec<String> = std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    files.sort();
    assert_eq!(files, vec!["registry.json", "script-0.mrnb", "script-1.mrnb", "script-2.mrnb", "script-3.mrnb"]);

    let (again, _) = datastore::gen_data(&cfg, &data).unwrap();
    assert_eq!(again, GenStatus::UpToDate);

    let (registry, loaded) = datastore::load_data(&cfg, &data).unwrap();
    let (reg2, generated) = ModelCache::new().datasets(&cfg).unwrap();
    assert_eq!(registry, reg2);
    assert_eq!(loaded, generated);
    assert_eq!(manifest.registry, registry);

    let mut reordered = cfg.clone();
    reordered.order = vec![2, 0];
    let (_, two) = datastore::load_data(&reordered, &data).unwrap();
    assert_eq!(two.iter().map(|d| d.script_id).collect::<Vec<_>>(), vec![2, 0]);

    // tampering is caught, and regeneration repairs it
    let victim = data.join("script-1.mrnb");
    let mut bytes = std::fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(datastore::load_data(&cfg, &data).is_err());
    assert_eq!(datastore::gen_data(&cfg, &data).unwrap().0, GenStatus::Written);
    assert!(datastore::load_data(&cfg, &data).is_ok());

    // other script settings do not reuse the cache
    let mut other = cfg.clone();
    other.scripts[0].n_train += 1;
    assert!(datastore::load_data(&other, &data).is_err());

    let rows = datastore::coverage_table(&cfg, &loaded).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.in_train <= r.charset));
    assert_eq!(rows[0].in_memory, Some(4));
    assert_eq!(rows[3].in_memory, None);
    assert!(datastore::format_coverage(&rows).lines().count() == 5);
}
