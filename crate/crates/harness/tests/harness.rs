use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use m2curl_core::rl::{Modalities, Representation};
use m2curl_harness::analysis::{load_run, milestone_stat, summarize, value_at};
use m2curl_harness::metrics::{read_metrics, MetricsWriter, CONFIG_FILE, METRICS_FILE};
use m2curl_harness::preset::{preset, PRESETS};
use m2curl_harness::*;
use m2curl_numerics::checkpoint;
use proptest::prelude::*;
use serde_json::json;

fn tiny(dir: &Path, seed: u64, steps: usize) -> RunConfig {
    parse_config_str(
        &json!({
            "env": "push_world",
            "algorithm": "sac",
            "seed": seed,
            "total_env_steps": steps,
            "eval_every": 20,
            "eval_episodes": 2,
            "checkpoint_every": 20,
            "contrastive": {"crop_size": 12, "embed_dim": 8, "head_hidden": 16},
            "sac": {"batch_size": 8, "warmup_steps": 10, "hidden_sizes": [16]},
            "env_config": {"push_world": {"image_size": 16, "horizon": 15}},
            "output_dir": dir,
        })
        .to_string(),
    )
    .unwrap()
}

#[test]
fn config_file_errors_name_path_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"env": "push_world", "algorithm": "sac", "seed": 0, "contrastive": {"lambda_vt": -1}}"#).unwrap();
    let msg = parse_config(&p).unwrap_err().to_string();
    assert!(msg.contains("c.json") && msg.contains("lambda_vt"), "{msg}");
    assert!(parse_config(&dir.path().join("missing.json")).is_err());
}

#[test]
fn zero_steps_writes_only_the_initial_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(dir.path(), 0, 0)).unwrap();
    let recs = read_metrics(&out.metrics_path).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].kind, RecordKind::Eval);
    assert_eq!(recs[0].env_steps, 0);
    assert!(recs[0].scalars.contains_key("random_return"));
    assert_eq!(out.checkpoints.len(), 1);
}

#[test]
fn runs_are_reproducible_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny(&dir.path().join("a"), 3, 45)).unwrap();
    let b = run_experiment(&tiny(&dir.path().join("b"), 3, 45)).unwrap();
    assert_eq!(fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());

    let recs = read_metrics(&a.metrics_path).unwrap();
    assert!(recs.windows(2).all(|w| w[0].env_steps <= w[1].env_steps));
    let evals: Vec<usize> = recs.iter().filter(|r| r.kind == RecordKind::Eval).map(|r| r.env_steps).collect();
    assert_eq!(evals, vec![0, 20, 40, 45]);
    assert!(recs.iter().all(|r| r.wall_ms == 0));
    let documented = m2curl_harness::metrics::DOCUMENTED_KEYS;
    for r in &recs {
        for k in r.scalars.keys() {
            assert!(documented.contains(&k.as_str()), "undocumented key {k}");
        }
    }
    // Checkpoints at 20, 40 and the final step.
    assert_eq!(a.checkpoints.len(), 3);

    let c = run_experiment(&tiny(&dir.path().join("c"), 4, 45)).unwrap();
    assert_ne!(fs::read(&a.metrics_path).unwrap(), fs::read(&c.metrics_path).unwrap());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1, 30);
    let out = run_experiment(&cfg).unwrap();
    let stem = out.checkpoints.last().unwrap().with_extension("");
    let mut agent = m2curl_core::rl::Agent::new(cfg.mode(), cfg.sac.as_ref(), None, cfg.contrastive, 7, 16, 99).unwrap();
    checkpoint::load(&mut agent, &stem).unwrap();
    let resaved = dir.path().join("again");
    checkpoint::save(&agent, &resaved).unwrap();
    assert_eq!(fs::read(stem.with_extension("bin")).unwrap(), fs::read(resaved.with_extension("bin")).unwrap());
}

#[test]
fn failure_appends_a_status_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 2, 30);
    // A directory where the first checkpoint file must go makes the save fail.
    fs::create_dir_all(dir.path().join("checkpoints/step_00000020.json")).unwrap();
    assert!(run_experiment(&cfg).is_err());
    let recs = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    let last = recs.last().unwrap();
    assert_eq!(last.kind, RecordKind::Status);
    assert!(last.status.as_deref().unwrap().starts_with("error"));
    assert!(recs.iter().any(|r| r.kind == RecordKind::Eval && r.env_steps == 20));
}

#[test]
fn metrics_writer_rejects_backwards_steps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(METRICS_FILE);
    let mut w = MetricsWriter::create(&path).unwrap();
    let rec = |s| MetricsRecord {
        kind: RecordKind::Eval,
        env_steps: s,
        wall_ms: 0,
        scalars: BTreeMap::new(),
        status: None,
    };
    w.write(&rec(5)).unwrap();
    w.write(&rec(5)).unwrap();
    assert!(w.write(&rec(4)).is_err());
    drop(w);
    let mut w = MetricsWriter::append(&path).unwrap();
    assert!(w.write(&rec(3)).is_err());
    w.write(&rec(6)).unwrap();
    assert_eq!(read_metrics(&path).unwrap().len(), 3);
}

// ---- sample efficiency -----------------------------------------------------

fn grid(values: &[f64], every: usize) -> Vec<(usize, f64)> {
    values.iter().enumerate().map(|(i, &v)| (i * every, v)).collect()
}

#[test]
fn sample_efficiency_examples() {
    let reference = grid(&[-90.0, -50.0, -40.0, -30.0], 10_000);
    assert_eq!(sample_efficiency(&reference, &reference, 10_000).unwrap(), Some(10_000));
    let below = grid(&[-90.0, -80.0, -70.0, -60.0], 10_000);
    assert_eq!(sample_efficiency(&reference, &below, 10_000).unwrap(), None);
    let baseline = grid(&[-95.0, -80.0, -70.0, -50.0, -45.0], 5_000)
        .into_iter()
        .map(|(s, v)| (s + 15_000, v))
        .collect::<Vec<_>>();
    // Baseline evals at 15k, 20k, 25k, 30k, 35k: first >= -50 is 30k.
    assert_eq!(sample_efficiency(&reference, &baseline, 10_000).unwrap(), Some(30_000));
    let late = vec![(0, -99.0), (10_000, -80.0), (20_000, -60.0), (35_000, -50.0)];
    assert_eq!(sample_efficiency(&reference, &late, 10_000).unwrap(), Some(35_000));
    assert!(sample_efficiency(&reference, &late, 40_000).is_err());
}

/// Linear scan written independently of the library.
fn scan_oracle(reference: &[(usize, f64)], baseline: &[(usize, f64)], m: usize) -> Option<usize> {
    let mut target = None;
    for &(s, v) in reference {
        if s <= m {
            target = Some(v);
        }
    }
    let target = target?;
    for &(s, v) in baseline {
        if v >= target {
            return Some(s);
        }
    }
    None
}

fn curve() -> impl Strategy<Value = Vec<(usize, f64)>> {
    (1usize..5, proptest::collection::vec(-100.0f64..0.0, 1..12))
        .prop_map(|(every, vs)| vs.into_iter().enumerate().map(|(i, v)| (i * every * 1000, v)).collect())
}

proptest! {
    #[test]
    fn sample_efficiency_matches_scan(r in curve(), b in curve(), pick in 0usize..12) {
        let m = r[pick % r.len()].0;
        prop_assert_eq!(sample_efficiency(&r, &b, m).unwrap(), scan_oracle(&r, &b, m));
    }

    #[test]
    fn reference_against_itself_returns_milestone(mut vs in proptest::collection::vec(-100.0f64..0.0, 1..12), pick in 0usize..12) {
        // The identity holds for non-decreasing curves; an earlier eval can
        // otherwise already match a later score.
        vs.sort_by(f64::total_cmp);
        vs.dedup();
        let r = grid(&vs, 1000);
        let m = r[pick % r.len()].0;
        prop_assert_eq!(sample_efficiency(&r, &r, m).unwrap(), Some(m));
    }
}

// ---- summaries -------------------------------------------------------------

fn fake_run(root: &Path, name: &str, representation: &str, seed: u64, curve: &[(usize, f64)]) -> PathBuf {
    let dir = root.join(name);
    let cfg = parse_config_str(
        &json!({"env": "push_world", "algorithm": "sac", "representation": representation, "seed": seed, "output_dir": dir})
            .to_string(),
    )
    .unwrap();
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(CONFIG_FILE), cfg.to_json().unwrap()).unwrap();
    let mut w = MetricsWriter::create(&dir.join(METRICS_FILE)).unwrap();
    for &(s, v) in curve {
        w.write(&MetricsRecord {
            kind: RecordKind::Eval,
            env_steps: s,
            wall_ms: 0,
            scalars: BTreeMap::from([("episode_return".to_string(), v)]),
            status: None,
        })
        .unwrap();
    }
    dir
}

#[test]
fn three_seed_summary_uses_population_std() {
    let root = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = [-60.0, -64.0, -66.0]
        .iter()
        .enumerate()
        .map(|(i, &v)| fake_run(root.path(), &format!("r{i}"), "m2curl", i as u64, &[(0, -99.0), (20_000, v), (40_000, 0.0)]))
        .collect();
    let t = summarize_runs(&dirs, &[20_000, 30_000, 10]).unwrap();
    let row = &t.rows[0];
    assert_eq!(row.cell, "push_world/m2curl-sac");
    assert_eq!(row.seeds, vec![0, 1, 2]);
    // Hand arithmetic: mean -190/3, variance (13.44 + 0.44 + 7.11)/3 = 56/9.
    let m = &row.milestones[0];
    assert!((m.mean.unwrap() - (-190.0 / 3.0)).abs() < 1e-12);
    assert!((m.std.unwrap() - (56.0f64 / 9.0).sqrt()).abs() < 1e-12);
    assert!(t.to_text().contains("-63.33 ± 2.49"));
    // At-or-before: 30k reads the 20k evals.
    assert_eq!(row.milestones[1].mean, m.mean);
    // Eval at step 0 exists, so milestone 10 sees -99 in every run.
    assert_eq!(row.milestones[2].mean, Some(-99.0));
}

#[test]
fn single_run_and_early_milestone() {
    let root = tempfile::tempdir().unwrap();
    let d = fake_run(root.path(), "r", "rad", 0, &[(5_000, -10.0)]);
    let t = summarize_runs(&[d], &[1_000, 5_000]).unwrap();
    let ms = &t.rows[0].milestones;
    assert_eq!((ms[0].runs, ms[0].mean, ms[0].std), (0, None, None));
    assert_eq!((ms[1].mean, ms[1].std), (Some(-10.0), None));
    let csv = t.to_csv();
    assert!(csv.contains("push_world/rad-sac,1000,0,,\n"));
    assert!(csv.contains("push_world/rad-sac,5000,1,-10,\n"));
}

#[test]
fn cells_without_evals_are_omitted_with_warning() {
    let root = tempfile::tempdir().unwrap();
    let a = fake_run(root.path(), "a", "rad", 0, &[(0, -1.0)]);
    let b = fake_run(root.path(), "b", "vanilla", 0, &[]);
    let t = summarize_runs(&[a, b], &[0]).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.warnings.len(), 1);
    assert!(t.warnings[0].contains("vanilla"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn summary_is_permutation_invariant(vals in proptest::collection::vec(-100.0f64..0.0, 1..6), rot in 0usize..6) {
        let root = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| fake_run(root.path(), &format!("r{i}"), "m2curl", i as u64, &[(0, v)]))
            .collect();
        let runs: Vec<_> = dirs.iter().map(|d| load_run(d).unwrap()).collect();
        let mut shuffled = runs.clone();
        shuffled.rotate_left(rot % runs.len());
        shuffled.reverse();
        prop_assert_eq!(summarize(&runs, &[0]), summarize(&shuffled, &[0]));
    }

    #[test]
    fn milestone_std_absent_below_two(v in -100.0f64..0.0) {
        let s = milestone_stat(&[v], 0);
        prop_assert_eq!(s.mean, Some(v));
        prop_assert_eq!(s.std, None);
    }
}

#[test]
fn value_at_reads_at_or_before() {
    assert_eq!(value_at(&[(0, 1.0), (10, 2.0)], 9), Some(1.0));
}

// ---- plots -----------------------------------------------------------------

#[test]
fn constant_metric_gives_horizontal_polyline() {
    let root = tempfile::tempdir().unwrap();
    let d = fake_run(root.path(), "r", "m2curl", 0, &[(0, -5.0), (10, -5.0), (20, -5.0)]);
    let out = root.path().join("c.svg");
    plot_curves(&[d], "episode_return", &out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let line = doc.descendants().find(|n| n.attribute("class") == Some("mean")).unwrap();
    let ys: Vec<&str> = line
        .attribute("points")
        .unwrap()
        .split(' ')
        .map(|p| p.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ys.len(), 3);
    assert!(ys.iter().all(|y| *y == ys[0]));
    assert!(text.contains(">env_steps<") && text.contains(">episode_return<"));
}

#[test]
fn two_modes_get_distinct_styles_and_legend() {
    let root = tempfile::tempdir().unwrap();
    let dirs = vec![
        fake_run(root.path(), "a0", "m2curl", 0, &[(0, -9.0), (10, -4.0)]),
        fake_run(root.path(), "a1", "m2curl", 1, &[(0, -8.0), (10, -3.0)]),
        fake_run(root.path(), "b0", "vanilla", 0, &[(0, -9.0), (10, -7.0)]),
    ];
    let out = root.path().join("c.svg");
    plot_curves(&dirs, "episode_return", &out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("mean")).collect();
    assert_eq!(lines.len(), 2);
    let style = |n: &roxmltree::Node| (n.attribute("stroke").unwrap().to_string(), n.attribute("stroke-dasharray").unwrap().to_string());
    assert_ne!(style(&lines[0]), style(&lines[1]));
    let legend = doc.descendants().filter(|n| n.attribute("class") == Some("legend")).count();
    assert_eq!(legend, 2);
    assert!(text.contains("push_world/m2curl-sac") && text.contains("push_world/vanilla-sac"));
    // Two m2curl seeds form a band; the single vanilla run does too (zero width).
    assert_eq!(doc.descendants().filter(|n| n.attribute("class") == Some("band")).count(), 2);
}

#[test]
fn missing_metric_names_the_run() {
    let root = tempfile::tempdir().unwrap();
    let d = fake_run(root.path(), "lonely", "m2curl", 0, &[(0, -1.0)]);
    let err = plot_curves(&[d], "loss_mm", &root.path().join("x.svg")).unwrap_err().to_string();
    assert!(err.contains("lonely") && err.contains("loss_mm"), "{err}");
}

// ---- presets ---------------------------------------------------------------

#[test]
fn presets_expand_to_their_grids() {
    let out = Path::new("/tmp/presets");
    let t = preset("table1-grid", out).unwrap();
    assert_eq!(t.len(), 24);
    let cells: std::collections::BTreeSet<String> = t.iter().map(|c| c.cell_id()).collect();
    assert_eq!(cells.len(), 8);

    let a = preset("ablation-intra-inter", out).unwrap();
    assert_eq!(a.len(), 9);
    let intra: Vec<_> = a.iter().filter(|c| c.contrastive.lambdas() == [1.0, 1.0, 0.0, 0.0]).collect();
    assert_eq!(intra.len(), 3);
    assert!(intra.iter().all(|c| c.contrastive.lambda_vt == 0.0 && c.contrastive.lambda_tv == 0.0));
    assert_eq!(a.iter().map(|c| c.cell_id()).collect::<std::collections::BTreeSet<_>>().len(), 3);

    let u = preset("unimodal", out).unwrap();
    assert_eq!(u.len(), 18);
    for c in &u {
        let single = c.modalities != Modalities::Both;
        assert_eq!(single, !c.mode().contrastive(), "{}", c.cell_id());
        if single {
            assert_eq!(c.representation, Representation::Rad);
        }
    }
    for c in t.iter().chain(&a).chain(&u) {
        assert_eq!(&parse_config_str(&c.to_json().unwrap()).unwrap(), c);
        assert_eq!(c.seed, c.output_dir.file_name().unwrap().to_str().unwrap()[4..].parse::<u64>().unwrap());
    }
}

#[test]
fn unknown_preset_lists_valid_names() {
    let msg = preset("table2", Path::new("x")).unwrap_err().to_string();
    for p in PRESETS {
        assert!(msg.contains(p));
    }
}
