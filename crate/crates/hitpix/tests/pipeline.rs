use std::collections::{BTreeMap, HashSet};

use hitpix::export::build_dataset;
use hitpix::pipeline::{ablation_csv, run_two_stage, AblationRow};
use hitpix::rundir::{export_from_run, write_run};
use hitpix::{PipelineError, RunConfig};
use hitpix_core::metrics::conversion_gain;
use hitpix_core::oracle::{build_universe, SyntheticUniverse};
use hitpix_core::presets::small_few_seed;
use hitpix_core::{Address, Prefix, SeedSet};
use hitpix_nn::pixelgen::PixelConfig;

fn small() -> (SyntheticUniverse, SeedSet) {
    let spec = small_few_seed();
    build_universe(&spec, spec.universe_seed).unwrap()
}

/// Tiny models and few epochs: these tests check plumbing, not quality.
fn quick(budget: usize) -> RunConfig {
    RunConfig {
        budget,
        k: 2,
        train_epochs: 2,
        vae_epochs: 3,
        fine_tune_epochs: 1,
        pixel: PixelConfig { hidden: 8, blocks: 2, ..PixelConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn cadence_follows_budget() {
    assert_eq!(RunConfig { budget: 20_000, ..RunConfig::default() }.cadence(), 2000);
    assert_eq!(RunConfig { budget: 1000, ..RunConfig::default() }.cadence(), 500);
    assert_eq!(RunConfig { budget: 1000, feedback_cadence: Some(100), ..RunConfig::default() }.cadence(), 100);
}

#[test]
fn config_rejects_unknown_and_invalid_fields() {
    assert!(matches!(RunConfig::from_json(r#"{"budgt": 5}"#), Err(PipelineError::InvalidConfig(_))));
    assert!(matches!(RunConfig::from_json(r#"{"budget": 0}"#), Err(PipelineError::InvalidConfig(_))));
    assert!(matches!(RunConfig::from_json(r#"{"p_pct": 100}"#), Err(PipelineError::InvalidConfig(_))));
    let cfg = RunConfig::from_json(r#"{"budget": 777, "k": 4}"#).unwrap();
    assert_eq!((cfg.budget, cfg.k, cfg.train_epochs), (777, 4, 40));
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn budget_below_cadence_is_a_single_round() {
    let (u, seeds) = small();
    let (_, out) = hitpix::run(&seeds, u.table(), &u, &quick(300)).unwrap();
    assert_eq!(out.report.rounds.len(), 1);
    assert_eq!(out.report.budget_spent, 300);
}

#[test]
fn budget_is_spent_exactly_over_rounds() {
    let (u, seeds) = small();
    let (plan, out) = hitpix::run(&seeds, u.table(), &u, &quick(1200)).unwrap();
    assert_eq!(plan.sizes().iter().sum::<usize>(), seeds.len());
    let spent: Vec<usize> = out.report.rounds.iter().map(|r| r.budget_spent).collect();
    assert_eq!(spent, vec![500, 1000, 1200]);
    let cands: HashSet<&Address> = out.candidates().collect();
    assert_eq!(cands.len(), 1200);
    assert!(cands.iter().all(|a| !seeds.contains(**a)));
    assert!(out.actives.iter().all(|a| u.is_active(*a) && !seeds.contains(*a)));
}

#[test]
fn run_directories_are_reproducible() {
    let (u, seeds) = small();
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, seed) in [("a", 3), ("b", 3), ("c", 4)] {
        let cfg = RunConfig { seed, ..quick(600) };
        let (plan, out) = hitpix::run(&seeds, u.table(), &u, &cfg).unwrap();
        let dir = tmp.path().join(name);
        write_run(&dir, &cfg, &seeds, u.table(), &plan, &out).unwrap();
        dirs.push(dir);
    }
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&read(&dirs[0], "manifest.json")).unwrap();
    let files: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect();
    assert!(files.iter().any(|f| f.starts_with("candidates/")));
    for f in files.iter().chain([&"manifest.json".to_string()]) {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f}");
    }
    assert_ne!(read(&dirs[0], "actives.txt").len() + read(&dirs[0], "verdicts.csv").len(), 0);
    assert_ne!(read(&dirs[0], "verdicts.csv"), read(&dirs[2], "verdicts.csv"));
}

#[test]
fn export_rebuilds_from_the_run_directory() {
    let (u, seeds) = small();
    let cfg = quick(500);
    let (plan, out) = hitpix::run(&seeds, u.table(), &u, &cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let written = write_run(tmp.path(), &cfg, &seeds, u.table(), &plan, &out).unwrap();
    assert_eq!(export_from_run(tmp.path(), None).unwrap(), written);
}

#[test]
fn aliased_prefixes_keep_ten_addresses() {
    let (u, seeds) = small();
    let aliased = u.prefixes().into_iter().find(|p| u.is_aliased(p)).unwrap();
    let plain_prefix = u.prefixes().into_iter().find(|p| !u.is_aliased(p)).unwrap();
    let flood: Vec<Address> = (0..500u128).map(|i| Address(aliased.base().0 | (i * 31 + 7))).collect();
    let plain: Vec<Address> = (0..7u128).map(|i| Address(plain_prefix.base().0 | (0xffff_0000 + i))).collect();
    let map: BTreeMap<Prefix, Vec<Address>> = [(aliased, flood.clone())].into();
    let d = build_dataset(&seeds, u.table(), &plain, &map, 10);
    assert_eq!(d.addresses.len(), 17);
    assert_eq!(d.addresses.iter().filter(|a| aliased.contains(**a)).count(), 10);
    let mut first = flood;
    first.sort_unstable();
    assert!(first[..10].iter().all(|a| d.addresses.contains(a)));

    // 5 seeds + 7 found: only the enriched prefix crosses the threshold
    assert_eq!(d.per_prefix[&plain_prefix], 12);
    assert_eq!(d.summary.few_seed_prefixes, 12);
    assert_eq!(d.summary.conversion_rate, Some(2.0 / 12.0));
}

#[test]
fn exactly_ten_is_not_converted() {
    let (u, seeds) = small();
    let p = u.prefixes().into_iter().find(|p| !u.is_aliased(p)).unwrap();
    let five: Vec<Address> = (0..5u128).map(|i| Address(p.base().0 | (0xabc0_0000 + i))).collect();
    let d = build_dataset(&seeds, u.table(), &five, &BTreeMap::new(), 10);
    assert_eq!(d.per_prefix[&p], 10);
    assert_eq!(d.summary.conversion_rate, Some(0.0));
}

#[test]
fn two_stage_needs_a_proper_share() {
    let (u, seeds) = small();
    for p in [None, Some(0.0), Some(100.0)] {
        let cfg = RunConfig { p_pct: p, ..quick(1000) };
        assert!(matches!(run_two_stage(&seeds, u.table(), &u, &cfg), Err(PipelineError::InvalidConfig(_))));
    }
    // 0.05% of 1000 rounds down to an empty first stage
    let cfg = RunConfig { p_pct: Some(0.05), ..quick(1000) };
    assert!(matches!(run_two_stage(&seeds, u.table(), &u, &cfg), Err(PipelineError::InvalidConfig(_))));
}

#[test]
fn two_stage_report_is_consistent() {
    let (u, seeds) = small();
    let cfg = RunConfig { p_pct: Some(25.0), ..quick(2000) };
    let (r, stage1) = run_two_stage(&seeds, u.table(), &u, &cfg).unwrap();
    assert_eq!((r.stage1_budget, r.stage2_budget), (500, 1500));
    assert_eq!(stage1.report.budget_spent, 500);
    assert_eq!(r.hr_pre2, stage1.report.hit_rate);
    assert!(r.hr_tau1 > 0.0);
    assert_eq!(r.conversion_gain, conversion_gain(25.0, r.hr_pre2, r.hr_tau2, r.hr_tau1).unwrap());
}

#[test]
fn ablation_csv_has_two_columns() {
    let rows: Vec<AblationRow> = ["full", "no-stitch", "no-feedback", "neither"]
        .iter()
        .enumerate()
        .map(|(i, c)| AblationRow { config: c.to_string(), hit_rate: i as f64 / 8.0, actives_found: i, budget_spent: 8 })
        .collect();
    assert_eq!(
        ablation_csv(&rows),
        "config,hitrate\nfull,0.000000\nno-stitch,0.125000\nno-feedback,0.250000\nneither,0.375000\n"
    );
}
