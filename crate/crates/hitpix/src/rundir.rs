//! Run directories: every artifact of a run plus a manifest listing them.

use std::collections::BTreeMap;
use std::path::Path;

use hitpix_core::addr::read_address_list;
use hitpix_core::{Address, Prefix, PrefixTable, SeedSet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::export::{build_dataset, Dataset};
use crate::pipeline::{Plan, RunOutcome};
use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub budget: usize,
    pub files: Vec<String>,
}

fn lines<I: IntoIterator<Item = Address>>(addrs: I) -> String {
    addrs.into_iter().map(|a| format!("{a}\n")).collect()
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, body: impl AsRef<[u8]>) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, body)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

/// Writes the run into `dir` and returns the dataset it exported.
pub fn write_run(
    dir: &Path,
    cfg: &RunConfig,
    seeds: &SeedSet,
    table: &PrefixTable,
    plan: &Plan,
    outcome: &RunOutcome,
) -> Result<Dataset, PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut w = Writer { dir, files: Vec::new() };
    w.put("config.json", cfg.to_json())?;
    w.put("seeds.txt", lines(seeds.addresses().iter().copied()))?;
    w.put("prefixes.txt", table.prefixes().iter().map(|p| format!("{p}\n")).collect::<String>())?;
    w.put("clustering.csv", plan.to_csv())?;
    w.put("report.json", outcome.report.to_json())?;
    w.put("rounds.csv", outcome.report.rounds_csv())?;
    w.put("verdicts.csv", outcome.ledger.verdicts_csv())?;
    w.put("actives.txt", lines(outcome.actives.iter().copied()))?;
    let mut aliased = String::from("prefix,address\n");
    for (p, v) in &outcome.aliased {
        for a in v {
            aliased.push_str(&format!("{p},{a}\n"));
        }
    }
    w.put("aliased.csv", aliased)?;
    for b in &outcome.batches {
        let stem = format!("candidates/r{:03}_s{}", b.generation_round, b.origin);
        let sidecar = serde_json::json!({
            "subclass": b.origin,
            "round": b.generation_round,
            "seed": cfg.seed,
            "count": b.len(),
        });
        w.put(&format!("{stem}.txt"), b.to_hitlist())?;
        w.put(&format!("{stem}.json"), serde_json::to_string_pretty(&sidecar)?)?;
    }
    if let Some(vae) = &plan.vae {
        w.put("models/vae.json", vae.to_checkpoint().to_json())?;
    }
    for s in &outcome.subclasses {
        w.put(&format!("models/subclass_{}.json", s.id), s.model.to_checkpoint().to_json())?;
    }
    let dataset = build_dataset(seeds, table, &outcome.actives, &outcome.aliased, cfg.alias_retain);
    w.files.extend(dataset.write(dir)?);
    w.files.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        budget: cfg.budget,
        files: w.files.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(dataset)
}

/// Rebuilds the dataset export from a run directory's files.
pub fn export_from_run(dir: &Path, retain: Option<usize>) -> Result<Dataset, PipelineError> {
    let cfg = RunConfig::from_json(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let table = PrefixTable::load(&dir.join("prefixes.txt"))?;
    let seeds = SeedSet::from_addresses(read_address_list(&dir.join("seeds.txt"))?, &table);
    let actives = read_address_list(&dir.join("actives.txt"))?;
    let mut aliased: BTreeMap<Prefix, Vec<Address>> = BTreeMap::new();
    for (i, line) in std::fs::read_to_string(dir.join("aliased.csv"))?.lines().enumerate().skip(1) {
        let bad = || PipelineError::InvalidConfig(format!("aliased.csv line {}: {line:?}", i + 1));
        let (p, a) = line.split_once(',').ok_or_else(bad)?;
        aliased.entry(p.parse().map_err(|_| bad())?).or_default().push(a.parse().map_err(|_| bad())?);
    }
    Ok(build_dataset(&seeds, &table, &actives, &aliased, retain.unwrap_or(cfg.alias_retain)))
}
