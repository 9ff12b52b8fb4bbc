//! The enriched hitlist a run leaves behind.

use std::collections::BTreeMap;
use std::path::Path;

use hitpix_core::metrics::conversion_rate;
use hitpix_core::{Address, Prefix, PrefixTable, SeedSet};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub exported: usize,
    pub plain_actives: usize,
    pub aliased_prefixes: usize,
    pub retained_per_aliased_prefix: usize,
    /// Input prefixes with fewer than 10 seeds.
    pub few_seed_prefixes: usize,
    /// Share of those whose post-run count (seeds plus exported actives) exceeds 10.
    pub conversion_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Exported actives, ascending.
    pub addresses: Vec<Address>,
    /// Seeds plus exported actives per prefix.
    pub per_prefix: BTreeMap<Prefix, usize>,
    pub summary: ExportSummary,
}

/// Collapses each aliased prefix to its first `retain` actives and counts
/// the result per prefix.
pub fn build_dataset(
    seeds: &SeedSet,
    table: &PrefixTable,
    actives: &[Address],
    aliased: &BTreeMap<Prefix, Vec<Address>>,
    retain: usize,
) -> Dataset {
    let mut addresses: Vec<Address> = actives.to_vec();
    for v in aliased.values() {
        let mut v = v.clone();
        v.sort_unstable();
        v.dedup();
        addresses.extend(v.into_iter().take(retain));
    }
    addresses.sort_unstable();
    addresses.dedup();

    let mut per_prefix = seeds.prefix_counts();
    for &a in &addresses {
        if !seeds.contains(a) {
            *per_prefix.entry(table.assign(a)).or_insert(0) += 1;
        }
    }
    let few: Vec<Prefix> = seeds.prefix_counts().into_iter().filter(|&(_, c)| c < 10).map(|(p, _)| p).collect();
    let few_counts: BTreeMap<Prefix, usize> = few.iter().map(|p| (*p, per_prefix[p])).collect();
    let summary = ExportSummary {
        exported: addresses.len(),
        plain_actives: actives.len(),
        aliased_prefixes: aliased.len(),
        retained_per_aliased_prefix: retain,
        few_seed_prefixes: few.len(),
        conversion_rate: conversion_rate(&few_counts).ok(),
    };
    Dataset { addresses, per_prefix, summary }
}

impl Dataset {
    /// Writes `dataset.txt`, `prefix_counts.csv` and `export_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let mut list = String::new();
        for a in &self.addresses {
            list.push_str(&format!("{a}\n"));
        }
        std::fs::write(dir.join("dataset.txt"), list)?;
        let mut csv = String::from("prefix,count\n");
        for (p, c) in &self.per_prefix {
            csv.push_str(&format!("{p},{c}\n"));
        }
        std::fs::write(dir.join("prefix_counts.csv"), csv)?;
        std::fs::write(dir.join("export_summary.json"), serde_json::to_string_pretty(&self.summary)?)?;
        Ok(vec!["dataset.txt".into(), "prefix_counts.csv".into(), "export_summary.json".into()])
    }
}
