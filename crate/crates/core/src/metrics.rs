//! HitRate, CoverNum, conversion gain and conversion rate.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{Address, Prefix, PrefixTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("hit rate of an empty candidate set is undefined")]
    EmptyCandidates,
    #[error("conversion gain needs a positive single-stage hit rate")]
    ZeroBaseline,
    #[error("budget share p must lie strictly between 0 and 100")]
    BadShare,
    #[error("conversion rate over an empty prefix map is undefined")]
    EmptySet,
}

/// Few-seed conversion boundary: a prefix counts as converted above this.
pub const CONVERSION_THRESHOLD: usize = 10;

/// `|C∩T − C∩S| / |C|` over unique candidates.
pub fn hit_rate(
    candidates: &HashSet<Address>,
    actives: &HashSet<Address>,
    seeds: &HashSet<Address>,
) -> Result<f64, MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCandidates);
    }
    let hits = candidates.iter().filter(|a| actives.contains(a) && !seeds.contains(a)).count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// Number of distinct longest-match prefixes over `actives`. Addresses that
/// match nothing in the table do not count.
pub fn cover_num<'a, I: IntoIterator<Item = &'a Address>>(actives: I, table: &PrefixTable) -> usize {
    actives.into_iter().filter_map(|a| table.longest_match(*a)).collect::<BTreeSet<_>>().len()
}

/// `(p·hr_pre2 + (100−p)·hr_tau2) / (100·hr_tau1) − 1`.
pub fn conversion_gain(p_pct: f64, hr_pre2: f64, hr_tau2: f64, hr_tau1: f64) -> Result<f64, MetricError> {
    if !(p_pct > 0.0 && p_pct < 100.0) {
        return Err(MetricError::BadShare);
    }
    if hr_tau1 <= 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    Ok((p_pct * hr_pre2 + (100.0 - p_pct) * hr_tau2) / (100.0 * hr_tau1) - 1.0)
}

/// Fraction of prefixes whose count is strictly greater than 10.
pub fn conversion_rate(prefix_counts: &BTreeMap<Prefix, usize>) -> Result<f64, MetricError> {
    if prefix_counts.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let converted = prefix_counts.values().filter(|&&c| c > CONVERSION_THRESHOLD).count();
    Ok(converted as f64 / prefix_counts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub round: usize,
    pub budget_spent: usize,
    pub candidates: usize,
    pub actives_found: usize,
    pub hit_rate: f64,
    pub cover_num: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub hit_rate: f64,
    pub cover_num: usize,
    pub budget: usize,
    pub budget_spent: usize,
    pub actives_found: usize,
    pub rounds: Vec<RoundStat>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn rounds_csv(&self) -> String {
        let mut s = String::from("round,budget_spent,candidates,actives_found,hit_rate,cover_num\n");
        for r in &self.rounds {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.round, r.budget_spent, r.candidates, r.actives_found, r.hit_rate, r.cover_num
            ));
        }
        s
    }
}
