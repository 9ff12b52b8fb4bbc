//! The probing boundary.
//!
//! [`Prober`] is what the generators talk to. [`SyntheticUniverse`] is a
//! deterministic stand-in for the live network: every configured prefix has a
//! scheme that decides, as a pure function of the address and the universe
//! seed, whether an address answers. [`ExternalScanner`] shells out to an
//! operator-supplied scanner and is disabled unless explicitly enabled.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{parse_address, Address, Prefix, PrefixTable, SeedSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid universe spec: {0}")]
    InvalidSpec(String),
    #[error("probe budget exhausted at {cap} unique addresses ({} verdicts returned)", partial.len())]
    BudgetExhausted { cap: usize, partial: Vec<ProbeVerdict> },
    #[error("external scanner unavailable: {0}")]
    ScannerUnavailable(String),
    #[error("could not parse scanner output line {line}: {text:?}")]
    ScannerParseError { line: usize, text: String },
}

/// SplitMix64 finalizer over the address and a seed.
pub fn address_hash(a: Address, seed: u64) -> u64 {
    let mut z = (a.0 as u64) ^ ((a.0 >> 64) as u64).rotate_left(29) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn unit_hash(a: Address, seed: u64) -> f64 {
    (address_hash(a, seed) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeVerdict {
    pub address: Address,
    pub active: bool,
    pub rtt_ticks: u32,
}

/// How actives are laid out under one prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Scheme {
    /// `prefix::0 … prefix::(count-1)` answer.
    CounterLow64 { count: u64 },
    /// Addresses in the low `span_bits` window answer with probability `density`.
    RandomSparse {
        density: f64,
        #[serde(default)]
        span_bits: Option<u32>,
    },
    /// A 32-nybble template, `*` marking free nybbles, e.g.
    /// `20010db800010000000000000000**01`. Colons are ignored.
    WordPattern {
        template: String,
        #[serde(default = "one")]
        density: f64,
    },
    /// Every address answers.
    Aliased,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BiasRule {
    /// The numerically first `m` actives.
    #[default]
    First,
    /// `m` actives drawn uniformly from the first 4096.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub prefix: Prefix,
    pub scheme: Scheme,
    #[serde(default)]
    pub seeds: Option<usize>,
    #[serde(default)]
    pub bias: Option<BiasRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseSpec {
    #[serde(default)]
    pub universe_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds_per_prefix: usize,
    #[serde(default)]
    pub bias: BiasRule,
    pub prefixes: Vec<PrefixSpec>,
}

fn default_seeds() -> usize {
    5
}

impl UniverseSpec {
    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        serde_json::from_str(text).map_err(|e| OracleError::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Counter { count: u64 },
    Sparse { density: f64, span_bits: u32 },
    Pattern { fixed: u128, fixed_mask: u128, free: Vec<usize>, density: f64 },
    Aliased,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    prefix: Prefix,
    scheme: Scheme,
    rule: Rule,
}

/// Desk-scale enumeration bound for sparse windows and pattern volumes.
const MAX_ENUM_BITS: u32 = 24;

fn compile(p: &PrefixSpec) -> Result<Rule, OracleError> {
    let bad = |m: String| Err(OracleError::InvalidSpec(format!("{}: {m}", p.prefix)));
    match &p.scheme {
        Scheme::CounterLow64 { count } => {
            if p.prefix.len() > 64 {
                return bad("counter-low64 needs a prefix of /64 or shorter".into());
            }
            if *count == 0 {
                return bad("counter-low64 count must be positive".into());
            }
            Ok(Rule::Counter { count: *count })
        }
        Scheme::RandomSparse { density, span_bits } => {
            if !(*density > 0.0 && *density <= 1.0) {
                return bad(format!("density {density} outside (0, 1]"));
            }
            let span = span_bits.unwrap_or(p.prefix.host_bits());
            if span > p.prefix.host_bits() {
                return bad(format!("span of {span} bits exceeds the prefix's host bits"));
            }
            Ok(Rule::Sparse { density: *density, span_bits: span })
        }
        Scheme::WordPattern { template, density } => {
            if !(*density > 0.0 && *density <= 1.0) {
                return bad(format!("density {density} outside (0, 1]"));
            }
            let digits: Vec<char> = template.chars().filter(|&c| c != ':').collect();
            if digits.len() != 32 {
                return bad(format!("template needs 32 nybbles, got {}", digits.len()));
            }
            let (mut fixed, mut fixed_mask, mut free) = (0u128, 0u128, Vec::new());
            for (i, c) in digits.iter().enumerate() {
                let shift = 124 - 4 * i;
                if *c == '*' {
                    free.push(i);
                } else if let Some(v) = c.to_digit(16) {
                    fixed |= (v as u128) << shift;
                    fixed_mask |= 0xfu128 << shift;
                } else {
                    return bad(format!("bad template character {c:?}"));
                }
            }
            if free.len() as u32 * 4 > MAX_ENUM_BITS {
                return bad("too many free nybbles".into());
            }
            let template_base = Address(fixed);
            let covers_prefix = free.iter().all(|&n| 4 * n as u32 >= p.prefix.len() as u32);
            if !covers_prefix || !p.prefix.contains(template_base) {
                return bad("template does not lie under the prefix".into());
            }
            Ok(Rule::Pattern { fixed, fixed_mask, free, density: *density })
        }
        Scheme::Aliased => Ok(Rule::Aliased),
    }
}

impl Entry {
    fn is_active(&self, a: Address, seed: u64) -> bool {
        let host = a.0 & !prefix_mask(self.prefix.len());
        match &self.rule {
            Rule::Counter { count } => host < *count as u128,
            Rule::Sparse { density, span_bits } => {
                host.checked_shr(*span_bits).unwrap_or(0) == 0 && unit_hash(a, seed) < *density
            }
            Rule::Pattern { fixed, fixed_mask, density, .. } => {
                a.0 & fixed_mask == *fixed && (*density >= 1.0 || unit_hash(a, seed) < *density)
            }
            Rule::Aliased => true,
        }
    }

    /// Ascending actives, at most `limit`.
    fn enumerate(&self, limit: usize, seed: u64) -> Vec<Address> {
        let base = self.prefix.base().0;
        match &self.rule {
            Rule::Counter { count } => (0..(*count).min(limit as u64)).map(|i| Address(base | i as u128)).collect(),
            Rule::Sparse { span_bits, .. } => {
                let span = (*span_bits).min(MAX_ENUM_BITS);
                (0..1u128 << span).map(|i| Address(base | i)).filter(|&a| self.is_active(a, seed)).take(limit).collect()
            }
            Rule::Pattern { fixed, free, .. } => {
                let combos = 1u128 << (4 * free.len());
                (0..combos)
                    .map(|k| {
                        let mut v = *fixed;
                        for (j, &n) in free.iter().enumerate() {
                            let digit = (k >> (4 * (free.len() - 1 - j))) & 0xf;
                            v |= digit << (124 - 4 * n);
                        }
                        Address(v)
                    })
                    .filter(|&a| self.is_active(a, seed))
                    .take(limit)
                    .collect()
            }
            Rule::Aliased => (0..limit as u128).map(|i| Address(base | i)).collect(),
        }
    }

    /// Exact active count, or the expectation for hashed schemes.
    fn ground_truth(&self) -> f64 {
        match &self.rule {
            Rule::Counter { count } => *count as f64,
            Rule::Sparse { density, span_bits } => density * 2f64.powi(*span_bits as i32),
            Rule::Pattern { free, density, .. } => density * 16f64.powi(free.len() as i32),
            Rule::Aliased => 2f64.powi(self.prefix.host_bits() as i32),
        }
    }
}

fn prefix_mask(len: u8) -> u128 {
    if len == 0 {
        0
    } else {
        u128::MAX << (128 - len as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUniverse {
    entries: Vec<Entry>,
    index: HashMap<Prefix, usize>,
    table: PrefixTable,
    universe_seed: u64,
}

impl SyntheticUniverse {
    pub fn table(&self) -> &PrefixTable {
        &self.table
    }

    pub fn universe_seed(&self) -> u64 {
        self.universe_seed
    }

    pub fn prefixes(&self) -> Vec<Prefix> {
        self.entries.iter().map(|e| e.prefix).collect()
    }

    pub fn scheme(&self, p: &Prefix) -> Option<&Scheme> {
        self.index.get(p).map(|&i| &self.entries[i].scheme)
    }

    fn entry_for(&self, a: Address) -> Option<&Entry> {
        self.table.longest_match(a).and_then(|p| self.index.get(&p)).map(|&i| &self.entries[i])
    }

    pub fn is_active(&self, a: Address) -> bool {
        self.entry_for(a).is_some_and(|e| e.is_active(a, self.universe_seed))
    }

    pub fn is_aliased(&self, p: &Prefix) -> bool {
        matches!(self.scheme(p), Some(Scheme::Aliased))
    }

    /// First `limit` actives under a configured prefix, ascending. Addresses
    /// claimed by a longer configured prefix are skipped.
    pub fn enumerate_actives(&self, p: &Prefix, limit: usize) -> Vec<Address> {
        match self.index.get(p) {
            Some(&i) => {
                let e = &self.entries[i];
                e.enumerate(limit, self.universe_seed).into_iter().filter(|a| self.table.assign(*a) == *p).collect()
            }
            None => Vec::new(),
        }
    }

    pub fn ground_truth_count(&self, p: &Prefix) -> Option<f64> {
        self.index.get(p).map(|&i| self.entries[i].ground_truth())
    }

    /// Non-aliased ground-truth actives divided by the total address volume of
    /// the configured prefixes: the hit rate of uniform random probing inside them.
    pub fn uniform_random_hit_rate(&self) -> f64 {
        let (mut act, mut vol) = (0.0, 0.0);
        for e in &self.entries {
            vol += 2f64.powi(e.prefix.host_bits() as i32);
            if !matches!(e.rule, Rule::Aliased) {
                act += e.ground_truth();
            }
        }
        act / vol
    }

    fn rtt(&self, a: Address) -> u32 {
        10 + (address_hash(a, self.universe_seed ^ 0x5151) % 90) as u32
    }
}

/// Builds the universe and its biased seed set.
pub fn build_universe(spec: &UniverseSpec, universe_seed: u64) -> Result<(SyntheticUniverse, SeedSet), OracleError> {
    if spec.prefixes.is_empty() {
        return Err(OracleError::InvalidSpec("no prefixes".into()));
    }
    let mut entries = Vec::with_capacity(spec.prefixes.len());
    let mut index = HashMap::new();
    let mut table = PrefixTable::new();
    for p in &spec.prefixes {
        if index.contains_key(&p.prefix) {
            return Err(OracleError::InvalidSpec(format!("duplicate prefix {}", p.prefix)));
        }
        index.insert(p.prefix, entries.len());
        table.insert(p.prefix);
        entries.push(Entry { prefix: p.prefix, scheme: p.scheme.clone(), rule: compile(p)? });
    }
    let universe = SyntheticUniverse { entries, index, table, universe_seed };

    let mut seeds = Vec::new();
    for (i, p) in spec.prefixes.iter().enumerate() {
        let m = p.seeds.unwrap_or(spec.seeds_per_prefix);
        if m == 0 {
            continue;
        }
        let bias = p.bias.unwrap_or(spec.bias);
        let picked = match bias {
            BiasRule::First => universe.enumerate_actives(&p.prefix, m),
            BiasRule::Uniform => {
                let mut pool = universe.enumerate_actives(&p.prefix, 4096);
                let mut rng = ChaCha8Rng::seed_from_u64(universe_seed ^ (i as u64).wrapping_mul(0x9e37_79b9));
                let take = m.min(pool.len());
                for j in 0..take {
                    let k = rng.gen_range(j..pool.len());
                    pool.swap(j, k);
                }
                pool.truncate(take);
                pool
            }
        };
        if picked.len() < m {
            return Err(OracleError::InvalidSpec(format!(
                "{} has only {} actives but {m} seeds were requested",
                p.prefix,
                picked.len()
            )));
        }
        seeds.extend(picked);
    }
    let seeds = SeedSet::from_addresses(seeds, &universe.table);
    Ok((universe, seeds))
}

/// Anything that can tell whether addresses answer a probe.
pub trait Prober {
    fn probe_many(&self, addrs: &[Address]) -> Result<Vec<ProbeVerdict>, OracleError>;
}

impl Prober for SyntheticUniverse {
    fn probe_many(&self, addrs: &[Address]) -> Result<Vec<ProbeVerdict>, OracleError> {
        Ok(addrs
            .iter()
            .map(|&a| {
                let active = self.is_active(a);
                ProbeVerdict { address: a, active, rtt_ticks: if active { self.rtt(a) } else { 0 } }
            })
            .collect())
    }
}

/// Everything probed so far, and how much budget it cost.
#[derive(Debug, Clone, Default)]
pub struct ProbeLedger {
    probed: HashMap<Address, ProbeVerdict>,
    budget_spent: usize,
    cap: Option<usize>,
    aliased_prefixes: BTreeSet<Prefix>,
    checked_prefixes: BTreeMap<Prefix, bool>,
    alias_probes: usize,
}

impl ProbeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_cap(cap: usize) -> Self {
        ProbeLedger { cap: Some(cap), ..Self::default() }
    }

    pub fn budget_spent(&self) -> usize {
        self.budget_spent
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap
    }

    pub fn verdict(&self, a: &Address) -> Option<&ProbeVerdict> {
        self.probed.get(a)
    }

    pub fn len(&self) -> usize {
        self.probed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probed.is_empty()
    }

    /// Verdicts sorted by address.
    pub fn verdicts(&self) -> Vec<ProbeVerdict> {
        let mut v: Vec<_> = self.probed.values().copied().collect();
        v.sort_by_key(|x| x.address);
        v
    }

    pub fn aliased_prefixes(&self) -> &BTreeSet<Prefix> {
        &self.aliased_prefixes
    }

    pub fn mark_aliased(&mut self, p: Prefix) {
        self.aliased_prefixes.insert(p);
    }

    pub fn is_under_alias(&self, a: Address) -> bool {
        self.aliased_prefixes.iter().any(|p| p.contains(a))
    }

    pub fn alias_probes(&self) -> usize {
        self.alias_probes
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = String::from("address,active\n");
        for v in self.verdicts() {
            s.push_str(&format!("{},{}\n", v.address, v.active as u8));
        }
        s
    }
}

/// Probes a batch, charging one unit of budget per previously unseen
/// address. Known addresses are answered from the ledger, and addresses under
/// a prefix already found aliased are answered active without a probe.
pub fn probe<P: Prober + ?Sized>(
    prober: &P,
    batch: &[Address],
    ledger: &mut ProbeLedger,
) -> Result<Vec<ProbeVerdict>, OracleError> {
    let mut out: Vec<Option<ProbeVerdict>> = vec![None; batch.len()];
    let mut fresh: Vec<(usize, Address)> = Vec::new();
    let mut pending = std::collections::HashSet::new();
    let mut exhausted = false;
    for (i, &a) in batch.iter().enumerate() {
        if let Some(v) = ledger.probed.get(&a) {
            out[i] = Some(*v);
            continue;
        }
        if pending.contains(&a) {
            fresh.push((i, a));
            continue;
        }
        if let Some(cap) = ledger.cap {
            if ledger.budget_spent + pending.len() >= cap {
                exhausted = true;
                break;
            }
        }
        pending.insert(a);
        fresh.push((i, a));
    }
    let (alias_hits, to_probe): (Vec<_>, Vec<_>) = fresh.into_iter().partition(|(_, a)| ledger.is_under_alias(*a));
    let mut unique: Vec<Address> = to_probe.iter().map(|(_, a)| *a).collect();
    unique.sort_unstable();
    unique.dedup();
    let answered: HashMap<Address, ProbeVerdict> =
        prober.probe_many(&unique)?.into_iter().map(|v| (v.address, v)).collect();
    for (i, a) in alias_hits {
        out[i] = Some(ProbeVerdict { address: a, active: true, rtt_ticks: 0 });
    }
    for (i, a) in to_probe {
        out[i] = Some(answered.get(&a).copied().unwrap_or(ProbeVerdict { address: a, active: false, rtt_ticks: 0 }));
    }
    for v in out.iter().flatten() {
        if !ledger.probed.contains_key(&v.address) {
            ledger.probed.insert(v.address, *v);
            ledger.budget_spent += 1;
        }
    }
    let verdicts: Vec<ProbeVerdict> = out.into_iter().flatten().collect();
    if exhausted {
        return Err(OracleError::BudgetExhausted { cap: ledger.cap.unwrap_or(0), partial: verdicts });
    }
    Ok(verdicts)
}

/// Alias check: probe `probes` pseudorandom addresses inside one random
/// `/check_len` sub-prefix of `prefix`; aliased iff all of them answer.
/// The result is cached in the ledger; alias probes are not charged to the
/// candidate budget.
pub fn detect_alias<P: Prober + ?Sized>(
    prober: &P,
    prefix: Prefix,
    probes: usize,
    check_len: u8,
    seed: u64,
    ledger: &mut ProbeLedger,
) -> Result<bool, OracleError> {
    if let Some(&known) = ledger.checked_prefixes.get(&prefix) {
        return Ok(known);
    }
    let check_len = check_len.max(prefix.len() + 1).min(128);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ address_hash(prefix.base(), prefix.len() as u64));
    let sub_bits = prefix_mask(check_len) & !prefix_mask(prefix.len());
    let sub = prefix.base().0 | (rng.gen::<u128>() & sub_bits);
    let host_bits = !prefix_mask(check_len);
    let targets: Vec<Address> = (0..probes).map(|_| Address(sub | (rng.gen::<u128>() & host_bits))).collect();
    let verdicts = prober.probe_many(&targets)?;
    ledger.alias_probes += targets.len();
    let aliased = !verdicts.is_empty() && verdicts.iter().all(|v| v.active);
    ledger.checked_prefixes.insert(prefix, aliased);
    if aliased {
        ledger.aliased_prefixes.insert(prefix);
    }
    Ok(aliased)
}

pub const SCANNER_ENV: &str = "HITPIX_SCANNER";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Must be set alongside `enabled`: the operator confirms live probing is authorized.
    #[serde(default)]
    pub acknowledge_live_scanning: bool,
    #[serde(default)]
    pub binary: Option<PathBuf>,
    #[serde(default = "default_rate")]
    pub rate_mbps: f64,
    #[serde(default)]
    pub extra_args: Vec<String>,
}

fn default_rate() -> f64 {
    10.0
}

impl Default for ScannerConfig {
    fn default() -> Self {
        ScannerConfig { enabled: false, acknowledge_live_scanning: false, binary: None, rate_mbps: 10.0, extra_args: vec![] }
    }
}

/// Subprocess adapter: addresses go to the scanner's stdin one per line;
/// it prints the responding ones to stdout and exits 0.
#[derive(Debug, Clone)]
pub struct ExternalScanner {
    pub config: ScannerConfig,
}

impl ExternalScanner {
    pub fn new(config: ScannerConfig) -> Self {
        ExternalScanner { config }
    }

    pub fn args(&self) -> Vec<String> {
        let mut v = vec![
            format!("--bandwidth={}M", self.config.rate_mbps),
            "--probe-module=icmp6_echoscan".to_string(),
            "--probes=1".to_string(),
        ];
        v.extend(self.config.extra_args.iter().cloned());
        v
    }

    fn binary(&self) -> Result<PathBuf, OracleError> {
        if !self.config.enabled {
            return Err(OracleError::ScannerUnavailable(
                "the external scanner is disabled; set enabled and acknowledge_live_scanning in the scanner config \
                 and point `binary` (or $HITPIX_SCANNER) at a scanner that reads addresses on stdin"
                    .into(),
            ));
        }
        if !self.config.acknowledge_live_scanning {
            return Err(OracleError::ScannerUnavailable("live scanning was not acknowledged".into()));
        }
        self.config
            .binary
            .clone()
            .or_else(|| std::env::var_os(SCANNER_ENV).map(PathBuf::from))
            .ok_or_else(|| OracleError::ScannerUnavailable(format!("no scanner binary configured (set ${SCANNER_ENV})")))
    }

    pub fn scan(&self, addrs: &[Address]) -> Result<Vec<ProbeVerdict>, OracleError> {
        let bin = self.binary()?;
        let mut child = Command::new(&bin)
            .args(self.args())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| OracleError::ScannerUnavailable(format!("{}: {e}", bin.display())))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            let mut input = String::with_capacity(addrs.len() * 40);
            for a in addrs {
                input.push_str(&a.to_string());
                input.push('\n');
            }
            stdin.write_all(input.as_bytes()).map_err(|e| OracleError::ScannerUnavailable(e.to_string()))?;
        }
        let output = child.wait_with_output().map_err(|e| OracleError::ScannerUnavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(OracleError::ScannerUnavailable(format!("scanner exited with {}", output.status)));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let mut responding = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let a = parse_address(line)
                .map_err(|_| OracleError::ScannerParseError { line: i + 1, text: line.to_string() })?;
            responding.insert(a);
        }
        Ok(addrs.iter().map(|&a| ProbeVerdict { address: a, active: responding.contains(&a), rtt_ticks: 0 }).collect())
    }
}

impl Prober for ExternalScanner {
    fn probe_many(&self, addrs: &[Address]) -> Result<Vec<ProbeVerdict>, OracleError> {
        self.scan(addrs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn p(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn spec(entries: Vec<(&str, Scheme)>, seeds: usize) -> UniverseSpec {
        UniverseSpec {
            universe_seed: 0,
            seeds_per_prefix: seeds,
            bias: BiasRule::First,
            prefixes: entries
                .into_iter()
                .map(|(x, s)| PrefixSpec { prefix: p(x), scheme: s, seeds: None, bias: None })
                .collect(),
        }
    }

    #[test]
    fn counter_scheme() {
        let (u, seeds) =
            build_universe(&spec(vec![("2001:db8:1::/48", Scheme::CounterLow64 { count: 10 })], 3), 1).unwrap();
        assert!(u.is_active(a("2001:db8:1::5")));
        assert!(!u.is_active(a("2001:db8:1::a")));
        assert!(!u.is_active(a("2001:db8:2::1")));
        assert_eq!(seeds.addresses(), &[a("2001:db8:1::"), a("2001:db8:1::1"), a("2001:db8:1::2")]);
        assert_eq!(u.ground_truth_count(&p("2001:db8:1::/48")), Some(10.0));
    }

    #[test]
    fn pattern_scheme() {
        let s = spec(
            vec![("2001:db8:2::/48", Scheme::WordPattern { template: "2001:0db8:0002:0000:0000:0000:00**:0001".into(), density: 1.0 })],
            2,
        );
        let (u, seeds) = build_universe(&s, 0).unwrap();
        assert!(u.is_active(a("2001:db8:2::ab:1")));
        assert!(!u.is_active(a("2001:db8:2::1ab:1")));
        assert!(!u.is_active(a("2001:db8:2::ab:2")));
        assert_eq!(seeds.addresses(), &[a("2001:db8:2::1"), a("2001:db8:2::1:1")]);
        assert_eq!(u.enumerate_actives(&p("2001:db8:2::/48"), 1000).len(), 256);

        let bad = spec(vec![("2001:db8:2::/48", Scheme::WordPattern { template: "2001:0db8:0003:0000:0000:0000:00**:0001".into(), density: 1.0 })], 1);
        assert!(matches!(build_universe(&bad, 0), Err(OracleError::InvalidSpec(_))));
    }

    #[test]
    fn invalid_specs() {
        let s = spec(vec![("2001:db8::/96", Scheme::CounterLow64 { count: 3 })], 1);
        assert!(build_universe(&s, 0).is_err());
        let s = spec(vec![("2001:db8::/48", Scheme::CounterLow64 { count: 3 })], 5);
        assert!(build_universe(&s, 0).is_err());
        let s = spec(vec![("2001:db8::/48", Scheme::RandomSparse { density: 0.0, span_bits: None })], 0);
        assert!(build_universe(&s, 0).is_err());
        assert!(build_universe(&spec(vec![], 1), 0).is_err());
    }

    #[test]
    fn twenty_prefixes_five_seeds() {
        let entries: Vec<(String, Scheme)> = (0..20)
            .map(|i| (format!("2001:db8:{i:x}::/48"), Scheme::CounterLow64 { count: 100 }))
            .collect();
        let s = spec(entries.iter().map(|(x, s)| (x.as_str(), s.clone())).collect(), 5);
        let (u, seeds) = build_universe(&s, 9).unwrap();
        assert_eq!(seeds.len(), 100);
        let census = crate::addr::few_seed_census(&seeds, 10).unwrap();
        assert_eq!(census.few_seed, 20);
        let (u2, seeds2) = build_universe(&s, 9).unwrap();
        assert_eq!(u, u2);
        assert_eq!(seeds.addresses(), seeds2.addresses());
    }

    #[test]
    fn uniform_bias_is_seeded() {
        let mut s = spec(vec![("2001:db8:1::/48", Scheme::RandomSparse { density: 0.5, span_bits: Some(12) })], 6);
        s.bias = BiasRule::Uniform;
        let (u, a1) = build_universe(&s, 4).unwrap();
        let (_, a2) = build_universe(&s, 4).unwrap();
        assert_eq!(a1.addresses(), a2.addresses());
        assert!(a1.addresses().iter().all(|x| u.is_active(*x)));
    }

    #[test]
    fn ledger_accounting() {
        let (u, _) = build_universe(&spec(vec![("2001:db8:1::/48", Scheme::CounterLow64 { count: 10 })], 1), 1).unwrap();
        let mut ledger = ProbeLedger::new();
        let batch = [a("2001:db8:1::1"), a("2001:db8:1::20"), a("2001:db8:1::1")];
        let v = probe(&u, &batch, &mut ledger).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v[0].active && !v[1].active && v[2].active);
        assert_eq!(ledger.budget_spent(), 2);
        probe(&u, &batch, &mut ledger).unwrap();
        assert_eq!(ledger.budget_spent(), 2);
    }

    #[test]
    fn budget_cap_returns_partial() {
        let (u, _) = build_universe(&spec(vec![("2001:db8:1::/48", Scheme::CounterLow64 { count: 10 })], 1), 1).unwrap();
        let mut ledger = ProbeLedger::with_cap(3);
        let batch: Vec<Address> = (0..5u128).map(|i| Address(a("2001:db8:1::").0 | i)).collect();
        match probe(&u, &batch, &mut ledger) {
            Err(OracleError::BudgetExhausted { cap, partial }) => {
                assert_eq!(cap, 3);
                assert_eq!(partial.len(), 3);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(ledger.budget_spent(), 3);
    }

    #[test]
    fn alias_detection() {
        let s = spec(
            vec![
                ("2001:db8:a::/48", Scheme::Aliased),
                ("2001:db8:b::/48", Scheme::RandomSparse { density: 0.01, span_bits: None }),
                ("2001:db8:c::/48", Scheme::CounterLow64 { count: 1000 }),
            ],
            0,
        );
        let (u, _) = build_universe(&s, 3).unwrap();
        let mut ledger = ProbeLedger::new();
        assert!(detect_alias(&u, p("2001:db8:a::/48"), 16, 96, 1, &mut ledger).unwrap());
        assert!(!detect_alias(&u, p("2001:db8:b::/48"), 16, 96, 1, &mut ledger).unwrap());
        assert!(!detect_alias(&u, p("2001:db8:c::/48"), 16, 96, 1, &mut ledger).unwrap());
        assert_eq!(ledger.budget_spent(), 0);
        assert_eq!(ledger.alias_probes(), 48);
        // known aliased prefix answers without a probe
        let v = probe(&u, &[a("2001:db8:a::77")], &mut ledger).unwrap();
        assert!(v[0].active);
        assert!(ledger.is_under_alias(a("2001:db8:a::77")));
    }

    #[test]
    fn scanner_disabled_by_default() {
        let s = ExternalScanner::new(ScannerConfig::default());
        match s.scan(&[a("::1")]) {
            Err(OracleError::ScannerUnavailable(msg)) => assert!(msg.contains("disabled")),
            other => panic!("{other:?}"),
        }
        assert!(s.args().iter().any(|x| x == "--bandwidth=10M"));
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(
            vec![
                ("2001:db8:1::/48", Scheme::CounterLow64 { count: 10 }),
                ("2001:db8:2::/48", Scheme::Aliased),
            ],
            1,
        );
        assert_eq!(UniverseSpec::from_json(&s.to_json()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn verdicts_are_stable(v in any::<u64>()) {
            let (u, _) = build_universe(&spec(vec![("2001:db8:1::/48", Scheme::RandomSparse { density: 0.3, span_bits: Some(16) })], 0), 77).unwrap();
            let x = Address(a("2001:db8:1::").0 | (v & 0xffff) as u128);
            let first = u.probe_many(&[x]).unwrap();
            prop_assert_eq!(first, u.probe_many(&[x]).unwrap());
        }
    }
}
