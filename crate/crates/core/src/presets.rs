//! Ready-made universes and corpora used by the CLI and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::addr::{Address, Prefix};
use crate::oracle::{BiasRule, PrefixSpec, Scheme, UniverseSpec};

const ORGS: [u32; 5] = [0x2001_0db8, 0x2400_cb00, 0x2a02_26f0, 0x2600_1f18, 0x2804_30d0];

fn slash48(org: u32, site: u16) -> Prefix {
    let v = ((org as u128) << 96) | ((site as u128) << 80);
    Prefix::new(Address(v), 48)
}

fn template_for(p: &Prefix, iid: &str) -> String {
    let hex = p.base().to_full_hex();
    format!("{}{}", &hex[..12], iid)
}

/// The biased few-seed universe: 40 /48s under five /32s, five seeds each,
/// always the numerically first actives of the prefix. Schemes rotate
/// through low counters, IID word patterns, subnet+IID patterns and sparse
/// low windows, so a generator that only imitates the seeds saturates fast.
pub fn standard_few_seed() -> UniverseSpec {
    let counts = [400u64, 900, 1500, 2500];
    let mut prefixes = Vec::with_capacity(40);
    for i in 0..40usize {
        let org = ORGS[i % ORGS.len()];
        let site = 0x100 + 0x11 * i as u16;
        let prefix = slash48(org, site);
        let scheme = match i % 4 {
            0 => Scheme::CounterLow64 { count: counts[(i / 4) % counts.len()] },
            1 => Scheme::WordPattern { template: template_for(&prefix, "0000000000000000**01"), density: 0.7 },
            2 => Scheme::RandomSparse { density: 0.3, span_bits: Some(10) },
            _ => Scheme::WordPattern { template: template_for(&prefix, "00*000000000000000*1"), density: 0.8 },
        };
        prefixes.push(PrefixSpec { prefix, scheme, seeds: None, bias: None });
    }
    UniverseSpec { universe_seed: 2024, seeds_per_prefix: 5, bias: BiasRule::First, prefixes }
}

/// A small universe for quick end-to-end runs: 12 prefixes, 5 seeds each,
/// with one aliased prefix.
pub fn small_few_seed() -> UniverseSpec {
    let mut spec = standard_few_seed();
    spec.prefixes.truncate(11);
    let aliased = slash48(0x2001_0db8, 0xa11a);
    spec.prefixes.push(PrefixSpec { prefix: aliased, scheme: Scheme::Aliased, seeds: Some(5), bias: None });
    spec
}

/// Three address families that differ in prefix and interface-identifier
/// style. Returns `(address, family)` pairs, `per_family` of each.
pub fn three_family_corpus(per_family: usize, seed: u64) -> Vec<(Address, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_family);
    for family in 0..3 {
        let mut seen = std::collections::HashSet::new();
        while seen.len() < per_family {
            let a = match family {
                // low counters under 2001:db8:0XY0::/44-ish sites
                0 => {
                    let site: u128 = rng.gen_range(0..16) << 4;
                    let low: u128 = rng.gen_range(1..0x200);
                    Address((0x2001_0db8u128 << 96) | (site << 80) | low)
                }
                // EUI-64 style interface identifiers
                1 => {
                    let subnet: u128 = rng.gen_range(0..4);
                    let mac_hi: u128 = rng.gen_range(0..1 << 24);
                    let mac_lo: u128 = rng.gen_range(0..1 << 24);
                    let iid = (mac_hi << 40) | (0xfffe << 24) | mac_lo;
                    Address((0x2a02_26f0_00ab_0000u128 << 64) | (subnet << 64) | iid)
                }
                // privacy-style random identifiers
                _ => {
                    let subnet: u128 = rng.gen_range(0..256);
                    let iid: u128 = rng.gen::<u64>() as u128;
                    Address((0x2400_cb00_2048_0000u128 << 64) | (subnet << 64) | iid)
                }
            };
            if seen.insert(a) {
                out.push((a, family));
            }
        }
    }
    out
}

/// `2001:db8:1::XY:1`-style pattern: a fixed /32 with two free nybbles.
pub const TWO_NYBBLE_TEMPLATE: &str = "20010db8000100000000000000**0001";

/// Whether `a` matches a 32-nybble template with `*` wildcards.
pub fn matches_template(a: Address, template: &str) -> bool {
    let digits: Vec<char> = template.chars().filter(|&c| c != ':').collect();
    digits.len() == 32
        && digits.iter().enumerate().all(|(i, c)| *c == '*' || c.to_digit(16) == Some(a.nybble(i) as u32))
}

/// Free nybble count of a template.
pub fn template_free_nybbles(template: &str) -> usize {
    template.chars().filter(|&c| c == '*').count()
}

/// Draws `n` addresses (with replacement) uniformly from a template's volume.
pub fn sample_template(template: &str, n: usize, seed: u64) -> Vec<Address> {
    let digits: Vec<char> = template.chars().filter(|&c| c != ':').collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut a = Address::ZERO;
            for (i, c) in digits.iter().enumerate() {
                let v = match c.to_digit(16) {
                    Some(v) => v as u8,
                    None => rng.gen_range(0..16),
                };
                a = a.with_nybble(i, v);
            }
            a
        })
        .collect()
}
