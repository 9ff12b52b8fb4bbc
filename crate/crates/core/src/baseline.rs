//! Entropy space tree: a simplified density-tree target generator.
//!
//! Seeds are split top-down on the nybble position of lowest nonzero entropy.
//! Candidates come from leaf regions: a leaf's constant nybbles stay fixed,
//! while the nybbles its seeds disagree on, plus the nybble its parent split
//! on, are enumerated.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::addr::Address;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("cannot build a space tree from zero seeds")]
    EmptySeedSet,
}

pub const NYBBLES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTreeNode {
    /// `Some(v)` where every seed of the node has nybble value `v`.
    pub fixed_nybbles: [Option<u8>; NYBBLES],
    pub split: Option<usize>,
    pub children: BTreeMap<u8, SpaceTreeNode>,
    pub seed_count: usize,
    seeds: Vec<Address>,
}

impl SpaceTreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn seeds(&self) -> &[Address] {
        &self.seeds
    }

    pub fn leaves(&self) -> Vec<&SpaceTreeNode> {
        if self.is_leaf() {
            return vec![self];
        }
        self.children.values().flat_map(|c| c.leaves()).collect()
    }
}

/// Shannon entropy (bits) of one nybble position over a seed list.
pub fn nybble_entropy(seeds: &[Address], position: usize) -> f64 {
    let mut counts = [0usize; 16];
    for s in seeds {
        counts[s.nybble(position) as usize] += 1;
    }
    let n = seeds.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

fn build_node(seeds: Vec<Address>) -> SpaceTreeNode {
    let fixed_nybbles: [Option<u8>; NYBBLES] = std::array::from_fn(|i| {
        let v = seeds[0].nybble(i);
        seeds.iter().all(|s| s.nybble(i) == v).then_some(v)
    });
    let mut node = SpaceTreeNode { fixed_nybbles, split: None, children: BTreeMap::new(), seed_count: seeds.len(), seeds };
    if node.seeds.len() <= 1 {
        return node;
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 0..NYBBLES {
        if node.fixed_nybbles[i].is_some() {
            continue;
        }
        let h = nybble_entropy(&node.seeds, i);
        if best.is_none_or(|(_, b)| h < b - 1e-12) {
            best = Some((i, h));
        }
    }
    let Some((split, _)) = best else {
        return node;
    };
    let mut groups: BTreeMap<u8, Vec<Address>> = BTreeMap::new();
    for s in &node.seeds {
        groups.entry(s.nybble(split)).or_default().push(*s);
    }
    node.split = Some(split);
    node.children = groups.into_iter().map(|(v, g)| (v, build_node(g))).collect();
    node
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTree {
    pub root: SpaceTreeNode,
    seeds: HashSet<Address>,
}

pub fn build_tree(seeds: &[Address]) -> Result<SpaceTree, TreeError> {
    let mut v = seeds.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        return Err(TreeError::EmptySeedSet);
    }
    let set = v.iter().copied().collect();
    Ok(SpaceTree { root: build_node(v), seeds: set })
}

/// A generation region: fixed nybbles plus free positions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Region {
    base: u128,
    free: Vec<usize>,
}

impl Region {
    fn volume(&self) -> u128 {
        1u128 << (4 * self.free.len().min(31))
    }

    fn address(&self, k: u128) -> Address {
        let mut v = self.base;
        for (j, &n) in self.free.iter().enumerate() {
            let digit = (k >> (4 * (self.free.len() - 1 - j))) & 0xf;
            v |= digit << (124 - 4 * n);
        }
        Address(v)
    }
}

fn collect_regions(node: &SpaceTreeNode, parent_split: Option<usize>, out: &mut BTreeMap<Region, usize>) {
    if !node.is_leaf() {
        for c in node.children.values() {
            collect_regions(c, node.split, out);
        }
        return;
    }
    let mut base = 0u128;
    let mut free = Vec::new();
    for (i, f) in node.fixed_nybbles.iter().enumerate() {
        match f {
            Some(v) if Some(i) != parent_split => base |= (*v as u128) << (124 - 4 * i),
            _ => free.push(i),
        }
    }
    *out.entry(Region { base, free }).or_insert(0) += node.seed_count;
}

/// Knobs for [`SpaceTree::generate_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerateOptions {
    /// Once every region is exhausted, free one more nybble (the fixed one
    /// just left of a region's leftmost free nybble, never inside the first
    /// /32) and continue, up to this many times.
    pub expand_levels: usize,
}

/// Nybbles 0..8 hold the /32 and are never freed by expansion.
const MIN_EXPAND_NYBBLE: usize = 8;

impl SpaceTree {
    pub fn seeds(&self) -> &HashSet<Address> {
        &self.seeds
    }

    /// Up to `budget` candidates, never a seed.
    pub fn generate(&self, budget: usize) -> Vec<Address> {
        self.generate_with(budget, &HashSet::new(), GenerateOptions::default())
    }

    /// Budget goes to regions in proportion to seed density (seeds per
    /// address of region volume); each region enumerates its free nybbles in
    /// ascending order. Budget a region cannot use flows to the next.
    pub fn generate_with(&self, budget: usize, exclude: &HashSet<Address>, opts: GenerateOptions) -> Vec<Address> {
        let mut out = Vec::with_capacity(budget.min(1 << 20));
        if budget == 0 {
            return out;
        }
        let mut regions = BTreeMap::new();
        collect_regions(&self.root, None, &mut regions);
        let mut emitted = HashSet::new();
        for level in 0..=opts.expand_levels {
            if level > 0 {
                let mut grown = BTreeMap::new();
                for (r, n) in regions {
                    let Some(&lead) = r.free.first() else { continue };
                    if lead <= MIN_EXPAND_NYBBLE {
                        continue;
                    }
                    let pos = lead - 1;
                    let mut free = r.free.clone();
                    free.insert(0, pos);
                    let base = r.base & !(0xfu128 << (124 - 4 * pos));
                    *grown.entry(Region { base, free }).or_insert(0) += n;
                }
                regions = grown;
            }
            if regions.is_empty() {
                break;
            }
            self.fill(&regions, budget, exclude, &mut emitted, &mut out);
            if out.len() >= budget {
                break;
            }
        }
        out
    }

    fn fill(
        &self,
        regions: &BTreeMap<Region, usize>,
        budget: usize,
        exclude: &HashSet<Address>,
        emitted: &mut HashSet<Address>,
        out: &mut Vec<Address>,
    ) {
        let mut ranked: Vec<(&Region, f64)> = regions.iter().map(|(r, &n)| (r, n as f64 / r.volume() as f64)).collect();
        // densest first; ties keep region order
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        let mut remaining_density: f64 = ranked.iter().map(|(_, d)| d).sum();
        for (region, density) in ranked {
            let left = budget - out.len();
            if left == 0 {
                break;
            }
            // shares are recomputed over what is left, so unused budget flows on
            let quota = ((left as f64 * density / remaining_density).ceil() as usize).min(left);
            remaining_density -= density;
            let mut taken = 0usize;
            let mut k = 0u128;
            while taken < quota && k < region.volume() {
                let a = region.address(k);
                k += 1;
                if self.seeds.contains(&a) || exclude.contains(&a) || !emitted.insert(a) {
                    continue;
                }
                out.push(a);
                taken += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    #[test]
    fn identical_seeds_make_one_leaf() {
        let t = build_tree(&[a("2001:db8::1"), a("2001:db8::1")]).unwrap();
        assert!(t.root.is_leaf());
        assert_eq!(t.root.seed_count, 1);
        assert!(matches!(build_tree(&[]), Err(TreeError::EmptySeedSet)));
    }

    #[test]
    fn single_varying_nybble_splits_there() {
        let seeds = [a("2001:db8::1"), a("2001:db8::3"), a("2001:db8::5")];
        let t = build_tree(&seeds).unwrap();
        assert_eq!(t.root.split, Some(31));
        assert_eq!(t.root.children.len(), 3);
        // one free nybble, 16 values, 3 of them seeds
        let c = t.generate(100);
        assert_eq!(c.len(), 13);
        assert!(c.iter().all(|x| !seeds.contains(x)));
    }

    #[test]
    fn splits_on_lowest_entropy_first() {
        // nybble 31 takes {0,1,2,3} (2 bits), nybble 30 takes {0,0,1,1} (1 bit)
        let seeds = [a("::00"), a("::01"), a("::12"), a("::13")];
        assert_eq!(nybble_entropy(&seeds, 30), 1.0);
        assert_eq!(nybble_entropy(&seeds, 31), 2.0);
        let t = build_tree(&seeds).unwrap();
        assert_eq!(t.root.split, Some(30));
        for child in t.root.children.values() {
            assert_eq!(child.split, Some(31));
        }
    }

    #[test]
    fn generation_contract() {
        let seeds: Vec<Address> = (0..6u128).map(|i| Address(a("2001:db8:1::").0 | (i * 0x11))).collect();
        let t = build_tree(&seeds).unwrap();
        assert!(t.generate(0).is_empty());
        let c = t.generate(50);
        assert!(c.len() <= 50);
        assert!(c.iter().all(|x| !t.seeds().contains(x)));
        assert_eq!(c, t.generate(50));
        let uniq: HashSet<_> = c.iter().collect();
        assert_eq!(uniq.len(), c.len());
        // leaf-fixed nybbles are kept
        assert!(c.iter().all(|x| x.0 >> 64 == a("2001:db8:1::").0 >> 64));
    }

    #[test]
    fn expansion_frees_the_next_nybble_left() {
        let seeds = [a("2001:db8::1"), a("2001:db8::3"), a("2001:db8::5")];
        let t = build_tree(&seeds).unwrap();
        let opts = GenerateOptions { expand_levels: 1 };
        let c = t.generate_with(100, &HashSet::new(), opts);
        assert_eq!(c.len(), 100);
        assert!(c.iter().all(|x| x.0 & !0xff == a("2001:db8::").0));
        let excl: HashSet<Address> = c[..10].iter().copied().collect();
        let d = t.generate_with(100, &excl, opts);
        assert!(d.iter().all(|x| !excl.contains(x)));
    }
}
