//! Candidate batches and the run-wide dedup ledger.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::addr::{format_address, Address};

/// Addresses one generator emitted in one round, in emission order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateBatch {
    pub addresses: Vec<Address>,
    pub origin: usize,
    pub generation_round: usize,
}

#[derive(Serialize)]
struct Sidecar {
    subclass: usize,
    round: usize,
    seed: u64,
    count: usize,
}

impl CandidateBatch {
    pub fn new(origin: usize, generation_round: usize) -> Self {
        CandidateBatch { addresses: Vec::new(), origin, generation_round }
    }

    pub fn len(&self) -> usize {
        self.addresses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.addresses.is_empty()
    }

    pub fn to_hitlist(&self) -> String {
        let mut s = String::with_capacity(self.addresses.len() * 40);
        for a in &self.addresses {
            s.push_str(&format_address(*a));
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.txt` and the `<stem>.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, seed: u64) -> std::io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_hitlist())?;
        let meta = Sidecar { subclass: self.origin, round: self.generation_round, seed, count: self.len() };
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta).expect("sidecar"))
    }
}

/// Every address a run has seen or emitted. Safe to share across threads;
/// `claim` is an atomic test-and-insert.
#[derive(Debug, Default)]
pub struct DedupLedger {
    seen: Mutex<HashSet<Address>>,
}

impl DedupLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_known<I: IntoIterator<Item = Address>>(known: I) -> Self {
        DedupLedger { seen: Mutex::new(known.into_iter().collect()) }
    }

    /// True when `a` was new and is now recorded.
    pub fn claim(&self, a: Address) -> bool {
        self.seen.lock().expect("ledger lock").insert(a)
    }

    pub fn contains(&self, a: Address) -> bool {
        self.seen.lock().expect("ledger lock").contains(&a)
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("ledger lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
