//! Cluster, train one pixel model per subclass, then alternate
//! generate → probe → dealias → fine-tune until the budget is spent.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use hitpix_core::baseline::{build_tree, GenerateOptions};
use hitpix_core::image::{stitch_pairs, AddressImage};
use hitpix_core::metrics::{conversion_gain, cover_num, hit_rate, EvalReport, RoundStat};
use hitpix_core::oracle::{detect_alias, probe, OracleError, ProbeLedger, Prober};
use hitpix_core::{Address, CandidateBatch, DedupLedger, Prefix, PrefixTable, SeedSet};
use hitpix_nn::pixelgen::{FineTuneOptions, PixelError, PixelModel, TrainOptions, TrainSet};
use hitpix_nn::vaecluster::{kmeans, train_vae, VaeConfig, VaeModel};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{derive, stream, RunConfig};
use crate::PipelineError;

/// Seeds split into subclasses.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub k: usize,
    /// Seeds of each subclass, ascending.
    pub members: Vec<Vec<Address>>,
    pub vae_elbo: Vec<f64>,
    pub vae: Option<VaeModel>,
}

impl Plan {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// `address,subclass_id` rows in address order.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(Address, usize)> =
            self.members.iter().enumerate().flat_map(|(c, m)| m.iter().map(move |&a| (a, c))).collect();
        rows.sort_unstable();
        let mut s = String::from("address,subclass_id\n");
        for (a, c) in rows {
            s.push_str(&format!("{a},{c}\n"));
        }
        s
    }
}

/// Encodes the seeds, trains the VAE and clusters the latent means.
pub fn cluster_seeds(seeds: &SeedSet, cfg: &RunConfig) -> Result<Plan, PipelineError> {
    let addrs = seeds.addresses().to_vec();
    if addrs.is_empty() {
        return Err(PipelineError::InvalidConfig("empty seed set".into()));
    }
    let mut k = cfg.k;
    if addrs.len() < k {
        warn!("only {} seeds; lowering k from {} to {}", addrs.len(), k, addrs.len());
        k = addrs.len();
    }
    if k == 1 {
        return Ok(Plan { k, members: vec![addrs], vae_elbo: Vec::new(), vae: None });
    }
    let images: Vec<AddressImage> = addrs.iter().map(|&a| AddressImage::encode(a)).collect();
    let vcfg = VaeConfig { latent_dim: cfg.latent_dim, epochs: cfg.vae_epochs, ..VaeConfig::default() };
    let (vae, elbo) = train_vae(&images, &vcfg, derive(cfg.seed, stream::VAE, 0))?;
    let latents = vae.latents(&images).map_err(hitpix_nn::vaecluster::ClusterError::from)?;
    let clustering = kmeans(&latents, k, derive(cfg.seed, stream::KMEANS, 0))?;
    let members = (0..k).map(|c| clustering.members(c).into_iter().map(|i| addrs[i]).collect()).collect();
    Ok(Plan { k, members, vae_elbo: elbo, vae: Some(vae) })
}

/// One subclass's generator and the corpus it was trained on.
#[derive(Debug, Clone)]
pub struct Subclass {
    pub id: usize,
    pub seeds: Vec<Address>,
    pub corpus: TrainSet,
    pub model: PixelModel,
    pub losses: Vec<f64>,
}

pub fn subclass_corpus(seeds: &[Address], cfg: &RunConfig) -> Result<TrainSet, PipelineError> {
    let images: Vec<AddressImage> = seeds.iter().map(|&a| AddressImage::encode(a)).collect();
    Ok(if cfg.stitch {
        TrainSet::stitched(&stitch_pairs(&images, cfg.stitch_fanout)?)
    } else {
        TrainSet::single(&images)
    })
}

pub fn train_subclasses(plan: &Plan, cfg: &RunConfig) -> Result<Vec<Subclass>, PipelineError> {
    plan.members
        .iter()
        .enumerate()
        .map(|(id, seeds)| {
            let corpus = subclass_corpus(seeds, cfg)?;
            let mut model = PixelModel::new(cfg.pixel, id, derive(cfg.seed, stream::INIT, id as u64));
            let epochs = if cfg.stitch || !cfg.step_parity { cfg.train_epochs } else { cfg.train_epochs * cfg.stitch_fanout };
            let opts = TrainOptions { epochs, batch: cfg.batch, seed: derive(cfg.seed, stream::TRAIN, id as u64) };
            let losses = model.train(&corpus, &opts)?;
            info!(
                "subclass {id}: {} seeds, {} training images, loss {:.4} -> {:.4}",
                seeds.len(),
                corpus.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN)
            );
            Ok(Subclass { id, seeds: seeds.clone(), corpus, model, losses })
        })
        .collect()
}

/// Splits `total` over `weights` by largest remainder; ties go to the lower index.
pub fn proportional(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut rest: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| ((total * w) % sum, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<usize>();
    for &(_, i) in rest.iter().take(short) {
        out[i] += 1;
    }
    out
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// Discovered actives outside aliased prefixes, ascending.
    pub actives: Vec<Address>,
    /// Discovered actives under each aliased prefix, ascending.
    pub aliased: BTreeMap<Prefix, Vec<Address>>,
    pub batches: Vec<CandidateBatch>,
    /// `(subclass, round)` for every subclass disabled by a stalled generator.
    pub disabled: Vec<(usize, usize)>,
    pub ledger: ProbeLedger,
    pub subclasses: Vec<Subclass>,
}

impl RunOutcome {
    pub fn candidates(&self) -> impl Iterator<Item = &Address> {
        self.batches.iter().flat_map(|b| b.addresses.iter())
    }
}

/// Probes `batch`, runs the alias check on every prefix that produced a new
/// active, and returns the actives split into plain and aliased.
pub fn probe_dealiased(
    prober: &dyn Prober,
    table: &PrefixTable,
    batch: &[Address],
    ledger: &mut ProbeLedger,
    cfg: &RunConfig,
) -> Result<(Vec<Address>, Vec<(Prefix, Address)>), PipelineError> {
    let verdicts = match probe(prober, batch, ledger) {
        Ok(v) => v,
        Err(OracleError::BudgetExhausted { partial, .. }) => partial,
        Err(e) => return Err(e.into()),
    };
    let active: Vec<Address> = verdicts.iter().filter(|v| v.active).map(|v| v.address).collect();
    let prefixes: BTreeSet<Prefix> = active.iter().filter_map(|&a| table.longest_match(a)).collect();
    for p in prefixes {
        let seed = derive(cfg.seed, stream::ALIAS, p.base().0 as u64 ^ p.len() as u64);
        detect_alias(prober, p, cfg.alias_probes, cfg.alias_check_len, seed, ledger)?;
    }
    let (mut plain, mut aliased) = (Vec::new(), Vec::new());
    for a in active {
        match table.longest_match(a).filter(|p| ledger.aliased_prefixes().contains(p)) {
            Some(p) => aliased.push((p, a)),
            None => plain.push(a),
        }
    }
    Ok((plain, aliased))
}

/// Samples `want` candidates from subclass `s`, disabling it if it stalls.
fn draw(
    sub: &Subclass,
    want: usize,
    seed: u64,
    round: usize,
    dedup: &DedupLedger,
) -> Result<(Vec<Address>, bool), PipelineError> {
    if want == 0 {
        return Ok((Vec::new(), false));
    }
    match sub.model.sample(want, seed, round, dedup) {
        Ok(b) => Ok((b.addresses, false)),
        Err(PixelError::GenerationStalled { partial, emitted, requested, .. }) => {
            warn!("subclass {} stalled in round {round} ({emitted}/{requested}); disabling it", sub.id);
            Ok((partial.addresses, true))
        }
        Err(e) => Err(e.into()),
    }
}

/// The generate/probe/feedback loop over already trained subclasses.
pub fn run_rounds(
    seeds: &SeedSet,
    table: &PrefixTable,
    prober: &dyn Prober,
    mut subs: Vec<Subclass>,
    cfg: &RunConfig,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let seed_set: HashSet<Address> = seeds.addresses().iter().copied().collect();
    let dedup = DedupLedger::with_known(seeds.addresses().iter().copied());
    let mut ledger = ProbeLedger::with_cap(cfg.budget);
    let mut live = vec![true; subs.len()];
    let mut disabled = Vec::new();
    let mut batches = Vec::new();
    let mut candidates: HashSet<Address> = HashSet::new();
    let mut actives: BTreeSet<Address> = BTreeSet::new();
    let mut aliased: BTreeMap<Prefix, Vec<Address>> = BTreeMap::new();
    let mut rounds = Vec::new();
    let cadence = cfg.cadence();
    let mut round = 0usize;

    while ledger.budget_spent() < cfg.budget && live.iter().any(|&l| l) {
        let quota = cadence.min(cfg.budget - ledger.budget_spent());
        let weights: Vec<usize> = subs.iter().zip(&live).map(|(s, &l)| if l { s.seeds.len() } else { 0 }).collect();
        let mut wants = proportional(quota, &weights);
        let mut got: Vec<Vec<Address>> = vec![Vec::new(); subs.len()];
        let mut attempt = 0u64;
        loop {
            let mut deficit = 0;
            for (s, sub) in subs.iter().enumerate() {
                if wants[s] == 0 {
                    continue;
                }
                let seed = derive(cfg.seed, stream::SAMPLE, ((round as u64) << 32) | (attempt << 16) | s as u64);
                let (addrs, stalled) = draw(sub, wants[s], seed, round, &dedup)?;
                deficit += wants[s] - addrs.len();
                got[s].extend(addrs);
                if stalled {
                    live[s] = false;
                    disabled.push((s, round));
                }
            }
            let alive: Vec<usize> = (0..subs.len()).filter(|&s| live[s]).collect();
            if deficit == 0 || alive.is_empty() {
                break;
            }
            // round-robin the shortfall over the survivors
            wants = vec![0; subs.len()];
            for i in 0..deficit {
                wants[alive[i % alive.len()]] += 1;
            }
            attempt += 1;
        }

        let mut emitted = Vec::new();
        for (s, addrs) in got.into_iter().enumerate() {
            if addrs.is_empty() {
                continue;
            }
            emitted.extend(addrs.iter().copied());
            batches.push(CandidateBatch { addresses: addrs, origin: s, generation_round: round });
        }
        if emitted.is_empty() {
            break;
        }
        let (plain, hidden) = probe_dealiased(prober, table, &emitted, &mut ledger, cfg)?;
        candidates.extend(emitted.iter().copied());
        for (p, a) in hidden {
            aliased.entry(p).or_default().push(a);
        }
        // addresses can land in a prefix only later found to be aliased
        actives.extend(plain.iter().copied());
        let aliased_now = ledger.aliased_prefixes().clone();
        let moved: Vec<Address> = actives
            .iter()
            .copied()
            .filter(|&a| table.longest_match(a).is_some_and(|p| aliased_now.contains(&p)))
            .collect();
        for a in moved {
            actives.remove(&a);
            aliased.entry(table.longest_match(a).expect("matched above")).or_default().push(a);
        }

        let hr = hit_rate(&candidates, &actives.iter().copied().collect(), &seed_set).unwrap_or(0.0);
        rounds.push(RoundStat {
            round,
            budget_spent: ledger.budget_spent(),
            candidates: emitted.len(),
            actives_found: actives.len(),
            hit_rate: hr,
            cover_num: cover_num(actives.iter(), table),
        });
        info!(
            "round {round}: {} candidates, {} new actives, cumulative hit rate {:.4}",
            emitted.len(),
            plain.len(),
            hr
        );

        if cfg.feedback && ledger.budget_spent() < cfg.budget {
            let origin_of: BTreeMap<Address, usize> = batches
                .iter()
                .filter(|b| b.generation_round == round)
                .flat_map(|b| b.addresses.iter().map(move |&a| (a, b.origin)))
                .collect();
            let plain: Vec<Address> = plain.into_iter().filter(|a| actives.contains(a)).collect();
            for sub in subs.iter_mut() {
                if !live[sub.id] {
                    continue;
                }
                let mine: Vec<Address> = if cfg.cross_route {
                    plain.clone()
                } else {
                    plain.iter().copied().filter(|a| origin_of.get(a) == Some(&sub.id)).collect()
                };
                if mine.is_empty() {
                    continue;
                }
                let opts = FineTuneOptions {
                    epochs: cfg.fine_tune_epochs,
                    batch: cfg.batch,
                    seed: derive(cfg.seed, stream::FINE_TUNE, ((round as u64) << 16) | sub.id as u64),
                    replay_ratio: cfg.replay_ratio,
                    stitch: cfg.stitch,
                    fanout: cfg.stitch_fanout,
                    max_examples: cfg.feedback_cap,
                };
                sub.model.fine_tune(&mine, &sub.corpus, &opts)?;
            }
        }
        round += 1;
    }

    for v in aliased.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    let active_set: HashSet<Address> = actives.iter().copied().collect();
    let report = EvalReport {
        hit_rate: if candidates.is_empty() { 0.0 } else { hit_rate(&candidates, &active_set, &seed_set)? },
        cover_num: cover_num(actives.iter(), table),
        budget: cfg.budget,
        budget_spent: ledger.budget_spent(),
        actives_found: actives.len(),
        rounds,
    };
    Ok(RunOutcome {
        report,
        actives: actives.into_iter().collect(),
        aliased,
        batches,
        disabled,
        ledger,
        subclasses: subs,
    })
}

/// The full pipeline from seeds to report.
pub fn run(seeds: &SeedSet, table: &PrefixTable, prober: &dyn Prober, cfg: &RunConfig) -> Result<(Plan, RunOutcome), PipelineError> {
    cfg.validate()?;
    let plan = cluster_seeds(seeds, cfg)?;
    info!("subclass sizes {:?}", plan.sizes());
    let subs = train_subclasses(&plan, cfg)?;
    let outcome = run_rounds(seeds, table, prober, subs, cfg)?;
    Ok((plan, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub p_pct: f64,
    pub budget: usize,
    pub stage1_budget: usize,
    pub stage2_budget: usize,
    pub hr_pre2: f64,
    pub hr_tau2: f64,
    pub hr_tau1: f64,
    pub conversion_gain: f64,
    pub stage1: EvalReport,
}

/// Space-tree generation over `seeds`, probed and dealiased; returns the
/// candidates and plain actives.
pub fn run_baseline(
    seeds: &[Address],
    exclude: &HashSet<Address>,
    budget: usize,
    table: &PrefixTable,
    prober: &dyn Prober,
    cfg: &RunConfig,
) -> Result<(Vec<Address>, Vec<Address>), PipelineError> {
    let tree = build_tree(seeds)?;
    let cands = tree.generate_with(budget, exclude, GenerateOptions { expand_levels: cfg.baseline_expand });
    let mut ledger = ProbeLedger::with_cap(budget);
    let (plain, _) = probe_dealiased(prober, table, &cands, &mut ledger, cfg)?;
    Ok((cands, plain))
}

fn rate(cands: &[Address], actives: &[Address], seeds: &HashSet<Address>) -> Result<f64, PipelineError> {
    let c: HashSet<Address> = cands.iter().copied().collect();
    let t: HashSet<Address> = actives.iter().copied().collect();
    Ok(hit_rate(&c, &t, seeds)?)
}

/// Stage 1 spends `p%` of the budget on the pipeline; stage 2 hands seeds
/// plus stage-1 actives to the space-tree baseline for the rest. The
/// baseline alone on the full budget gives the reference hit rate.
pub fn run_two_stage(
    seeds: &SeedSet,
    table: &PrefixTable,
    prober: &dyn Prober,
    cfg: &RunConfig,
) -> Result<(TwoStageReport, RunOutcome), PipelineError> {
    cfg.validate()?;
    let p = cfg.p_pct.ok_or_else(|| PipelineError::InvalidConfig("two-stage mode needs p_pct".into()))?;
    let stage1_budget = (cfg.budget as f64 * p / 100.0).floor() as usize;
    if stage1_budget == 0 || stage1_budget >= cfg.budget {
        return Err(PipelineError::InvalidConfig(format!(
            "p_pct {p} leaves stage budgets {stage1_budget} and {}",
            cfg.budget.saturating_sub(stage1_budget)
        )));
    }
    let stage2_budget = cfg.budget - stage1_budget;
    let seed_set: HashSet<Address> = seeds.addresses().iter().copied().collect();

    let c1 = RunConfig { budget: stage1_budget, ..cfg.clone() };
    let (_, outcome) = run(seeds, table, prober, &c1)?;
    let hr_pre2 = outcome.report.hit_rate;

    let mut enriched: Vec<Address> = seeds.addresses().to_vec();
    enriched.extend(outcome.actives.iter().copied());
    let enriched_set: HashSet<Address> = enriched.iter().copied().collect();
    let probed: HashSet<Address> = outcome.candidates().copied().collect();
    let (c2, t2) = run_baseline(&enriched, &probed, stage2_budget, table, prober, cfg)?;
    let hr_tau2 = if c2.is_empty() { 0.0 } else { rate(&c2, &t2, &enriched_set)? };

    let (c_tau, t_tau) = run_baseline(seeds.addresses(), &HashSet::new(), cfg.budget, table, prober, cfg)?;
    let hr_tau1 = if c_tau.is_empty() { 0.0 } else { rate(&c_tau, &t_tau, &seed_set)? };

    let cg = conversion_gain(p, hr_pre2, hr_tau2, hr_tau1)?;
    let report = TwoStageReport {
        p_pct: p,
        budget: cfg.budget,
        stage1_budget,
        stage2_budget,
        hr_pre2,
        hr_tau2,
        hr_tau1,
        conversion_gain: cg,
        stage1: outcome.report.clone(),
    };
    Ok((report, outcome))
}

/// The four stitch/feedback combinations.
pub const ABLATIONS: [(&str, bool, bool); 4] =
    [("full", true, true), ("no-stitch", false, true), ("no-feedback", true, false), ("neither", false, false)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub hit_rate: f64,
    pub actives_found: usize,
    pub budget_spent: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,hitrate\n");
    for r in rows {
        s.push_str(&format!("{},{:.6}\n", r.config, r.hit_rate));
    }
    s
}

/// Runs all four configurations. Clustering is shared, and each corpus
/// style is trained once; every run is otherwise what `run` would do.
pub fn run_ablation(
    seeds: &SeedSet,
    table: &PrefixTable,
    prober: &dyn Prober,
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>, PipelineError> {
    cfg.validate()?;
    let plan = cluster_seeds(seeds, cfg)?;
    let mut trained: BTreeMap<bool, Vec<Subclass>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (name, stitch, feedback) in ABLATIONS {
        let c = RunConfig { stitch, feedback, ..cfg.clone() };
        if !trained.contains_key(&stitch) {
            trained.insert(stitch, train_subclasses(&plan, &c)?);
        }
        let outcome = run_rounds(seeds, table, prober, trained[&stitch].clone(), &c)?;
        info!("{name}: hit rate {:.4}", outcome.report.hit_rate);
        rows.push(AblationRow {
            config: name.to_string(),
            hit_rate: outcome.report.hit_rate,
            actives_found: outcome.report.actives_found,
            budget_spent: outcome.report.budget_spent,
        });
    }
    Ok(rows)
}
