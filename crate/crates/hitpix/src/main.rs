use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hitpix::config::RunConfig;
use hitpix::pipeline::{ablation_csv, cluster_seeds, run_ablation, run_two_stage, subclass_corpus};
use hitpix::rundir::{export_from_run, write_run};
use hitpix_core::addr::{few_seed_census, load_hitlist, read_address_list};
use hitpix_core::image::set_entropy;
use hitpix_core::metrics::{cover_num, hit_rate};
use hitpix_core::oracle::{build_universe, ExternalScanner, ProbeLedger, Prober, ScannerConfig, SyntheticUniverse, UniverseSpec};
use hitpix_core::presets;
use hitpix_core::{parse_address, AddressImage, DedupLedger, EntropyMode, PrefixTable, SeedSet};
use hitpix_nn::pixelgen::{PixelConfig, PixelError, PixelModel, TrainOptions};
use hitpix_nn::tensor::Checkpoint;

#[derive(Parser)]
#[command(name = "hitpix", version, about = "IPv6 target generation with per-subclass pixel models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// RNG seed for every random choice (training, sampling, probing order). Commands
    /// that draw nothing random accept it and produce the same output regardless.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the 8×16 bit image of one address.
    Encode {
        /// Address to encode, any RFC 4291 text form.
        #[arg(long)]
        addr: String,
        /// pgm: P2 grayscale, set bits 255; csv: 8 rows of 16 comma-separated bits; bits: 8 lines of 16 binary digits.
        #[arg(long, value_enum, default_value_t = ImageFormat::Pgm)]
        format: ImageFormat,
        /// Also write encode.<format> here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-bit entropy heatmap (PGM, darker = lower) and CSV of a hitlist; prints CE.
    Entropy {
        /// One address per line, `#` comments allowed.
        #[arg(long)]
        hitlist: PathBuf,
        /// standard: binary entropy in bits per pixel; paper-literal: the same scaled by 1/4.
        #[arg(long, default_value = "standard", value_parser = parse_mode)]
        mode: EntropyMode,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeds per prefix and the few-seed share; writes census.csv (prefix,count).
    Census {
        /// Address list, one per line, `#` comments allowed.
        #[arg(long)]
        hitlist: PathBuf,
        /// One `addr/len` per line.
        #[arg(long)]
        prefixes: PathBuf,
        /// Prefixes with fewer seeds than this count as few-seed.
        #[arg(long, default_value_t = 10)]
        threshold: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// VAE + K-means subclasses; writes clustering.csv (address,subclass_id), vae.json, elbo.csv.
    Cluster {
        /// Address list, one per line, `#` comments allowed.
        #[arg(long)]
        hitlist: PathBuf,
        /// Number of subclasses.
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// VAE training epochs.
        #[arg(long, default_value_t = 200)]
        vae_epochs: usize,
        /// VAE latent width.
        #[arg(long, default_value_t = 16)]
        latent_dim: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one pixel model on a hitlist; writes model.json and losses.csv.
    Train {
        /// Address list, one per line, `#` comments allowed.
        #[arg(long)]
        hitlist: PathBuf,
        /// Training epochs over the corpus.
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        /// Images per optimizer step.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Partners per image when stitching.
        #[arg(long, default_value_t = 5)]
        fanout: usize,
        /// Train on single 8×16 images instead of stitched pairs.
        #[arg(long)]
        no_stitch: bool,
        /// Channels per gated layer.
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        /// Gated blocks after the first layer.
        #[arg(long, default_value_t = 5)]
        blocks: usize,
        /// Subclass id recorded in the checkpoint and candidate sidecars.
        #[arg(long, default_value_t = 0)]
        subclass: usize,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample novel candidates from a model; writes candidates.txt and candidates.json.
    Generate {
        /// Checkpoint written by `train` or a run's models/subclass_N.json.
        #[arg(long)]
        model: PathBuf,
        /// Novel candidates to emit.
        #[arg(long)]
        count: usize,
        /// Addresses that must not be emitted (e.g. the seeds).
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Round number recorded in the sidecar.
        #[arg(long, default_value_t = 0)]
        round: usize,
        /// Logit temperature; below 1 sharpens, above 1 flattens.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize a synthetic universe: universe.json, seeds.txt, prefixes.txt, ground_truth.csv.
    Universe {
        #[command(flatten)]
        source: UniverseArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline run; writes a run directory with a manifest.
    Run {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pipeline on p% of the budget, space-tree baseline on the rest; writes two_stage.json.
    TwoStage {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Stage-1 share of the budget, strictly between 0 and 100.
        #[arg(long, default_value_t = 25.0)]
        p: f64,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// The four stitch/feedback configurations; writes ablation.csv (config,hitrate).
    Ablate {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe a candidate list against a synthetic universe; writes report.json and verdicts.csv.
    Eval {
        /// Candidate list, one address per line.
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        source: UniverseArgs,
        /// Seeds to discount from hits (defaults to the universe's seeds).
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the dataset export of a run directory: dataset.txt, prefix_counts.csv, export_summary.json.
    Export {
        /// Run directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Addresses kept per aliased prefix (defaults to the run's setting).
        #[arg(long)]
        retain: Option<usize>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ImageFormat {
    Pgm,
    Csv,
    Bits,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Standard,
    Small,
}

#[derive(Args)]
struct UniverseArgs {
    /// Universe spec (JSON: universe_seed, seeds_per_prefix, bias, prefixes[{prefix, scheme, seeds, bias}]).
    #[arg(long, conflicts_with = "preset")]
    universe: Option<PathBuf>,
    /// Built-in universe.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override the spec's universe seed.
    #[arg(long)]
    universe_seed: Option<u64>,
}

#[derive(Args)]
struct TargetArgs {
    #[command(flatten)]
    source: UniverseArgs,
    /// Seeds for an external-scanner run (requires --prefixes and --scanner-config).
    #[arg(long, requires_all = ["prefixes", "scanner_config"])]
    hitlist: Option<PathBuf>,
    /// Prefix table for --hitlist, one `addr/len` per line.
    #[arg(long)]
    prefixes: Option<PathBuf>,
    /// ScannerConfig JSON; the scanner binary may also come from $HITPIX_SCANNER.
    #[arg(long)]
    scanner_config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Unique candidates to probe.
    #[arg(long)]
    budget: Option<usize>,
    /// Number of subclasses.
    #[arg(long)]
    k: Option<usize>,
    /// Train on single 8×16 images instead of stitched pairs.
    #[arg(long)]
    no_stitch: bool,
    /// Skip fine-tuning on discovered actives between rounds.
    #[arg(long)]
    no_feedback: bool,
}

fn parse_mode(s: &str) -> Result<EntropyMode, String> {
    s.parse()
}

impl UniverseArgs {
    fn spec(&self) -> Result<UniverseSpec> {
        let mut spec = match (&self.universe, self.preset) {
            (Some(path), _) => UniverseSpec::from_json(&read(path)?)?,
            (None, Some(Preset::Standard)) => presets::standard_few_seed(),
            (None, Some(Preset::Small)) => presets::small_few_seed(),
            (None, None) => bail!("give --universe <spec.json> or --preset"),
        };
        if let Some(s) = self.universe_seed {
            spec.universe_seed = s;
        }
        Ok(spec)
    }

    fn build(&self) -> Result<(UniverseSpec, SyntheticUniverse, SeedSet)> {
        let spec = self.spec()?;
        let (u, seeds) = build_universe(&spec, spec.universe_seed)?;
        Ok((spec, u, seeds))
    }
}

struct Target {
    seeds: SeedSet,
    table: PrefixTable,
    prober: Box<dyn Prober>,
}

impl TargetArgs {
    fn resolve(&self) -> Result<Target> {
        if let Some(hitlist) = &self.hitlist {
            let prefixes = self.prefixes.as_ref().expect("clap requires --prefixes");
            let (seeds, report) = load_hitlist(hitlist, prefixes)?;
            if !report.errors.is_empty() {
                log::warn!("{} unparsable hitlist lines skipped", report.errors.len());
            }
            let cfg_path = self.scanner_config.as_ref().expect("clap requires --scanner-config");
            let cfg: ScannerConfig = serde_json::from_str(&read(cfg_path)?).context("scanner config")?;
            let table = PrefixTable::load(prefixes)?;
            return Ok(Target { seeds, table, prober: Box::new(ExternalScanner::new(cfg)) });
        }
        let (_, u, seeds) = self.source.build()?;
        Ok(Target { seeds, table: u.table().clone(), prober: Box::new(u) })
    }
}

impl RunArgs {
    fn config(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json(&read(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        cfg.stitch &= !self.no_stitch;
        cfg.feedback &= !self.no_feedback;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn plain_seeds(path: &Path) -> Result<SeedSet> {
    let addrs = read_address_list(path)?;
    if addrs.is_empty() {
        bail!("{} holds no addresses", path.display());
    }
    Ok(SeedSet::from_addresses(addrs, &PrefixTable::new()))
}

fn lines<'a>(addrs: impl IntoIterator<Item = &'a hitpix_core::Address>) -> String {
    addrs.into_iter().map(|a| format!("{a}\n")).collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Encode { addr, format, out } => {
            let img = AddressImage::encode(parse_address(&addr)?);
            let (text, ext) = match format {
                ImageFormat::Pgm => (img.to_pgm(), "pgm"),
                ImageFormat::Csv => (img.to_csv(), "csv"),
                ImageFormat::Bits => (img.rows().iter().map(|r| format!("{r:016b}\n")).collect(), "txt"),
            };
            print!("{text}");
            if let Some(dir) = out {
                write(&dir, &format!("encode.{ext}"), text)?;
            }
        }
        Command::Entropy { hitlist, mode, out } => {
            let addrs = read_address_list(&hitlist)?;
            let e = set_entropy(&addrs, mode)?;
            write(&out, "entropy.pgm", e.to_pgm())?;
            write(&out, "entropy.csv", e.to_csv())?;
            println!("CE {:.6}", e.ce);
        }
        Command::Census { hitlist, prefixes, threshold, out } => {
            let (seeds, _) = load_hitlist(&hitlist, &prefixes)?;
            let c = few_seed_census(&seeds, threshold)?;
            write(&out, "census.csv", c.to_csv())?;
            println!("{} prefixes, {} with fewer than {threshold} seeds ({:.2}%)", c.total_prefixes, c.few_seed, 100.0 * c.ratio);
        }
        Command::Cluster { hitlist, k, vae_epochs, latent_dim, out } => {
            let seeds = plain_seeds(&hitlist)?;
            let cfg = RunConfig { k, vae_epochs, latent_dim, seed, ..RunConfig::default() };
            let plan = cluster_seeds(&seeds, &cfg)?;
            write(&out, "clustering.csv", plan.to_csv())?;
            if let Some(vae) = &plan.vae {
                write(&out, "vae.json", vae.to_checkpoint().to_json())?;
            }
            let elbo: String = plan.vae_elbo.iter().enumerate().map(|(i, v)| format!("{},{v:.6}\n", i + 1)).collect();
            write(&out, "elbo.csv", format!("epoch,elbo\n{elbo}"))?;
            println!("subclass sizes {:?}", plan.sizes());
        }
        Command::Train { hitlist, epochs, batch, fanout, no_stitch, hidden, blocks, subclass, out } => {
            let seeds = plain_seeds(&hitlist)?;
            let cfg = RunConfig { stitch: !no_stitch, stitch_fanout: fanout, ..RunConfig::default() };
            cfg.validate()?;
            let corpus = subclass_corpus(seeds.addresses(), &cfg)?;
            let pixel = PixelConfig { hidden, blocks, ..PixelConfig::default() };
            let mut model = PixelModel::<f32>::new(pixel, subclass, seed);
            let losses = model.train(&corpus, &TrainOptions { epochs, batch, seed })?;
            write(&out, "model.json", model.to_checkpoint().to_json())?;
            let csv: String = losses.iter().enumerate().map(|(i, l)| format!("{},{l:.6}\n", i + 1)).collect();
            write(&out, "losses.csv", format!("epoch,loss\n{csv}"))?;
            println!("{} images, loss {:.4} -> {:.4}", corpus.len(), losses[0], losses[losses.len() - 1]);
        }
        Command::Generate { model, count, exclude, round, temperature, out } => {
            let ck = Checkpoint::load(&model)?;
            let mut m = PixelModel::<f32>::from_checkpoint(&ck)?;
            m.config.temperature = temperature;
            let known = match &exclude {
                Some(p) => read_address_list(p)?,
                None => Vec::new(),
            };
            let ledger = DedupLedger::with_known(known);
            std::fs::create_dir_all(&out)?;
            match m.sample(count, seed, round, &ledger) {
                Ok(batch) => {
                    batch.write(&out, "candidates", seed)?;
                    println!("{} candidates", batch.len());
                }
                Err(PixelError::GenerationStalled { partial, emitted, requested, attempts }) => {
                    partial.write(&out, "candidates", seed)?;
                    bail!("generation stalled: {emitted} of {requested} after {attempts} draws (partial batch written)");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Universe { source, out } => {
            let (spec, u, seeds) = source.build()?;
            write(&out, "universe.json", spec.to_json())?;
            write(&out, "seeds.txt", lines(seeds.addresses()))?;
            write(&out, "prefixes.txt", u.prefixes().iter().map(|p| format!("{p}\n")).collect::<String>())?;
            let mut gt = String::from("prefix,scheme,ground_truth_actives\n");
            for p in u.prefixes() {
                let scheme = serde_json::to_value(u.scheme(&p))?;
                let name = scheme["type"].as_str().unwrap_or("?").to_string();
                gt.push_str(&format!("{p},{name},{}\n", u.ground_truth_count(&p).unwrap_or(f64::NAN)));
            }
            write(&out, "ground_truth.csv", gt)?;
            println!("{} prefixes, {} seeds", u.prefixes().len(), seeds.len());
        }
        Command::Run { target, run, out } => {
            let t = target.resolve()?;
            let cfg = run.config(cli.seed)?;
            let (plan, outcome) = hitpix::run(&t.seeds, &t.table, t.prober.as_ref(), &cfg)?;
            let dataset = write_run(&out, &cfg, &t.seeds, &t.table, &plan, &outcome)?;
            println!(
                "hit rate {:.4}, {} actives over {} prefixes, {} exported",
                outcome.report.hit_rate, outcome.report.actives_found, outcome.report.cover_num, dataset.summary.exported
            );
        }
        Command::TwoStage { target, run, p, out } => {
            let t = target.resolve()?;
            let cfg = RunConfig { p_pct: Some(p), ..run.config(cli.seed)? };
            cfg.validate()?;
            let (report, _) = run_two_stage(&t.seeds, &t.table, t.prober.as_ref(), &cfg)?;
            write(&out, "two_stage.json", serde_json::to_string_pretty(&report)?)?;
            write(&out, "stage1_rounds.csv", report.stage1.rounds_csv())?;
            println!(
                "hr_pre2 {:.4} hr_tau2 {:.4} hr_tau1 {:.4} CG {:.2}%",
                report.hr_pre2, report.hr_tau2, report.hr_tau1, 100.0 * report.conversion_gain
            );
        }
        Command::Ablate { target, run, out } => {
            let t = target.resolve()?;
            let cfg = run.config(cli.seed)?;
            let rows = run_ablation(&t.seeds, &t.table, t.prober.as_ref(), &cfg)?;
            write(&out, "ablation.csv", ablation_csv(&rows))?;
            write(&out, "ablation.json", serde_json::to_string_pretty(&rows)?)?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Eval { candidates, source, seeds, out } => {
            let (_, u, useeds) = source.build()?;
            let cands = read_address_list(&candidates)?;
            let seed_set: HashSet<_> = match &seeds {
                Some(p) => read_address_list(p)?.into_iter().collect(),
                None => useeds.addresses().iter().copied().collect(),
            };
            let mut ledger = ProbeLedger::new();
            let verdicts = hitpix_core::oracle::probe(&u, &cands, &mut ledger)?;
            let actives: HashSet<_> = verdicts.iter().filter(|v| v.active).map(|v| v.address).collect();
            let cset: HashSet<_> = cands.iter().copied().collect();
            let mut found: Vec<_> = actives.iter().filter(|a| !seed_set.contains(a)).copied().collect();
            found.sort_unstable();
            let report = hitpix_core::metrics::EvalReport {
                hit_rate: hit_rate(&cset, &actives, &seed_set)?,
                cover_num: cover_num(found.iter(), u.table()),
                budget: cset.len(),
                budget_spent: ledger.budget_spent(),
                actives_found: found.len(),
                rounds: Vec::new(),
            };
            write(&out, "report.json", report.to_json())?;
            write(&out, "verdicts.csv", ledger.verdicts_csv())?;
            println!("hit rate {:.4}, cover num {}", report.hit_rate, report.cover_num);
        }
        Command::Export { run, retain, out } => {
            let d = export_from_run(&run, retain)?;
            d.write(&out)?;
            println!("{} addresses exported", d.summary.exported);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
