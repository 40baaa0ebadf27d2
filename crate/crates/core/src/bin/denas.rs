//! Pipeline driver: latency-table build, prior training, architecture
//! search, decoding, training, evaluation, and statistics emission.
//! Exit codes: 0 success, 1 internal error, 2 usage/config error.

use clap::{Args, Parser, Subcommand};
use denas_core::config::RunConfig;
use denas_core::data::{make_dataset, NoiseCase};
use denas_core::decode::{assemble, decode_part, ArchitecturePlan, DecodedModel};
use denas_core::error::DenasError;
use denas_core::latency::{build_latency_table, LatencyTable};
use denas_core::prior::{train_prior, PriorModel};
use denas_core::search::{
    evaluate, part_spec_for, search_all, train_decoded, EvalReport, SearchOutcome,
};
use denas_core::stats;
use denas_core::supernet::{estimate_space_size_for_spec, ArchSnapshot, ArchWeights};
use denas_core::Result;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "denas", about = "Coarse-to-fine denoising architecture search")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Configuration file (JSON); desk-scale defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override applied to every stage
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
    /// Dotted config overrides, e.g. search.epochs=5
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure the per-operator latency lookup table
    Lut {
        #[command(flatten)]
        common: Common,
        /// Timing repetitions per table entry
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Train and freeze the denoising prior
    Prior {
        #[command(flatten)]
        common: Common,
    },
    /// Run the alternating architecture search over all parts
    Search {
        #[command(flatten)]
        common: Common,
        /// Search the parts in concurrent threads
        #[arg(long)]
        parallel: bool,
    },
    /// Decode searched architecture weights into a discrete plan
    Decode {
        #[command(flatten)]
        common: Common,
    },
    /// Train a decoded architecture from scratch
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained model across noise cases
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Emit architecture statistics as CSV plot data
    Stats {
        #[command(flatten)]
        common: Common,
        /// Architecture plan files (default: OUT/arch.json)
        #[arg(long)]
        arch: Vec<PathBuf>,
    },
    /// Report the search-space size in log10
    Spacesize {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DenasError::Config(_) | DenasError::InvalidArgument { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// DENAS_THREADS caps internal parallelism; unset means unlimited.
fn thread_cap() -> usize {
    std::env::var("DENAS_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(usize::MAX)
}

fn setup(common: &Common) -> Result<RunConfig> {
    let (mut cfg, log) = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.search.seed = s;
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.prior.seed = s.wrapping_add(1);
        cfg.noise = match cfg.noise {
            NoiseCase::Awgn { sigma, .. } => NoiseCase::Awgn { sigma, seed: s },
            NoiseCase::Spatial { map_case, .. } => NoiseCase::Spatial { map_case, seed: s },
        };
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)?;
    for l in &log {
        println!("{l}");
    }
    // every run leaves the fully-resolved configuration beside its outputs
    std::fs::write(common.out.join("resolved_config.json"), cfg.echo()?)?;
    Ok(cfg)
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(DenasError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(DenasError::Config(format!(
            "{} not found; run `denas {hint}` first",
            path.display()
        )));
    }
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<denas_core::data::DatasetSplit> {
    make_dataset(
        &[],
        cfg.data.patch,
        cfg.data.count,
        cfg.data.split_ratio,
        &cfg.noise,
        cfg.data.seed,
    )
}

fn eval_cases(
    model: &DecodedModel,
    cfg: &RunConfig,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut cases = vec![cfg.noise.clone()];
    for level in [15, 25, 50] {
        let c = NoiseCase::awgn_preset(level, cfg.noise.seed())?;
        if c.label() != cfg.noise.label() {
            cases.push(c);
        }
    }
    let mut out = BTreeMap::new();
    for case in cases {
        let n = (cfg.data.count / 2).max(4);
        let split = make_dataset(&[], cfg.data.patch, n, 0.0, &case, cfg.data.seed ^ 0xea51)?;
        let report = evaluate(|x| model.denoise(x), &split.pairs_arch)?;
        out.insert(case.label(), report);
    }
    Ok(out)
}

fn load_snapshots(run_dir: &Path, parts: usize) -> Result<Vec<ArchSnapshot>> {
    let mut snaps = vec![];
    for i in 0..parts {
        let p = run_dir.join(format!("part{i}/archweights.json"));
        if !p.exists() {
            return Err(DenasError::Config(format!(
                "malformed run directory: {} missing",
                p.display()
            )));
        }
        snaps.push(serde_json::from_str(&std::fs::read_to_string(&p)?)?);
    }
    Ok(snaps)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Lut { common, reps } => {
            let mut cfg = setup(&common)?;
            if let Some(r) = reps {
                cfg.lut.reps = r;
            }
            let out = common.out.join("lut.json");
            guard(&out, common.force)?;
            let table = build_latency_table(
                &cfg.spec,
                cfg.lut.reps,
                cfg.lut.warmups,
                cfg.lut.input_hw,
            )?;
            table.save(&out)?;
            println!(
                "lut: {} entries, reps={} -> {}",
                table.entries.len(),
                table.meta.reps,
                out.display()
            );
            Ok(())
        }
        Cmd::Prior { common } => {
            let cfg = setup(&common)?;
            let out = common.out.join("prior.json");
            guard(&out, common.force)?;
            let split = dataset(&cfg)?;
            let prior =
                PriorModel::new(cfg.spec.in_channels, cfg.spec.base_width, cfg.prior.seed);
            let history = train_prior(
                &prior,
                &split.pairs_w,
                cfg.prior.epochs,
                cfg.prior.lr,
                cfg.prior.plateau_tol,
            )?;
            prior.save(&out)?;
            // PSNR only: patches may be smaller than the SSIM window
            let mut held = (0.0, 0.0);
            for p in &split.pairs_arch {
                held.0 += denas_core::metrics::psnr(&p.noisy, &p.clean, 1.0)?;
                held.1 += denas_core::metrics::psnr(&prior.denoise(&p.noisy)?, &p.clean, 1.0)?;
            }
            let n = split.pairs_arch.len().max(1) as f64;
            println!(
                "prior: {} epochs, final loss {:.6}, held-out PSNR {:.2} dB (noisy {:.2}) -> {}",
                history.len(),
                history.last().unwrap(),
                held.1 / n,
                held.0 / n,
                out.display()
            );
            Ok(())
        }
        Cmd::Search { common, parallel } => {
            let cfg = setup(&common)?;
            let prior_path = common.out.join("prior.json");
            let lut_path = common.out.join("lut.json");
            require(&prior_path, "prior")?;
            require(&lut_path, "lut")?;
            let prior = PriorModel::load(&prior_path)?;
            let table = LatencyTable::load(&lut_path)?;
            let run_dir = common.out.join("search");
            if run_dir.exists() && common.force {
                std::fs::remove_dir_all(&run_dir)?;
            }
            // without --force an existing run dir resumes from checkpoints
            std::fs::create_dir_all(&run_dir)?;
            let split = dataset(&cfg)?;
            let outcomes: Vec<SearchOutcome> = search_all(
                &prior,
                &cfg.spec,
                &split,
                &table,
                &cfg.search,
                Some(&run_dir),
                parallel && thread_cap() > 1,
            )?;
            for (i, o) in outcomes.iter().enumerate() {
                let m = o.metrics.last().unwrap();
                println!(
                    "part {i}: {} epochs, l_dp {:.6}, l_search {:.6}",
                    o.metrics.len(),
                    m.l_dp,
                    m.l_search
                );
            }
            println!("search run dir: {}", run_dir.display());
            Ok(())
        }
        Cmd::Decode { common } => {
            let cfg = setup(&common)?;
            let out = common.out.join("arch.json");
            guard(&out, common.force)?;
            let snaps = load_snapshots(&common.out.join("search"), cfg.parts)?;
            let mut parts = vec![];
            for (i, snap) in snaps.iter().enumerate() {
                let spec = part_spec_for(&cfg.spec, i);
                let arch = ArchWeights::new(&spec);
                arch.restore(snap)
                    .map_err(|e| DenasError::Config(format!("malformed run directory: {e}")))?;
                parts.push(decode_part(&arch, &spec)?);
            }
            let plan = assemble(parts, cfg.spec.base_width);
            plan.save(&out)?;
            let cells: usize = plan.parts.iter().map(|p| p.cells.len()).sum();
            println!("decoded {} parts, {cells} retained cells -> {}", cfg.parts, out.display());
            Ok(())
        }
        Cmd::Train { common } => {
            let cfg = setup(&common)?;
            let model_out = common.out.join("model.json");
            let report_out = common.out.join("train_report.json");
            guard(&model_out, common.force)?;
            let arch_path = common.out.join("arch.json");
            let prior_path = common.out.join("prior.json");
            require(&arch_path, "decode")?;
            require(&prior_path, "prior")?;
            let plan = ArchitecturePlan::load(&arch_path)?;
            let prior = PriorModel::load(&prior_path)?;
            let model =
                DecodedModel::new(&plan, &cfg.spec, cfg.spec.in_channels, cfg.train.seed)?;
            let split = dataset(&cfg)?;
            let history = train_decoded(&model, &prior, &split.pairs_w, &cfg.train)?;
            model.save(&model_out)?;
            let reports = eval_cases(&model, &cfg)?;
            #[derive(serde::Serialize)]
            struct TrainReport<'a> {
                history: &'a [f64],
                reports: &'a BTreeMap<String, EvalReport>,
            }
            std::fs::write(
                &report_out,
                serde_json::to_string_pretty(&TrainReport {
                    history: &history,
                    reports: &reports,
                })?,
            )?;
            let main = &reports[&cfg.noise.label()];
            println!(
                "train: {} epochs, final loss {:.6}; {} PSNR {:.2} dB / SSIM {:.4} -> {}",
                history.len(),
                history.last().unwrap(),
                cfg.noise.label(),
                main.psnr,
                main.ssim,
                model_out.display()
            );
            Ok(())
        }
        Cmd::Eval { common } => {
            let cfg = setup(&common)?;
            let out = common.out.join("eval_report.json");
            guard(&out, common.force)?;
            let model_path = common.out.join("model.json");
            require(&model_path, "train")?;
            let model = DecodedModel::load(&model_path)?;
            let reports = eval_cases(&model, &cfg)?;
            std::fs::write(&out, serde_json::to_string_pretty(&reports)?)?;
            for (label, r) in &reports {
                println!(
                    "{label}: PSNR {:.2} dB (noisy {:.2}), SSIM {:.4}",
                    r.psnr, r.psnr_noisy, r.ssim
                );
            }
            Ok(())
        }
        Cmd::Stats { common, arch } => {
            let cfg = setup(&common)?;
            let dir = common.out.join("stats");
            guard(&dir.join("operator_rates.csv"), common.force)?;
            std::fs::create_dir_all(&dir)?;
            let arch_paths = if arch.is_empty() {
                vec![common.out.join("arch.json")]
            } else {
                arch
            };
            let mut all_rates = vec![];
            let mut all_costs = vec![];
            let lut_path = common.out.join("lut.json");
            let table = lut_path.exists().then(|| LatencyTable::load(&lut_path)).transpose()?;
            for p in &arch_paths {
                require(p, "decode")?;
                let plan = ArchitecturePlan::load(p)?;
                all_rates.extend(stats::operator_rates(&plan)?);
                if let Some(t) = &table {
                    all_costs.extend(stats::complexity_distribution(&plan, t)?);
                }
            }
            stats::write_operator_rates_csv(&dir.join("operator_rates.csv"), &all_rates)?;
            if !all_costs.is_empty() {
                stats::write_complexity_csv(&dir.join("complexity.csv"), &all_costs)?;
            }
            let run_dir = common.out.join("search");
            if run_dir.exists() {
                let snaps = load_snapshots(&run_dir, cfg.parts)?;
                let pref = stats::resolution_preference(&snaps)?;
                stats::write_resolution_preference_csv(
                    &dir.join("resolution_preference.csv"),
                    &pref,
                )?;
            }
            let model_path = common.out.join("model.json");
            if model_path.exists() {
                let model = DecodedModel::load(&model_path)?;
                let split =
                    make_dataset(&[], cfg.data.patch, 1, 1.0, &cfg.noise, cfg.data.seed)?;
                let fs = stats::feature_stats(&model, &split.pairs_w[0].noisy)?;
                stats::write_feature_stats_csv(&dir.join("feature_stats.csv"), &fs)?;
            }
            println!("stats -> {}", dir.display());
            Ok(())
        }
        Cmd::Spacesize { common } => {
            let cfg = setup(&common)?;
            let out = common.out.join("spacesize.json");
            guard(&out, common.force)?;
            let log10 = estimate_space_size_for_spec(&cfg.spec, cfg.parts);
            #[derive(serde::Serialize)]
            struct Report {
                log10_candidates: f64,
            }
            std::fs::write(&out, serde_json::to_string_pretty(&Report { log10_candidates: log10 })?)?;
            println!("search space: ~1e{log10:.1} candidates");
            Ok(())
        }
    }
}
