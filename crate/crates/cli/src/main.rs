use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::json;

use agnostic_rl::baselines::{importance_sampling, trajectory_tree, GenerativeOracle};
use agnostic_rl::capacity::{coverability_per_layer, spanning_capacity, DEFAULT_NODE_BUDGET};
use agnostic_rl::format;
use agnostic_rl::harness::{emit_report, render_report, run_experiment, ExperimentConfig, ReportFormat};
use agnostic_rl::instances::planted_singletons;
use agnostic_rl::lowerbound::{
    build_hard_mdp, build_pi_ell, build_reference_mdp, check_pi_ell, sample_blockfree_matrix, Decoder, SamplingMode,
};
use agnostic_rl::popler::{popler, PoplerParams};
use agnostic_rl::seed::{derive_rng, rng_from_seed};
use agnostic_rl::sunflower::{build_cert, verify_cert};
use agnostic_rl::{Error, LayeredMdp, PolicyClass};

/// Exit code for a recipe that ran but missed its success target.
const EXIT_STATISTICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "agnostic-rl", version, about = "Policy-class exploration toolkit for layered tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spanning capacity of a class.
    Capacity {
        /// Class file or spec like `singleton:K=3,H=4`.
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
        budget: usize,
        /// Write the witness MDP here.
        #[arg(long)]
        witness: Option<PathBuf>,
    },
    /// Coverability of a class on an MDP.
    Coverability {
        #[arg(long)]
        class: String,
        #[arg(long)]
        mdp: PathBuf,
    },
    /// Verify a sunflower certificate (built from the class tag when --cert is omitted).
    SunflowerCheck {
        #[arg(long)]
        class: String,
        #[arg(long)]
        cert: Option<PathBuf>,
        /// Longest segment checked, in layers beyond the first; defaults to H-1.
        #[arg(long)]
        max_span: Option<usize>,
    },
    Popler {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long)]
        cert: Option<PathBuf>,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long)]
        n1: usize,
        #[arg(long)]
        n2: usize,
        #[arg(long)]
        capacity_ub: Option<u64>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    IsBaseline {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        class: String,
        /// Episodes.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Trajtree {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        class: String,
        /// Trees.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a combination-lock instance and its reference MDP.
    LowerboundGen {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        ell: usize,
        #[arg(long = "H")]
        horizon: usize,
        #[arg(long)]
        locks: usize,
        #[arg(long)]
        seed: u64,
        /// Planted member; defaults to 0.
        #[arg(long, default_value_t = 0)]
        pistar: usize,
        #[arg(long, default_value_t = 1000)]
        retries: usize,
        /// Draw entries i.i.d. instead of column by column.
        #[arg(long)]
        iid: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the planted singleton instance (mdp, class, cert) to a directory.
    MakeInstance {
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a config-driven experiment recipe.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Report path; defaults to `<experiment.out>/report.<format>` or stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_class(arg: &str) -> anyhow::Result<PolicyClass> {
    if Path::new(arg).is_file() {
        Ok(format::read_pclass(&format::read_file(arg)?)?)
    } else {
        Ok(format::class_from_spec(arg)?)
    }
}

fn load_mdp(path: &Path) -> anyhow::Result<LayeredMdp> {
    Ok(format::read_mdp(&format::read_file(path).with_context(|| format!("reading {}", path.display()))?)?)
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cmd: Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::Capacity { class, budget, witness } => {
            let c = load_class(&class)?;
            let r = spanning_capacity(&c, budget)?;
            if let (Some(path), Some(w)) = (witness, &r.witness) {
                format::write_file(path, &format::write_mdp(&w.mdp))?;
            }
            emit(&serde_json::to_value(&r)?, None)?;
        }
        Cmd::Coverability { class, mdp } => {
            let c = load_class(&class)?;
            let m = load_mdp(&mdp)?;
            let per_layer = coverability_per_layer(&c, &m)?;
            let value = per_layer.iter().cloned().fold(0.0, f64::max);
            emit(&json!({ "value": value, "per_layer": per_layer }), None)?;
        }
        Cmd::SunflowerCheck { class, cert, max_span } => {
            let c = load_class(&class)?;
            let cert = match cert {
                Some(p) => format::read_cert(&format::read_file(p)?)?,
                None => build_cert(&c)?,
            };
            let span = max_span.unwrap_or(c.horizon() - 1);
            let v = verify_cert(&c, &cert, span)?;
            emit(&json!({ "k": cert.k, "d": cert.d, "ok": v.is_ok(), "violations": v.violations }), None)?;
            if !v.is_ok() {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Popler { mdp, class, cert, eps, delta, n1, n2, capacity_ub, seed, out } => {
            let m = load_mdp(&mdp)?;
            let c = load_class(&class)?;
            let cert = match cert {
                Some(p) => format::read_cert(&format::read_file(p)?)?,
                None => build_cert(&c)?,
            };
            let params = PoplerParams { eps, delta, n1, n2, capacity_ub };
            let (_, report) = popler(&m, &c, &cert, &params, &mut rng_from_seed(seed))?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
        }
        Cmd::IsBaseline { mdp, class, n, seed, out } => {
            let m = load_mdp(&mdp)?;
            let c = load_class(&class)?;
            let r = importance_sampling(&m, &c, n, &mut rng_from_seed(seed))?;
            emit(&serde_json::to_value(&r)?, out.as_deref())?;
        }
        Cmd::Trajtree { mdp, class, n, seed, out } => {
            let m = load_mdp(&mdp)?;
            let c = load_class(&class)?;
            let mut oracle = GenerativeOracle::new(&m);
            let r = trajectory_tree(&mut oracle, &c, n, &mut rng_from_seed(seed))?;
            emit(&serde_json::to_value(&r)?, out.as_deref())?;
        }
        Cmd::LowerboundGen { eps, ell, horizon, locks, seed, pistar, retries, iid, out } => {
            let mode = if iid { SamplingMode::Iid } else { SamplingMode::ColumnConditioned };
            let (b, attempts) = sample_blockfree_matrix(eps, ell, locks, mode, &mut derive_rng(seed, 0, 0), retries)?;
            let class = build_pi_ell(&b, horizon, locks)?;
            let decoder = Decoder::sample(locks, horizon, &mut derive_rng(seed, 1, 0));
            let inst = build_hard_mdp(&class, pistar, &decoder)?;
            std::fs::create_dir_all(&out)?;
            format::write_file(out.join("matrix.txt"), &format::write_matrix(&b))?;
            format::write_file(out.join("class.pclass"), &format::write_pclass(&class))?;
            format::write_file(out.join("decoder.txt"), &format::write_decoder(&decoder))?;
            format::write_file(out.join("instance.mdp"), &format::write_mdp(&inst.mdp))?;
            format::write_file(out.join("reference.mdp"), &format::write_mdp(&build_reference_mdp(locks, horizon)?))?;
            let check = b.check()?;
            let props = check_pi_ell(&class, eps, locks);
            emit(
                &json!({
                    "attempts": attempts,
                    "rows": b.n(),
                    "columns": b.d(),
                    "k": b.k,
                    "matrix": check,
                    "class_size": class.len(),
                    "properties": props,
                    "pistar": pistar,
                    "relevant": inst.relevant,
                }),
                None,
            )?;
        }
        Cmd::MakeInstance { k, out } => {
            let p = planted_singletons(k)?;
            std::fs::create_dir_all(&out)?;
            format::write_file(out.join("planted.mdp"), &format::write_mdp(&p.mdp))?;
            format::write_file(out.join("planted.pclass"), &format::write_pclass(&p.class))?;
            format::write_file(out.join("planted.cert"), &format::write_cert(&p.cert))?;
            emit(&json!({ "values": p.values, "optimal": p.optimal }), None)?;
        }
        Cmd::Run { config, format: fmt, out } => {
            let fmt: ReportFormat = fmt.parse()?;
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            let ext = if fmt == ReportFormat::Csv { "csv" } else { "json" };
            let target = out.or_else(|| cfg.experiment.out.as_ref().map(|d| cfg.base_dir.join(d).join(format!("report.{ext}"))));
            match target {
                Some(p) => {
                    if let Some(dir) = p.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    emit_report(&report, fmt, &p)?;
                }
                None => print!("{}", render_report(&report, fmt)?),
            }
            eprintln!(
                "{}: {} records, success rate {}, mean error {}",
                report.recipe,
                report.records.len(),
                report.aggregate.success_rate,
                report.aggregate.mean_error
            );
            if !report.meets_target(&cfg) {
                eprintln!("success rate below algorithm.min_success");
                return Ok(ExitCode::from(EXIT_STATISTICAL));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_resource_limit() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

