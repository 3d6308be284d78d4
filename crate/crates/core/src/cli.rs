//! Experiment command line.
//!
//! Exit codes: 0 on success, 1 for configuration or usage errors, 2 for
//! failures while loading data, training or evaluating.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{gaussian_noise_like, gen_synthetic, write_csv, Dataset, SyntheticKind};
use crate::diversity::ensemble_diversity;
use crate::error::Error;
use crate::evaluation::{adversarial_eval, corrupted_eval, ensemble_predict, ood_auc, MetricReport, PredictionSet};
use crate::report::{diversity_entries, diversity_text, flops_entries, metric_entries, table, to_key_value};
use crate::tensor::Rng;
use crate::ticket_file::{load_ticket, save_ticket};
use crate::training::{resolved_interval, schedule_flops, train, Method, Ticket};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const STREAM_OOD: u64 = 12;

#[derive(Debug, Parser)]
#[command(
    name = "sparse-ensemble",
    version,
    about = "Train and evaluate ensembles of sparse networks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Independent sparse runs with prune-and-grow, one per member.
    TrainDst(TrainArgs),
    /// One run: exploration phase, then one refinement phase per member.
    TrainEdst(TrainArgs),
    /// Independent runs with frozen masks.
    TrainStatic(TrainArgs),
    /// Evaluate an ensemble of ticket files on the configured test split.
    Eval(EvalArgs),
    /// Disagreement and KL diversity of at least two tickets.
    Diversity(DiversityArgs),
    /// Analytic FLOPs of a training schedule.
    Flops(FlopsArgs),
    /// Write a synthetic dataset as train.csv / test.csv.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` pairs, e.g. `--sparsity 0.9 --seed 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Gaussian-noise corruption at the configured severities.
    #[arg(long)]
    corrupt: bool,
    /// Out-of-distribution AUC against Gaussian-noise inputs.
    #[arg(long)]
    ood: bool,
    /// FGSM robust accuracy at `fgsm_eps`.
    #[arg(long)]
    fgsm: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true, value_name = "TICKET")]
    tickets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct DiversityArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(value_name = "TICKET")]
    tickets: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// dst, edst or static.
    #[arg(long, default_value = "edst")]
    method: String,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// two_moons, gaussians or spirals.
    #[arg(long, default_value = "two_moons")]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classified by exit code.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Configuration errors keep exit code 1 wherever they surface.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::TrainDst(a) => cmd_train(a, Method::Dst, stdout),
        Command::TrainEdst(a) => cmd_train(a, Method::Edst, stdout),
        Command::TrainStatic(a) => cmd_train(a, Method::Static, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Diversity(a) => cmd_diversity(a, stdout),
        Command::Flops(a) => cmd_flops(a, stdout),
        Command::GenData(a) => cmd_gen_data(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message());
            f.code()
        }
    }
}

/// Turns `--key value` / `--key=value` tokens into pairs; dashes in keys map
/// to underscores.
fn parse_overrides(tokens: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(body) = tok.strip_prefix("--") else {
            return Err(Failure::Config(format!(
                "unexpected argument '{tok}', expected --key value"
            )));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Config(format!("missing value for '--{body}'")))?;
                (body.to_string(), v.clone())
            }
        };
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(pairs)
}

fn parse_set(items: &[String]) -> CliResult<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect()
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(config_failure)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(config_failure)?;
    }
    cfg.validate().map_err(config_failure)?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_tickets(paths: &[PathBuf]) -> CliResult<Vec<Ticket>> {
    paths.iter().map(|p| load_ticket(p).map_err(Failure::from)).collect()
}

fn check_compatible(tickets: &[Ticket], data: &Dataset) -> CliResult<()> {
    for t in tickets {
        let (d, k) = (t.network.input_dim(), t.network.num_classes());
        if d != data.dim() || k != data.num_classes {
            return Err(Failure::Runtime(format!(
                "ticket expects {d} features and {k} classes, dataset has {} and {}",
                data.dim(),
                data.num_classes
            )));
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs, method: Method, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &parse_overrides(&args.overrides)?)?;
    if method == Method::Edst {
        cfg.schedule.edst_members().map_err(config_failure)?;
    }
    let data = cfg.load_dataset()?;
    let run = train(&data, &cfg.schedule, method)?;

    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    write_file(&cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let mut ticket_paths = Vec::new();
    for t in &run.tickets {
        let path = cfg.out_dir.join(format!("ticket_{}.ftkt", t.provenance.member));
        save_ticket(t, &path)?;
        ticket_paths.push(path);
    }
    if method == Method::Edst {
        write_file(&cfg.out_dir.join("train_log.tsv"), run.logs[0].to_tsv())?;
    } else {
        for (t, log) in run.tickets.iter().zip(&run.logs) {
            write_file(
                &cfg.out_dir.join(format!("train_log_{}.tsv", t.provenance.member)),
                log.to_tsv(),
            )?;
        }
    }

    let mut report = MetricReport::clean(&run.tickets, &data.test, cfg.ece_bins)?;
    report.flops = Some(schedule_flops(
        &cfg.schedule,
        method,
        data.train.len(),
        data.dim(),
        data.num_classes,
        cfg.flops_overhead,
    )?);
    let mut entries = metric_entries(&report);
    entries.push((
        "train_flops_logged".into(),
        run.logs.iter().map(|l| l.total_flops()).sum(),
    ));
    entries.push(("tickets".into(), run.tickets.len() as f64));
    entries.push(("failed_members".into(), run.failures.len() as f64));
    entries.push((
        "sparsity".into(),
        run.tickets.iter().map(Ticket::sparsity).sum::<f64>() / run.tickets.len() as f64,
    ));
    if run.tickets.len() >= 2 {
        let preds = PredictionSet::from_tickets(&run.tickets, &data.test)?;
        entries.extend(diversity_entries(&ensemble_diversity(&preds)?));
    }
    write_file(&cfg.out_dir.join("metrics.txt"), to_key_value(&entries))?;
    for f in &run.failures {
        let _ = writeln!(stdout, "warning: member {} dropped: {}", f.member, f.error);
    }
    let _ = write!(stdout, "{}", table(&method.to_string(), &entries));
    for p in ticket_paths {
        let _ = writeln!(stdout, "wrote {}", p.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref(), &parse_set(&args.set)?)?;
    let data = cfg.load_dataset()?;
    let tickets = load_tickets(&args.tickets)?;
    check_compatible(&tickets, &data)?;
    let seed = cfg.schedule.seed;
    let mut report = MetricReport::clean(&tickets, &data.test, cfg.ece_bins)?;
    if args.corrupt {
        report.corrupted = Some(corrupted_eval(
            &tickets,
            &data.test,
            &cfg.severities,
            seed,
            cfg.ece_bins,
        )?);
    }
    if args.ood {
        let noise = gaussian_noise_like(&data.train, cfg.ood_n, &mut Rng::with_stream(seed, STREAM_OOD));
        let in_probs = ensemble_predict(&tickets, &data.test.inputs)?;
        let out_probs = ensemble_predict(&tickets, &noise)?;
        report.ood_auc = Some(ood_auc(&in_probs, &out_probs)?);
    }
    if args.fgsm {
        report.adversarial = Some(adversarial_eval(
            &tickets,
            &data.test,
            cfg.fgsm_eps,
            &data.feature_min,
            &data.feature_max,
        )?);
    }
    let text = to_key_value(&metric_entries(&report));
    match args.out {
        Some(p) => write_file(&p, text),
        None => {
            let _ = write!(stdout, "{text}");
            Ok(())
        }
    }
}

fn cmd_diversity(args: DiversityArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.tickets.len() < 2 {
        return Err(Failure::Config(format!(
            "need at least 2 tickets, got {}",
            args.tickets.len()
        )));
    }
    let cfg = load_config(args.config.as_deref(), &parse_set(&args.set)?)?;
    let data = cfg.load_dataset()?;
    let tickets = load_tickets(&args.tickets)?;
    check_compatible(&tickets, &data)?;
    let preds = PredictionSet::from_tickets(&tickets, &data.test)?;
    let text = diversity_text(&ensemble_diversity(&preds)?);
    match args.out {
        Some(p) => write_file(&p, text),
        None => {
            let _ = write!(stdout, "{text}");
            Ok(())
        }
    }
}

fn cmd_flops(args: FlopsArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let method: Method = args.method.parse().map_err(config_failure)?;
    let cfg = load_config(args.config.as_deref(), &parse_overrides(&args.overrides)?)?;
    if method == Method::Edst {
        cfg.schedule.edst_members().map_err(config_failure)?;
    }
    let data = cfg.load_dataset()?;
    let n = data.train.len();
    let report = schedule_flops(
        &cfg.schedule,
        method,
        n,
        data.dim(),
        data.num_classes,
        cfg.flops_overhead,
    )?;
    let mut entries = flops_entries(&report);
    entries.push((
        "update_interval".into(),
        resolved_interval(&cfg.schedule, method, n)? as f64,
    ));
    let _ = write!(stdout, "{}", to_key_value(&entries));
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let kind: SyntheticKind = args.kind.parse().map_err(config_failure)?;
    let data = gen_synthetic(kind, args.n, args.noise, args.seed).map_err(config_failure)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    write_csv(args.out.join("train.csv"), &data.train)?;
    write_csv(args.out.join("test.csv"), &data.test)?;
    let _ = writeln!(
        stdout,
        "wrote {} train and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_tokens() {
        let pairs = parse_overrides(&strings(&["--sparsity", "0.9", "--lr-explore=0.05"])).unwrap();
        assert_eq!(
            pairs,
            vec![("sparsity".into(), "0.9".into()), ("lr_explore".into(), "0.05".into())]
        );
        assert!(parse_overrides(&strings(&["--seed"])).is_err());
        assert!(parse_overrides(&strings(&["seed", "1"])).is_err());
    }

    #[test]
    fn clap_accepts_trailing_flags() {
        let cli = Cli::try_parse_from(["x", "train-dst", "--config", "c.cfg", "--sparsity", "0.9"]).unwrap();
        match cli.command {
            Command::TrainDst(a) => {
                assert_eq!(a.config, Some(PathBuf::from("c.cfg")));
                assert_eq!(a.overrides, strings(&["--sparsity", "0.9"]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_override_is_config_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(["x", "flops", "--bogus", "1"], &mut out, &mut err);
        assert_eq!(code, EXIT_CONFIG);
        assert!(String::from_utf8(err).unwrap().contains("'bogus'"));
    }
}
