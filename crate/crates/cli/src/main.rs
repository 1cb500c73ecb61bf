use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ecnet::checks::{run_checks, CheckOptions};
use ecnet::config::Config;
use ecnet::data::save_records;
use ecnet::eval::{rows_to_csv, Evaluator, Protocol};
use ecnet::hypmath::{dist_raw, mobius_add_raw, PoincareBall, RadialMap};
use ecnet::train::{load_data, run_train, METRICS_FILE};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "ecnet",
    version,
    about = "Dual Poincare-ball multimodal training and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics, clipping log and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the first entry of `seeds` in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.json` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run directory under one protocol.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Fixed)]
        protocol: ProtocolArg,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt part of the stack on purpose to see the suite fail.
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Time the geometry kernels.
    Bench {
        #[arg(long, default_value_t = 200_000)]
        iters: usize,
    },
    /// Write the configured train/test data as JSON-lines records.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Eta,
    Clean,
    Corrupt,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Fixed => Protocol::Fixed,
            ProtocolArg::Eta => Protocol::Eta,
            ProtocolArg::Clean => Protocol::Clean,
            ProtocolArg::Corrupt => Protocol::Corrupt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Build points with a much thinner boundary margin than configured.
    ClipMargin,
}

/// A failed invariant run, kept apart from ordinary errors for the exit code.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} invariant check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ChecksFailed>().is_some() {
        return EXIT_CHECK;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ecnet::Error>() {
            return match e {
                ecnet::Error::Config(_) => EXIT_CONFIG,
                ecnet::Error::Data { .. } => EXIT_DATA,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path, resume: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let start = Instant::now();
    let trainer = run_train(&cfg, seed, out, resume)?;
    if let Some(last) = trainer.state.metrics.last() {
        println!(
            "epoch {} step {} train_acc {:.4} clip_frac {:.4} curl {:.3e}",
            last.epoch, last.step, last.train_acc, last.clip_frac, last.curl
        );
    }
    println!(
        "wrote {} in {:.1}s",
        out.join(METRICS_FILE).display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval(out: &Path, protocol: Protocol) -> Result<()> {
    let ev = Evaluator::from_run_dir(out)?;
    let rows = ev.evaluate(protocol)?;
    let csv = rows_to_csv(&rows);
    let name = format!("eval_{}.csv", format!("{protocol:?}").to_lowercase());
    std::fs::write(out.join(&name), &csv).with_context(|| format!("writing {name}"))?;
    print!("{csv}");
    if ev.test.samples.iter().any(|s| s.inconsistent) {
        let (scores, c) = ev.asymmetry()?;
        let mut s = String::from("id,s_asym,inconsistent\n");
        for (sample, v) in ev.test.samples.iter().zip(&scores) {
            s.push_str(&format!("{},{v},{}\n", sample.id, u8::from(sample.inconsistent)));
        }
        std::fs::write(out.join("asymmetry.csv"), s).context("writing asymmetry.csv")?;
        println!("asymmetry spearman rho {:.4} p {:.3e}", c.rho, c.p);
    }
    Ok(())
}

fn check(seed: Option<u64>, fault: Option<Fault>) -> Result<()> {
    let mut opts = CheckOptions::default();
    if let Some(s) = seed {
        opts.seed = s;
    }
    if let Some(Fault::ClipMargin) = fault {
        opts.clip_margin = opts.eps_bnd / 100.0;
    }
    let report = run_checks(&opts)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(ChecksFailed(report.failures()).into())
    }
}

fn bench(iters: usize) -> Result<()> {
    let ball = PoincareBall::new(1.0)?;
    let dim = 16;
    let x: Vec<f64> = (0..dim).map(|i| 0.02 * i as f64 - 0.1).collect();
    let y: Vec<f64> = (0..dim).map(|i| 0.15 - 0.015 * i as f64).collect();
    let exp0 = RadialMap::Exp0 { c: ball.c() };
    let log0 = RadialMap::Log0 { c: ball.c() };
    let mut sink = 0.0;
    let mut time = |name: &str, f: &dyn Fn() -> f64| {
        let start = Instant::now();
        for _ in 0..iters {
            sink += f();
        }
        let ns = start.elapsed().as_nanos() as f64 / iters.max(1) as f64;
        println!("{name:<12} {ns:>9.1} ns/op  (n={dim})");
    };
    time("exp0", &|| exp0.apply(&x)[0]);
    time("log0", &|| log0.apply(&x)[0]);
    time("mobius_add", &|| mobius_add_raw(&x, &y, 1.0)[0]);
    time("distance", &|| dist_raw(&x, &y, 1.0));
    std::hint::black_box(sink);
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (train, test) = load_data(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_records(&train, &out.join("train.jsonl"))?;
    save_records(&test, &out.join("test.jsonl"))?;
    println!(
        "wrote {} train and {} test records to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            resume,
        } => train(config.as_deref(), seed, &out, resume),
        Cmd::Eval { out, protocol } => eval(&out, protocol.into()),
        Cmd::Check { seed, inject_fault } => check(seed, inject_fault),
        Cmd::Bench { iters } => bench(iters),
        Cmd::GenData { config, out } => gen_data(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_documented_exit_codes() {
        let cfg: anyhow::Error = ecnet::Error::Config("x".into()).into();
        let data: anyhow::Error = ecnet::Error::Data {
            line: 3,
            msg: "y".into(),
        }
        .into();
        let wrapped = anyhow::Error::from(ecnet::Error::Config("z".into())).context("loading");
        let io: anyhow::Error = ecnet::Error::Io(std::io::Error::other("disk")).into();
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        assert_eq!(exit_code(&data), EXIT_DATA);
        assert_eq!(exit_code(&wrapped), EXIT_CONFIG);
        assert_eq!(exit_code(&io), EXIT_OTHER);
        assert_eq!(exit_code(&ChecksFailed(2).into()), EXIT_CHECK);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_OTHER);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
