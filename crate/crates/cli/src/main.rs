use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use crlsc_cli::commands::{self, CliError, SkbSource};
use crlsc_cli::{Run, RunConfig};
use crlsc_core::pqkb::kb_load;

#[derive(Parser)]
#[command(name = "crlsc", version, about = "Knowledge-base guided semantic communication toolkit")]
struct Cli {
    /// key = value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed, the seed every stage derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: LevelFilter,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a dataset with the teacher and write a product-quantised knowledge base.
    BuildKb {
        /// CRDS dataset file; defaults to the synthetic public draw.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output file; defaults to skb.crkb in the run directory.
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Serve a knowledge base file until interrupted.
    Serve {
        #[arg(long)]
        kb: PathBuf,
        /// Defaults to net.addr.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Stage 1: contrastive pre-training of the local encoder.
    TrainEncoder {
        /// Knowledge base file or host:port of a served one. Omit for the unguided baseline.
        #[arg(long)]
        skb: Option<String>,
    },
    /// Stage 2: train the VQ codebook and decoder behind a frozen encoder.
    TrainDecoder {
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Probe a frozen encoder; prints top-1 and top-5 accuracy.
    Eval {
        #[arg(long)]
        encoder: PathBuf,
        /// CRDS held-out set; defaults to the synthetic held-out draw.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Shared KB → device A → private KB → device B over local sockets.
    TransferDemo {
        /// Shared knowledge base; built into the run directory when omitted.
        #[arg(long)]
        skb: Option<PathBuf>,
    },
    /// build-kb → train-encoder → private KB → train-decoder → eval.
    E2e,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildKb { .. } => "build-kb",
            Command::Serve { .. } => "serve",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::TrainDecoder { .. } => "train-decoder",
            Command::Eval { .. } => "eval",
            Command::TransferDemo { .. } => "transfer-demo",
            Command::E2e => "e2e",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serialisable")
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if let Command::Serve { kb, addr } = &cli.command {
        let store = kb_load(kb)?;
        let addr = addr.clone().unwrap_or_else(|| cfg.net_addr.clone());
        let handle = crlsc_net::serve_kb(Arc::new(store), addr.as_str())?;
        println!("listening on {}", handle.local_addr());
        std::io::stdout().flush()?;
        loop {
            std::thread::park();
        }
    }
    let mut run = Run::create(&cli.out, cli.command.name(), &cfg)?;
    println!("run {} in {}", run.id, run.dir.display());
    match &cli.command {
        Command::BuildKb { dataset, kb } => {
            let s = commands::build_kb(&cfg, &mut run, dataset.as_deref(), kb.as_deref())?;
            println!("N = {}", s.n);
            println!("d = {}", s.d);
            println!("m = {}", s.m);
            println!("k* = {}", s.k_star);
            println!("codebook scalars (m*d*k*) = {}", s.codebook_scalars);
            println!("code bytes = {}", s.code_bytes);
            println!("file bytes = {}", s.file_bytes);
            println!("sha256 = {}", s.sha256);
            println!("wrote {}", s.path.display());
        }
        Command::Serve { .. } => unreachable!(),
        Command::TrainEncoder { skb } => {
            let source = skb.as_deref().map(SkbSource::parse);
            let (_, s) = commands::train_encoder(&cfg, &mut run, source.as_ref())?;
            println!("{}", json(&s));
        }
        Command::TrainDecoder { encoder } => {
            let enc = commands::load_encoder_file(encoder)?;
            println!("{}", json(&commands::train_decoder(&cfg, &mut run, &enc)?));
        }
        Command::Eval { encoder, dataset } => {
            let enc = commands::load_encoder_file(encoder)?;
            let r = commands::eval(&cfg, &mut run, &enc, dataset.as_deref())?;
            println!("top1 = {:.4}", r.top1);
            println!("top5 = {:.4}", r.top5);
        }
        Command::TransferDemo { skb } => {
            let r = commands::transfer(&cfg, &mut run, skb.as_deref())?;
            println!("device A top1 = {:.4}", r.device_a.probe.top1);
            println!("device B top1 = {:.4}", r.device_b.probe.top1);
            println!("baseline B top1 = {:.4}", r.baseline_b.probe.top1);
            println!("skb sha256 = {}", r.skb_sha256);
            println!("pkb sha256 = {}", r.pkb_sha256);
            println!("report {}", run.path("report.json").display());
        }
        Command::E2e => {
            let s = commands::e2e(&cfg, &mut run)?;
            println!("top1 = {:.4}", s.probe.top1);
            println!("top5 = {:.4}", s.probe.top5);
            println!("summary {}", run.path("summary.json").display());
        }
    }
    run.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
