use std::io::Write;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use narrative_cli::{cmd_arc, cmd_generate, cmd_predict, cmd_serve, cmd_train, Cli, Command};
use narrative_core::Exec;
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line, so scripts can grep for the prefix
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or_else(rand::random);
    eprintln!("seed: {seed}");
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::Train(args) => {
            let s = cmd_train(args)?;
            for (label, n) in &s.doc_counts {
                writeln!(out, "{label}\t{n}")?;
            }
            eprintln!(
                "vocabulary: {} tokens; model written to {}",
                s.vocab_size,
                args.out.display()
            );
        }
        Command::Arc(args) => {
            let (arc, text) = cmd_arc(args)?;
            match &args.out {
                Some(p) => eprintln!("{} arc points written to {}", arc.len(), p.display()),
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::Generate(args) => {
            let batch = cmd_generate(args, seed, exec)?;
            if args.runs == 1 {
                for l in &batch.transcripts[0].lines {
                    let tag = serde_json::to_value(l.source)?;
                    writeln!(out, "[{}] {}", tag.as_str().unwrap_or("?"), l.text)?;
                }
            }
            let s = &batch.summary;
            writeln!(
                out,
                "runs={} alpha={} method={} final_entropy={:.4}±{:.4} generated_wps={:.2}±{:.2}",
                s.runs,
                s.alpha,
                s.method,
                s.final_entropy.mean,
                s.final_entropy.std,
                s.generated_wps.mean,
                s.generated_wps.std
            )?;
        }
        Command::Predict(args) => {
            let o = cmd_predict(args, seed, exec)?;
            write!(out, "{}", o.report.table())?;
            writeln!(
                out,
                "alpha selected on {} validation episodes",
                o.validation_episodes
            )?;
        }
        Command::Serve(args) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cmd_serve(args, async {
                tokio::signal::ctrl_c().await.ok();
            }))?;
        }
    }
    Ok(())
}
