use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use duotts::Result;
use duotts_cli::config::RunConfig;
use duotts_cli::run::{RunDir, TrainStep};
use duotts_cli::synth::{parse_text, SynthMode, SynthRequest};
use duotts_cli::{datagen, eval, exit_code, forget, pipeline, synth, train, EXIT_ARGUMENT};

#[derive(Parser)]
#[command(name = "duotts", version, about = "Dual-branch streaming TTS on a synthetic speech world")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Streaming,
    Offline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, split, alignment pairs and quadruples.
    Datagen,
    /// Run one training step.
    Train {
        /// pretrain, align, generate, baseline or decoder.
        #[arg(long)]
        stage: String,
        /// 1 or 2 for align and generate.
        #[arg(long)]
        step: Option<u8>,
    },
    /// Synthesize speech for response text in the voice of a prompt.
    Synth {
        /// Prompt frames file.
        #[arg(long)]
        prompt: PathBuf,
        /// Phoneme ids separated by spaces or commas.
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "streaming")]
        mode: Mode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Sampling seed; the run seed when absent.
        #[arg(long = "sample-seed")]
        sample_seed: Option<u64>,
    },
    /// Score the final model on the held-out quadruples.
    Eval,
    /// Compare text ability before Stage II, after it and under full finetuning.
    Forget,
    /// datagen, all training steps, eval and forget.
    Pipeline,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let dir = RunDir::new(&cli.dir);
    match cli.command {
        Command::Datagen => {
            let r = datagen::datagen(&cfg, &dir)?;
            print!("{}", r.summary());
        }
        Command::Train { stage, step } => {
            let step = TrainStep::parse(&stage, step)?;
            let o = train::train(&cfg, &dir, step)?;
            println!(
                "{}: loss {} -> {} in {:.1}s",
                step.name(),
                fmt_loss(o.first_loss),
                fmt_loss(o.final_loss),
                o.seconds
            );
        }
        Command::Synth {
            prompt,
            text,
            mode,
            out,
            sample_seed,
        } => {
            let req = SynthRequest {
                prompt,
                text: parse_text(&text, cfg.world.alphabet)?,
                mode: match mode {
                    Mode::Streaming => SynthMode::Streaming,
                    Mode::Offline => SynthMode::Offline,
                },
                out,
                seed: sample_seed,
            };
            let o = synth::synth(&cfg, &dir, &req)?;
            println!(
                "{} tokens, {} frames, {} backbone steps, {:.2} tokens/step",
                o.stats.tokens,
                o.frames.len(),
                o.stats.backbone_steps,
                o.stats.tokens_per_step
            );
            if let Some((first, tps)) = o.wall {
                println!("first event after {:.2} ms, {tps:.1} tokens/s", first * 1e3);
            }
        }
        Command::Eval => {
            eval::eval(&cfg, &dir)?;
            print!("{}", std::fs::read_to_string(dir.report("eval.txt"))?);
        }
        Command::Forget => {
            let r = forget::forget(&cfg, &dir)?;
            print!("{}", r.table());
        }
        Command::Pipeline => {
            let o = pipeline::pipeline(&cfg, &dir, |name, s| eprintln!("{name:<12} {s:>8.1}s"))?;
            print!("{}", std::fs::read_to_string(dir.report("eval.txt"))?);
            print!("{}", o.forgetting.table());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn fmt_loss(l: Option<f64>) -> String {
    l.map_or("-".into(), |l| format!("{l:.4}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGUMENT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

