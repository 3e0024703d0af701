use clap::{Args, Parser, Subcommand};
use layra::corpora::{write_file, Vocabulary};
use layra::error::{Error, Result};
use layra::eval::{rows_from_csv, rows_to_csv, EvalRow};
use layra::experiment::{
    arith_artifact, build_languages, build_report, gen_language_data, lens_profiles, run_arith,
    train_artifact, ArithOp, ArtifactDecl, Evaluator, ExperimentConfig, Workspace,
};
use layra::store::{load_checkpoint, save_checkpoint};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Layer-selective adaptation experiments on synthetic languages.
#[derive(Parser)]
#[command(name = "layra", version)]
struct Cli {
    /// Output directory, overriding the config and the LAYRA_OUT root.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora and evaluation sets.
    GenCorpus {
        #[command(flatten)]
        config: ConfigArg,
        /// Languages to generate; all declared languages when omitted.
        #[arg(long = "language", short)]
        languages: Vec<String>,
        /// Exact training-corpus length in tokens.
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Train a declared run.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        run: String,
        /// Seed for per-seed runs; every configured seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build any declared artifact, training or arithmetic.
    Build {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        artifact: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Checkpoint arithmetic on files.
    #[command(subcommand)]
    Arith(ArithCommand),
    /// Evaluate checkpoints into one CSV per seed.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to these checkpoints (repeatable).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
    },
    /// Aggregate evaluation CSVs into report.md and summary.csv.
    Report {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run every stage of the experiment.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Args)]
struct OutArg {
    /// Output checkpoint path.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ArithCommand {
    /// TARGET + scale·(PHI − THETA).
    Apply {
        target: PathBuf,
        phi: PathBuf,
        theta: PathBuf,
        #[arg(long, default_value_t = layra::arithmetic::DEFAULT_LAMBDA)]
        scale: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// PREVIOUS + scale·(NEW − BASE); BASE defaults to PREVIOUS.
    Series {
        previous: PathBuf,
        new: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = layra::arithmetic::DEFAULT_SERIES_LAMBDA)]
        scale: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// mu·A + (1 − mu)·B.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = layra::arithmetic::DEFAULT_MU, allow_negative_numbers = true)]
        mu: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// INSTRUCT + gamma·(ADAPTED − ADAPTED_FROM).
    Instruct {
        instruct: PathBuf,
        adapted: PathBuf,
        adapted_from: PathBuf,
        #[arg(long, default_value_t = layra::arithmetic::DEFAULT_GAMMA)]
        gamma: f64,
        #[command(flatten)]
        out: OutArg,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    ws: Workspace,
    vocab: Vocabulary,
}

fn context(config: &Path, out_dir: &Option<PathBuf>) -> Result<Ctx> {
    let cfg = ExperimentConfig::load(config)?;
    let ws = match out_dir {
        Some(d) => Workspace::new(d.clone()),
        None => Workspace::for_config(&cfg),
    };
    Ok(Ctx {
        cfg,
        ws,
        vocab: Vocabulary::standard(),
    })
}

fn seeds_for(ctx: &Ctx, id: &str, seed: Option<u64>) -> Result<Vec<u64>> {
    if ctx.cfg.is_shared(id) {
        return Ok(vec![ctx.cfg.seeds[0]]);
    }
    match seed {
        Some(s) if ctx.cfg.seeds.contains(&s) => Ok(vec![s]),
        Some(s) => Err(Error::Config(format!("seed {s} is not in the configured seeds {:?}", ctx.cfg.seeds))),
        None => Ok(ctx.cfg.seeds.clone()),
    }
}

fn build(ctx: &Ctx, id: &str, seed: Option<u64>, train_only: bool) -> Result<()> {
    let decl = ctx.cfg.artifact(id).cloned();
    let shared = ctx.cfg.shared.iter().find(|t| t.id == id).cloned();
    if decl.is_none() && shared.is_none() {
        return Err(Error::Config(format!("no artifact named {id:?} in the config")));
    }
    for s in seeds_for(ctx, id, seed)? {
        let built = match (&shared, &decl) {
            (Some(t), _) | (None, Some(ArtifactDecl::Train(t))) => train_artifact(&ctx.cfg, &ctx.ws, &ctx.vocab, t, s)?,
            (None, Some(ArtifactDecl::Arith(_))) if train_only => {
                return Err(Error::Config(format!("{id} is an arithmetic step; use `build`")))
            }
            (None, Some(ArtifactDecl::Arith(a))) => arith_artifact(&ctx.cfg, &ctx.ws, &ctx.vocab, a, s)?,
            (None, None) => unreachable!(),
        };
        let loss = built.final_loss.map(|l| format!(" final loss {l:.4}")).unwrap_or_default();
        println!("{id} seed {s}: {} {}{loss}", built.hash, built.path.display());
    }
    Ok(())
}

fn arith(cmd: ArithCommand) -> Result<()> {
    let load = |p: &PathBuf| load_checkpoint(p);
    let (op, inputs, base, scale, out) = match cmd {
        ArithCommand::Apply {
            target,
            phi,
            theta,
            scale,
            out,
        } => (ArithOp::Apply, vec![target, phi, theta], None, scale, out.out),
        ArithCommand::Series {
            previous,
            new,
            base,
            scale,
            out,
        } => (ArithOp::Series, vec![previous, new], base, scale, out.out),
        ArithCommand::Merge { a, b, mu, out } => (ArithOp::Merge, vec![a, b], None, mu, out.out),
        ArithCommand::Instruct {
            instruct,
            adapted,
            adapted_from,
            gamma,
            out,
        } => (ArithOp::Instruct, vec![instruct, adapted, adapted_from], None, gamma, out.out),
    };
    let models = inputs.iter().map(load).collect::<Result<Vec<_>>>()?;
    let base = base.as_ref().map(load).transpose()?;
    let refs: Vec<_> = models.iter().collect();
    let result = run_arith(op, &refs, base.as_ref(), scale)?;
    let hash = save_checkpoint(&out, &result)?;
    println!("{} {hash} {}", op.name(), out.display());
    Ok(())
}

fn eval(ctx: &Ctx, seed: Option<u64>, only: &[String]) -> Result<()> {
    let plan: Vec<_> = ctx
        .cfg
        .eval_plan()
        .into_iter()
        .filter(|(c, _, _)| only.is_empty() || only.contains(c))
        .collect();
    let seeds = match seed {
        Some(s) if !ctx.cfg.seeds.contains(&s) => {
            return Err(Error::Config(format!("seed {s} is not in the configured seeds {:?}", ctx.cfg.seeds)))
        }
        Some(s) => vec![s],
        None => ctx.cfg.seeds.clone(),
    };
    let mut evaluator = Evaluator::new();
    for s in seeds {
        let rows = evaluator.evaluate(&ctx.cfg, &ctx.ws, &ctx.vocab, s, &plan)?;
        let path = ctx.ws.eval_path(s);
        write_file(&path, &rows_to_csv(&rows)?)?;
        println!("seed {s}: {} rows {}", rows.len(), path.display());
    }
    Ok(())
}

fn report(ctx: &Ctx) -> Result<()> {
    let mut rows: BTreeMap<u64, Vec<EvalRow>> = BTreeMap::new();
    for &s in &ctx.cfg.seeds {
        let path = ctx.ws.eval_path(s);
        let bytes = std::fs::read(&path)
            .map_err(|_| Error::Data(format!("no evaluation for seed {s} at {}; run `eval` first", path.display())))?;
        rows.insert(s, rows_from_csv(&bytes)?);
    }
    let lens = lens_profiles(&ctx.cfg, &ctx.ws, &ctx.vocab, &mut Evaluator::new())?;
    let r = build_report(&ctx.cfg, &rows, &lens)?;
    r.write(&ctx.ws)?;
    println!("{}", ctx.ws.report_path().display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            config,
            languages,
            tokens,
        } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            let langs = build_languages(&ctx.cfg)?;
            let names: Vec<String> = if languages.is_empty() {
                ctx.cfg.language_names().iter().map(|s| s.to_string()).collect()
            } else {
                languages
            };
            for n in &names {
                let s = gen_language_data(&ctx.cfg, &ctx.ws, &langs, &ctx.vocab, n, tokens)?;
                println!(
                    "{}: train {} tokens, heldout {} tokens, cloze {} items, instruction {} eval / {} train items",
                    s.language,
                    s.train_tokens,
                    s.heldout_tokens,
                    s.cloze_items,
                    s.instruction_eval_items,
                    s.instruction_train_items
                );
            }
            println!("vocab {} ({} tokens)", ctx.vocab.hash(), ctx.vocab.len());
            Ok(())
        }
        Command::Train { config, run, seed } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            build(&ctx, &run, seed, true)
        }
        Command::Build { config, artifact, seed } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            build(&ctx, &artifact, seed, false)
        }
        Command::Arith(cmd) => arith(cmd),
        Command::Eval {
            config,
            seed,
            checkpoints,
        } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            eval(&ctx, seed, &checkpoints)
        }
        Command::Report { config } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            report(&ctx)
        }
        Command::Pipeline { config } => {
            let ctx = context(&config.config, &cli.out_dir)?;
            let out = layra::experiment::run_pipeline(&ctx.cfg, &ctx.ws, &mut |m| eprintln!("{m}"))?;
            for ((seed, id), h) in &out.hashes {
                println!("{seed}\t{id}\t{h}");
            }
            println!("{}", ctx.ws.report_path().display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NumericalAbort { .. } | Error::NonFinite(_) => 3,
        _ => 2,
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
