mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use omni_core::audio::{AudioEncoder, Waveform};
use omni_core::fusion::{embedding_checksum, project_visual, Connector};
use omni_core::train::{
    build_stage_plan, compare_strategies, run_stage, MetricTrace, MixRecipe as StrategyRecipe, OmniModel, StageId,
    Strategy, SyntheticSuite,
};
use omni_core::vision::{local_global_pool, ImageInput, VisionEncoder};
use omni_core::{gradsuite, tensor_io, Tensor};
use omni_forge::record::{read_records, records_to_jsonl};
use omni_forge::{
    filter_record, mix_datasets, run_pipeline, Clients, FixtureClient, HttpClient, MixRecipe, ServiceClient,
    ServiceRole, VideoRecord,
};

use crate::config::RunConfig;

/// Toy omni-modal pipeline: vision pooling, audio tokens, staged training and
/// data curation.
#[derive(Parser)]
#[command(name = "omni", version)]
struct Cli {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode and pool a binary PPM image, write the pooled grid.
    Pool {
        image: PathBuf,
        /// Output tensor file [default: <image>.pooled.tensor].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode a 16 kHz mono WAV file into audio tokens.
    Audio {
        wav: PathBuf,
        /// Also write the token matrix (all chunks stacked) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy model on one stage plan (or all five in order).
    Train {
        /// S1-align, S1-sft, S2, S3-align, S3-joint or `all`.
        #[arg(long)]
        stage: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Dataset shrink factor; overrides `train.shrink`.
        #[arg(long)]
        shrink: Option<f64>,
        /// Steps per stage; overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Loss trace CSV (stage,step,task,loss).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare training strategies on the interference suite.
    Compare {
        /// Comma-separated: progressive, direct, balanced.
        #[arg(long, value_delimiter = ',', default_value = "progressive,direct")]
        recipes: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Report TOML.
        #[arg(long)]
        out: PathBuf,
        /// Curve CSV (strategy,seed,stage,step,task,loss).
        #[arg(long)]
        curves: PathBuf,
    },
    /// Finite-difference check of every differentiable op, or one by name.
    Gradcheck {
        #[arg(default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Data curation.
    #[command(subcommand)]
    Forge(ForgeCommand),
    /// Configuration helpers.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Subcommand)]
enum ForgeCommand {
    /// Run the subtitle filters; write the surviving records.
    Filter {
        /// Video records, one JSON object per line.
        #[arg(long = "in")]
        input: PathBuf,
        /// Minimum English-token ratio; overrides `forge.filter.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Minimum subtitle word count; overrides `forge.filter.min_words`.
        #[arg(long)]
        min_words: Option<usize>,
        #[command(flatten)]
        service: ServiceArgs,
        /// Records that passed every filter.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full curation: filters, QA generation and subtitling entries.
    Qa {
        /// Video records, one JSON object per line.
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        service: ServiceArgs,
        /// Seed for picking subtitling entries.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample and shuffle manifests according to a recipe.
    Mix {
        /// TOML recipe listing `[[source]]` manifests.
        #[arg(long)]
        recipe: PathBuf,
        /// Overrides the recipe's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Mixed manifest output.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Print the effective configuration as TOML.
    Show,
}

#[derive(Args)]
#[group(skip)]
#[command(group(ArgGroup::new("service").required(true).args(["fixtures", "endpoint"])))]
struct ServiceArgs {
    /// Replay recorded replies from this directory.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Live services at `<endpoint>/<role>` (roles: asr, filter-llm, qa-vlm).
    #[arg(long)]
    endpoint: Option<String>,
    /// Live request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

struct ServiceSet(Vec<Box<dyn ServiceClient>>);

impl ServiceSet {
    fn new(args: &ServiceArgs) -> Result<Self> {
        let roles = [ServiceRole::Asr, ServiceRole::FilterLlm, ServiceRole::QaVlm];
        let clients = roles
            .into_iter()
            .map(|role| -> Result<Box<dyn ServiceClient>> {
                Ok(match (&args.fixtures, &args.endpoint) {
                    (Some(dir), _) => {
                        if !dir.is_dir() {
                            bail!("fixture directory {} does not exist", dir.display());
                        }
                        Box::new(FixtureClient::new(role, dir))
                    }
                    (None, Some(url)) => Box::new(HttpClient::new(
                        role,
                        format!("{}/{role}", url.trim_end_matches('/')),
                        Duration::from_secs(args.timeout),
                    )?),
                    (None, None) => bail!("either --fixtures or --endpoint is required"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self(clients))
    }

    fn clients(&self) -> Clients<'_> {
        Clients { asr: self.0[0].as_ref(), filter: self.0[1].as_ref(), qa: self.0[2].as_ref() }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_pool(cfg: &RunConfig, image: &Path, out: Option<PathBuf>) -> Result<()> {
    if !image.exists() {
        bail!("{} does not exist", image.display());
    }
    let input = ImageInput::load_ppm(image)?;
    let encoder = VisionEncoder::from_config(&cfg.vision);
    let grid = encoder.patchify(&input)?;
    let pooled = local_global_pool(&grid, &encoder.scorer)?;
    let conn = Connector::seeded(pooled.channels(), cfg.fusion.connector_hidden, cfg.fusion.llm_dim, cfg.fusion.seed);
    let items = project_visual(&pooled, &conn)?;
    let out = out.unwrap_or_else(|| image.with_extension("pooled.tensor"));
    tensor_io::save(&out, pooled.features())?;
    println!(
        "tokens: {} (pooled {}×{}→{}×{})",
        pooled.tokens(),
        grid.rows(),
        grid.cols(),
        pooled.rows(),
        pooled.cols()
    );
    println!("visual items: {}", items.len());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_audio(cfg: &RunConfig, wav: &Path, out: Option<PathBuf>) -> Result<()> {
    let wave = Waveform::from_wav(wav)?;
    let encoder = AudioEncoder::from_config(&cfg.audio)?;
    let chunks = encoder.encode(&wave)?;
    let tokens: usize = chunks.iter().map(|c| c.shape()[0]).sum();
    let data: Vec<f32> = chunks.iter().flat_map(|c| c.data().iter().copied()).collect();
    let n = chunks.len();
    println!("{tokens} audio tokens, {n} chunk{}", if n == 1 { "" } else { "s" });
    println!("checksum: {}", embedding_checksum(&data));
    if let Some(out) = out {
        tensor_io::save(&out, &Tensor::new(vec![tokens, cfg.audio.fused_dim()], data)?)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, stage: &str, seed: u64, out: &Path) -> Result<()> {
    let stages: Vec<StageId> =
        if stage.eq_ignore_ascii_case("all") { StageId::PROGRESSIVE.to_vec() } else { vec![stage.parse()?] };
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed ^= seed;
    let mut model = OmniModel::new(&model_cfg)?;
    let suite = SyntheticSuite::new(&cfg.model, seed, cfg.train.noise)?;
    let settings = cfg.train.settings();
    let mut trace = MetricTrace::default();
    for (i, id) in stages.iter().enumerate() {
        let plan = build_stage_plan(*id, cfg.train.shrink)?;
        eprintln!("training {id} for {} steps", settings.steps);
        let t = run_stage(&plan, &mut model, &suite, seed.wrapping_add(i as u64), &settings)?;
        if let Some(last) = t.steps.last() {
            for (task, loss) in &last.losses {
                println!("{id}\t{task}\t{loss:.6}");
            }
        }
        trace.extend(t);
    }
    let mut w = create(out)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, recipes: &[Strategy], seeds: &[u64], out: &Path, curves: &Path) -> Result<()> {
    let shrink = cfg.compare.shrink;
    let recipes: Vec<StrategyRecipe> =
        recipes.iter().map(|s| StrategyRecipe::standard(*s, shrink)).collect::<Result<_, _>>()?;
    let report = compare_strategies(&recipes, seeds, &cfg.compare)?;
    for run in &report.runs {
        let loss = run.final_loss.get(omni_core::train::compare::STAGE1_TASK).copied().unwrap_or(f64::NAN);
        println!("{}\tseed {}\t{} {loss:.6}", run.strategy.as_str(), run.seed, omni_core::train::compare::STAGE1_TASK);
    }
    if let Some(t) = &report.trend {
        println!(
            "trend: progressive ≤ direct-mix on {} in {}/{} seeds",
            t.task, t.progressive_not_worse, t.seeds_compared
        );
    }
    std::fs::write(out, report.to_toml()?).with_context(|| format!("writing {}", out.display()))?;
    let mut w = create(curves)?;
    report.write_curves(&mut w)?;
    w.flush()?;
    eprintln!("wrote {} and {}", out.display(), curves.display());
    Ok(())
}

fn cmd_gradcheck(op: &str, seeds: u64) -> Result<()> {
    let reports = gradsuite::run_suite(Some(op), seeds)?;
    println!("{:<26} {:>5} {:>12}  status", "op", "seeds", "max_rel_err");
    for r in &reports {
        println!("{:<26} {:>5} {:>12.3e}  {}", r.op, r.seeds, r.max_error, if r.passed { "pass" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} op(s) exceeded the {:e} tolerance", gradsuite::TOLERANCE);
    }
    Ok(())
}

fn cmd_forge(cfg: &RunConfig, cmd: ForgeCommand) -> Result<()> {
    match cmd {
        ForgeCommand::Filter { input, threshold, min_words, service, out } => {
            let mut fcfg = cfg.forge.filter.clone();
            fcfg.threshold = threshold.unwrap_or(fcfg.threshold);
            fcfg.min_words = min_words.unwrap_or(fcfg.min_words);
            let records = read_records(&input)?;
            let services = ServiceSet::new(&service)?;
            let c = services.clients();
            let mut kept = Vec::new();
            for r in &records {
                let (subtitle, verdicts) = filter_record(r, c.asr, c.filter, &fcfg);
                let failed = verdicts.iter().find(|v| !v.pass);
                match failed {
                    Some(v) => println!("{}\tfail\t{}\t{}", r.id, v.stage.as_str(), v.detail),
                    None => {
                        println!("{}\tpass", r.id);
                        kept.push(VideoRecord { subtitle, ..r.clone() });
                    }
                }
            }
            std::fs::write(&out, records_to_jsonl(&kept)?)?;
            eprintln!("kept {}/{} records, wrote {}", kept.len(), records.len(), out.display());
        }
        ForgeCommand::Qa { input, service, seed, out } => {
            let records = read_records(&input)?;
            let services = ServiceSet::new(&service)?;
            let (manifest, log) = run_pipeline(&records, &services.clients(), &cfg.forge, seed)?;
            for line in log {
                eprintln!("{line}");
            }
            manifest.write(&out)?;
            for (task, n) in &manifest.header.counts {
                println!("{task}\t{n}");
            }
            eprintln!("wrote {}", out.display());
        }
        ForgeCommand::Mix { recipe, seed, out } => {
            let (recipe, manifests) = MixRecipe::load(&recipe)?;
            let seed = seed.unwrap_or(recipe.seed);
            let mixed = mix_datasets(&recipe, &manifests, seed)?;
            mixed.write(&out)?;
            for (source, n) in &mixed.header.counts {
                println!("{source}\t{n}");
            }
            eprintln!("wrote {} entries to {}", mixed.entries.len(), out.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Pool { image, out } => cmd_pool(&cfg, &image, out),
        Command::Audio { wav, out } => cmd_audio(&cfg, &wav, out),
        Command::Train { stage, seed, shrink, steps, out } => {
            cfg.train.shrink = shrink.unwrap_or(cfg.train.shrink);
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.validate()?;
            cmd_train(&cfg, &stage, seed, &out)
        }
        Command::Compare { recipes, seeds, out, curves } => cmd_compare(&cfg, &recipes, &seeds, &out, &curves),
        Command::Gradcheck { op, seeds } => cmd_gradcheck(&op, seeds),
        Command::Forge(f) => cmd_forge(&cfg, f),
        Command::Config(ConfigCommand::Show) => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
