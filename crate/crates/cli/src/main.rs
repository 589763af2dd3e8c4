use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dreamtip::config::{ExperimentConfig, Variant};
use dreamtip::evalkit::{emit_plots, EvalReport};
use dreamtip::pipeline::{self, PipelineError};
use dreamtip::replay::SequenceStore;
use dreamtip::tip::{generate_extractor, obs_schema, probe_fixture, ExtractorSpec, LlmClient, MockClient, RegisteredExtractor};

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const ADAPTED_FILE: &str = "adapted.ckpt";
const BUFFER_DIR: &str = "sim_buffer";

#[derive(Parser)]
#[command(name = "dreamtip", version, about = "Train, adapt and evaluate world-model locomotion agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Extractor spec (JSON) from `tip-gen`; the reference extractor otherwise.
    #[arg(long)]
    extractor: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Interleaved world-model and PPO training in the source domain.
    Train(Common),
    /// Collect target episodes with the frozen policy and adapt the world model.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sim buffer archive; `sim_buffer/` next to the checkpoint by default.
        #[arg(long)]
        buffer: Option<PathBuf>,
        /// Target-domain episodes per round.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate a checkpoint and write the CSV and plots.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the variant matrix over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Training seeds; `--seed` alone when empty.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Generate and validate a TIP extractor.
    TipGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "legged robot crossing stairs, gaps, climbs, crawl-ways and tilted passages")]
        task: String,
        #[arg(long, default_value_t = 16)]
        scan_rays: usize,
        #[arg(long, conflicts_with = "live_llm")]
        mock_llm: bool,
        #[arg(long)]
        live_llm: bool,
    },
}

enum Failure {
    Input(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Numeric(m) | Failure::Other(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            return Failure::Numeric(msg);
        }
        match e {
            PipelineError::Config(_)
            | PipelineError::Input(_)
            | PipelineError::AdaptDisabled
            | PipelineError::Checkpoint(_)
            | PipelineError::Tip(_) => Failure::Input(msg),
            _ => Failure::Other(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(format!("io: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(common) => train(&common),
        Command::Adapt {
            common,
            checkpoint,
            buffer,
            n,
        } => adapt(&common, &checkpoint, buffer, n),
        Command::Eval { common, checkpoint } => eval(&common, &checkpoint),
        Command::Ablate { common, seeds } => ablate(&common, seeds),
        Command::TipGen {
            out,
            task,
            scan_rays,
            mock_llm: _,
            live_llm,
        } => tip_gen(&out, &task, scan_rays, live_llm),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let config = match path {
        Some(p) => ExperimentConfig::load(p).map_err(PipelineError::from)?,
        None => ExperimentConfig::default(),
    };
    Ok(config.resolved().map_err(PipelineError::from)?)
}

fn load_extractor(path: Option<&Path>) -> Result<RegisteredExtractor, Failure> {
    let Some(path) = path else {
        return Ok(RegisteredExtractor::handcrafted());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let spec: ExtractorSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(RegisteredExtractor::register(spec, &probe_fixture()).map_err(PipelineError::from)?)
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Refuses to write any output over the given input file.
fn guard_output(input: &Path, output: &Path) -> Result<(), Failure> {
    let same = match (fs::canonicalize(input), fs::canonicalize(output)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(Failure::Input(format!("refusing to overwrite input {}", input.display())));
    }
    Ok(())
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<(), Failure> {
    fs::write(dir.join("config.json"), json(config))?;
    fs::write(dir.join("config_digest.txt"), config.digest() + "\n")?;
    Ok(())
}

fn train(common: &Common) -> Result<(), Failure> {
    let config = load_config(common.config.as_deref())?;
    let extractor = load_extractor(common.extractor.as_deref())?;
    let art = pipeline::train(&config, common.seed, &extractor)?;
    fs::create_dir_all(&common.out)?;
    write_config(&common.out, &config)?;
    art.checkpoint
        .save(&common.out.join(CHECKPOINT_FILE))
        .map_err(PipelineError::from)?;
    art.sim_store
        .save(&common.out.join(BUFFER_DIR))
        .map_err(PipelineError::from)?;
    let log = serde_json::json!({
        "config_digest": config.digest(),
        "seed": common.seed,
        "checkpoint_digest": art.checkpoint.digest(),
        "iterations": art.log,
    });
    fs::write(common.out.join("train_log.json"), json(&log))?;
    println!(
        "trained {} iterations, {} episodes in buffer, checkpoint {}",
        art.log.len(),
        art.sim_store.len_episodes(),
        art.checkpoint.digest()
    );
    Ok(())
}

fn adapt(common: &Common, checkpoint: &Path, buffer: Option<PathBuf>, n: Option<usize>) -> Result<(), Failure> {
    let config = load_config(common.config.as_deref())?;
    if !config.ablation.adapt_enabled {
        return Err(PipelineError::AdaptDisabled.into());
    }
    let n = n.unwrap_or(config.adaptation.n_episodes);
    if n < 1 {
        return Err(Failure::Input("--n must be at least 1".into()));
    }
    let extractor = load_extractor(common.extractor.as_deref())?;
    let (agent, ck) = pipeline::load_agent(&config, checkpoint)?;
    let buffer = buffer.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(BUFFER_DIR));
    if !buffer.join("index.json").is_file() {
        return Err(Failure::Input(format!("missing buffer archive {}", buffer.display())));
    }
    let store = SequenceStore::load(&buffer, "sim").map_err(|e| Failure::Input(format!("{}: {e}", buffer.display())))?;
    if let Some(expected) = ck.metadata.get("sim_store_digest").and_then(|d| d.as_str()) {
        if expected != store.content_digest() {
            return Err(Failure::Input(format!(
                "buffer {} does not match the checkpoint",
                buffer.display()
            )));
        }
    }
    guard_output(checkpoint, &common.out.join(ADAPTED_FILE))?;
    let art = pipeline::adapt(&config, common.seed, &agent, &store, &extractor, n)?;

    fs::create_dir_all(&common.out)?;
    write_config(&common.out, &config)?;
    art.checkpoint
        .save(&common.out.join(ADAPTED_FILE))
        .map_err(PipelineError::from)?;
    let report = serde_json::json!({
        "config_digest": config.digest(),
        "seed": common.seed,
        "input_checkpoint_digest": ck.digest(),
        "adapted_checkpoint_digest": art.checkpoint.digest(),
        "rounds": art.reports,
    });
    fs::write(common.out.join("adapt_report.json"), json(&report))?;
    if let Some(last) = art.reports.last() {
        fs::write(common.out.join("drift.csv"), last.drift_csv())?;
        println!(
            "adapted on {} episodes, {} updates, forgetting {:?}",
            last.n_episodes, last.updates, last.forgetting
        );
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let config = load_config(common.config.as_deref())?;
    let (agent, _) = pipeline::load_agent(&config, checkpoint)?;
    let report = pipeline::evaluate(&config, &agent)?;
    write_reports(&common.out, &[report], &config)
}

fn write_reports(out: &Path, reports: &[EvalReport], config: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    write_config(out, config)?;
    emit_plots(reports, out).map_err(PipelineError::from)?;
    fs::write(out.join("eval_report.json"), json(&reports))?;
    for r in reports {
        for s in &r.summaries {
            println!(
                "{} {} {:.3}: reward {:.2} ± {:.2}, success {:.2}",
                r.run_id,
                s.task.name(),
                s.difficulty,
                s.mean_reward,
                s.std_reward,
                s.success_rate
            );
        }
    }
    Ok(())
}

fn ablate(common: &Common, seeds: Vec<u64>) -> Result<(), Failure> {
    let config = load_config(common.config.as_deref())?;
    let extractor = load_extractor(common.extractor.as_deref())?;
    let seeds = if seeds.is_empty() { vec![common.seed] } else { seeds };
    let mut reports = Vec::new();
    for &seed in &seeds {
        for o in pipeline::run_ablation(&config, seed, &extractor, &Variant::ALL)? {
            let mut r = o.report;
            if seeds.len() > 1 {
                r.run_id = format!("{}-s{seed}", r.run_id);
                r.records.iter_mut().for_each(|t| t.run_id.clone_from(&r.run_id));
            }
            reports.push(r);
        }
    }
    write_reports(&common.out, &reports, &config)
}

fn tip_gen(out: &Path, task: &str, scan_rays: usize, live: bool) -> Result<(), Failure> {
    let client = client(live)?;
    let spec = generate_extractor(task, &obs_schema(scan_rays), client.as_ref()).map_err(PipelineError::from)?;
    let passed = spec.validation_report.as_ref().is_some_and(|r| r.passed());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, json(&spec))?;
    if !passed {
        return Err(Failure::Input(format!("extractor `{}` failed validation", spec.name)));
    }
    println!("extractor `{}` validated, {} outputs", spec.name, spec.output_dim);
    Ok(())
}

#[cfg(feature = "live-llm")]
fn client(live: bool) -> Result<Box<dyn LlmClient>, Failure> {
    if live {
        let c = dreamtip::tip::LiveClient::from_env().map_err(|e| Failure::Input(e.to_string()))?;
        return Ok(Box::new(c));
    }
    Ok(Box::new(MockClient))
}

#[cfg(not(feature = "live-llm"))]
fn client(live: bool) -> Result<Box<dyn LlmClient>, Failure> {
    if live {
        return Err(Failure::Input("built without the `live-llm` feature".into()));
    }
    Ok(Box::new(MockClient))
}
