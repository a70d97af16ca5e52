use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panelforge_core::annotation::load_corpus;
use panelforge_core::checkpoint::CheckpointArchive;
use panelforge_core::compose::{composite_page, PageScript};
use panelforge_core::dataset::Dataset;
use panelforge_core::diffusion::{generate_panel, FeatureAdapter, Model, PanelSpecDoc};
use panelforge_core::evaluation::{run_eval, BrightRegionDetector, EvalOptions, Oracles, PaletteTextScorer, ToyEmbedder};
use panelforge_core::imaging::load_rgb;
use panelforge_core::synthetic;
use panelforge_core::training::{
    load_pipeline, train_stage1, train_stage2, write_loss_csv, LossRecord, TrainConfig, TrainObserver,
};
use panelforge_core::Error;
use panelforge_service::ServiceConfig;
use sha2::{Digest, Sha256};

/// Character- and layout-conditioned panel generation at toy scale.
#[derive(Parser)]
#[command(name = "panelforge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, summarize, split or synthesize annotation corpora.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train the generator (stage1) or the feature adapter (stage2).
    #[command(subcommand)]
    Train(TrainCommand),
    /// Generate one panel per annotated panel and report metrics.
    Eval(EvalArgs),
    /// Generate one panel from a spec file.
    Generate(GenerateArgs),
    /// Generate and composite a page from a page script.
    Page(PageArgs),
    /// Run the HTTP generation service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Check every annotation and image under a corpus root.
    Validate {
        root: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Page, panel, character and dialog counts.
    Stats {
        root: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Hold out pages per series into <out>/train and <out>/eval.
    Split {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        eval_per_series: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a procedurally drawn fixture corpus.
    Synth {
        #[arg(value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    /// Ten single-panel pages.
    Overfit,
    /// Ten two-panel pages sharing a character.
    Pair,
}

#[derive(Subcommand)]
enum TrainCommand {
    Stage1(TrainArgs),
    Stage2 {
        #[command(flatten)]
        common: TrainArgs,
        /// Stage-1 checkpoint holding the frozen generator.
        #[arg(long)]
        stage1: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root.
    #[arg(long)]
    data: PathBuf,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step loss log.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluate only the held-out part of a series split.
    #[arg(long)]
    eval_per_series: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Request JSON; character `id`s are crop image paths relative to it.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PageArgs {
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Page metadata JSON (defaults to the output path with .json).
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// TOML service config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    queue_depth: Option<usize>,
}

/// Exit codes: 1 runtime failure, 2 invalid input, 3 missing or unusable
/// checkpoint.
enum Failure {
    Runtime(String),
    Input(String),
    Checkpoint(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Schema { .. }
            | Error::Validation { .. }
            | Error::TooManyCharacters { .. }
            | Error::Config(_)
            | Error::SeriesTooSmall { .. } => Failure::Input(e.to_string()),
            Error::Checkpoint(_) => Failure::Checkpoint(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Input(_) => 2,
            Failure::Checkpoint(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Input(m) | Failure::Checkpoint(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Data(c) => data(c),
        Command::Train(c) => train(c),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Page(a) => page(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<CheckpointArchive, Failure> {
    if !path.is_file() {
        return Err(Failure::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    CheckpointArchive::load(path).map_err(|e| Failure::Checkpoint(e.to_string()))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn data(c: DataCommand) -> Outcome {
    match c {
        DataCommand::Validate { root, json } => {
            let ds = Dataset::load(&root)?;
            let s = ds.corpus().stats();
            if json {
                print_json(&serde_json::json!({ "valid": true, "stats": s }));
            } else {
                println!("ok: {} pages, {} panels", s.pages, s.panels);
            }
        }
        DataCommand::Stats { root, json } => {
            let s = load_corpus(&root)?.stats();
            if json {
                print_json(&s);
            } else {
                println!(
                    "pages {}  panels {}  characters {}  dialogs {}  series {}",
                    s.pages, s.panels, s.char_instances, s.dialogs, s.series
                );
            }
        }
        DataCommand::Split {
            root,
            out,
            eval_per_series,
            seed,
        } => {
            let ds = Dataset::load(&root)?;
            let (train, eval) = ds.split(eval_per_series, seed)?;
            train.write(&out.join("train"))?;
            eval.write(&out.join("eval"))?;
            println!("train {} pages, eval {} pages", train.pages().len(), eval.pages().len());
        }
        DataCommand::Synth { kind, out } => {
            let ds = match kind {
                FixtureKind::Overfit => synthetic::overfit_fixture()?,
                FixtureKind::Pair => synthetic::pair_fixture()?,
            };
            ds.write(&out)?;
            println!("wrote {} pages to {}", ds.pages().len(), out.display());
        }
    }
    Ok(())
}

struct Progress {
    started: Instant,
    every: u64,
    dir: Option<PathBuf>,
}

impl TrainObserver for Progress {
    fn on_step(&mut self, r: &LossRecord) {
        if r.step % self.every == 0 || r.step == 1 {
            let parts: Vec<String> = r.components.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
            log::info!(
                "step {} loss {:.4} [{}] {:.1}s",
                r.step,
                r.total,
                parts.join(", "),
                self.started.elapsed().as_secs_f64()
            );
        }
    }

    fn on_checkpoint(&mut self, a: &CheckpointArchive) -> panelforge_core::Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}-step{:06}.ckpt", a.kind, a.step));
            a.save(&path)?;
            log::info!("checkpoint {}", path.display());
        }
        Ok(())
    }
}

fn train_config(args: &TrainArgs, stage: u8) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_toml(&p.display().to_string(), &String::from_utf8_lossy(&read(p)?))?,
        None if stage == 1 => TrainConfig::stage1(),
        None => TrainConfig::stage2(),
    };
    if cfg.stage != stage {
        return Err(Failure::Input(format!("config is for stage {}, command is stage{stage}", cfg.stage)));
    }
    if args.steps.is_some() {
        cfg.steps = args.steps;
    }
    Ok(cfg)
}

fn train(c: TrainCommand) -> Outcome {
    let (args, stage1) = match &c {
        TrainCommand::Stage1(a) => (a, None),
        TrainCommand::Stage2 { common, stage1 } => (common, Some(stage1)),
    };
    let cfg = train_config(args, if stage1.is_some() { 2 } else { 1 })?;
    let ds = Dataset::load(&args.data)?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut progress = Progress {
        started: Instant::now(),
        every: 25,
        dir: args.out.parent().map(Path::to_path_buf).filter(|_| cfg.checkpoint_every > 0),
    };
    let out = match stage1 {
        None => train_stage1(&ds, &cfg, resume.as_ref(), &mut progress)?,
        Some(p) => {
            let s1 = load_checkpoint(p)?;
            train_stage2(&ds, &s1, &cfg, resume.as_ref(), &mut progress)?
        }
    };
    out.checkpoint.save(&args.out)?;
    if let Some(csv) = &args.loss_csv {
        write_loss_csv(csv, &out.log)?;
    }
    println!(
        "wrote {} (step {}, config {})",
        args.out.display(),
        out.checkpoint.step,
        &cfg.config_hash()[..12]
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let archive = load_checkpoint(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    let ds = match a.eval_per_series {
        Some(n) => ds.split(n, a.seed)?.1,
        None => ds,
    };
    let (_ps, model, adapter) = load_pipeline(&archive)?;
    let defaults = EvalOptions::default();
    let opts = EvalOptions {
        seed: a.seed,
        steps: a.steps,
        alpha: a.alpha.unwrap_or(defaults.alpha),
        beta: if adapter.is_some() { a.beta.unwrap_or(defaults.beta) } else { 0.0 },
        ..defaults
    };
    let embedder = ToyEmbedder::new(a.seed)?;
    let text = PaletteTextScorer::new(synthetic::palette());
    let detector = BrightRegionDetector::default();
    let oracles = Oracles {
        embedder: Some(&embedder),
        text: Some(&text),
        detector: Some(&detector),
    };
    let adapter = adapter.as_ref().map(|a| a as &dyn FeatureAdapter);
    let report = run_eval(&model, adapter, &ds, &oracles, &opts)?;
    report.check_ranges()?;
    if a.json {
        print_json(&report);
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

/// Resolve crop paths relative to the request file and generate.
fn render(model: &Model, adapter: Option<&dyn FeatureAdapter>, doc: &PanelSpecDoc, base: &Path) -> Result<image::RgbImage, Failure> {
    doc.validate(model.n_c(), model.config.size_multiple())?;
    let spec = doc.resolve(|i, id| {
        let p = base.join(id);
        if !p.is_file() {
            return Err(Error::validation(format!("characters[{i}].id"), format!("crop {} not found", p.display())));
        }
        load_rgb(&p)
    })?;
    Ok(generate_panel(model, adapter, &spec)?)
}

fn spec_hash(doc: &PanelSpecDoc, archive: &CheckpointArchive) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(doc).expect("spec serializes"));
    h.update(archive.config_hash.as_bytes());
    hex::encode(h.finalize())
}

fn generate(a: GenerateArgs) -> Outcome {
    let bytes = read(&a.spec)?;
    let doc = PanelSpecDoc::from_json(&a.spec.display().to_string(), &bytes)?;
    let archive = load_checkpoint(&a.ckpt)?;
    let (_ps, model, adapter) = load_pipeline(&archive)?;
    let base = a.spec.parent().unwrap_or(Path::new("."));
    let t = Instant::now();
    let img = render(&model, adapter.as_ref().map(|a| a as &dyn FeatureAdapter), &doc, base)?;
    img.save(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    println!(
        "wrote {} ({}x{}) in {} ms, config {}",
        a.out.display(),
        img.width(),
        img.height(),
        t.elapsed().as_millis(),
        &spec_hash(&doc, &archive)[..12]
    );
    Ok(())
}

fn page(a: PageArgs) -> Outcome {
    let bytes = read(&a.script)?;
    let script = PageScript::from_json(&a.script.display().to_string(), &bytes)?;
    script.validate()?;
    let archive = load_checkpoint(&a.ckpt)?;
    let (_ps, model, adapter) = load_pipeline(&archive)?;
    let adapter = adapter.as_ref().map(|a| a as &dyn FeatureAdapter);
    let base = a.script.parent().unwrap_or(Path::new("."));
    let t = Instant::now();
    let mut panels = Vec::new();
    for (spec, p) in script.panel_specs().iter().zip(&script.panels) {
        panels.push((p.bbox, render(&model, adapter, spec, base)?));
    }
    let img = composite_page(script.width, script.height, &panels)?;
    img.save(&a.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    let meta_path = a.meta.unwrap_or_else(|| a.out.with_extension("json"));
    let meta = serde_json::to_string_pretty(&script.metadata()).expect("metadata serializes");
    std::fs::write(&meta_path, meta).map_err(|e| Failure::Runtime(format!("{}: {e}", meta_path.display())))?;
    println!(
        "wrote {} ({} panels) in {} ms",
        a.out.display(),
        panels.len(),
        t.elapsed().as_millis()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = String::from_utf8_lossy(&read(p)?).into_owned();
            let de = toml::Deserializer::new(&text);
            serde_path_to_error::deserialize::<_, ServiceConfig>(de).map_err(|e| {
                Failure::from(Error::Schema {
                    file: p.display().to_string(),
                    field: e.path().to_string(),
                    message: e.inner().to_string(),
                })
            })?
        }
        None => ServiceConfig::default(),
    };
    cfg.checkpoint = Some(a.ckpt.clone());
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if let Some(d) = a.data_dir {
        cfg.data_dir = d;
    }
    if let Some(q) = a.queue_depth {
        cfg.queue_depth = q;
    }
    let archive = load_checkpoint(&a.ckpt)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    rt.block_on(panelforge_service::serve(cfg, archive))
        .map_err(|e| Failure::Runtime(e.message))
}
