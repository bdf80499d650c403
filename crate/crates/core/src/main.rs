use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use speer::config::{GuidanceSource, PipelineConfig, ScorerChoice, TokenizerChoice};
use speer::guide::Mode;
use speer::pipeline::{Pipeline, PipelineError};
use speer::r3::ParseMode;
use speer::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "speer", version, about = "Entity-guided hospital-course summarization pipeline")]
struct Cli {
    /// JSON pipeline config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    gazetteer: Option<PathBuf>,
    #[arg(long, global = true)]
    embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    outputs: Option<PathBuf>,
    #[arg(long, global = true)]
    synonym_threshold: Option<f64>,
    #[arg(long, global = true)]
    salience_threshold: Option<f64>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    esg_cap: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tokenizer: Option<TokenizerChoice>,
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    parse_mode: Option<ParseMode>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    scorer: Option<ScorerChoice>,
    #[arg(long, global = true)]
    keep_headers: Option<PathBuf>,
    #[arg(long, global = true)]
    drop_headers: Option<PathBuf>,
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    use_filtered: Option<bool>,
    #[arg(long, global = true)]
    guidance: Option<GuidanceSource>,
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
}

macro_rules! apply {
    ($cfg:ident, $o:ident; $($field:ident),*; $($opt:ident),*) => {
        $(if let Some(v) = $o.$field { $cfg.$field = v; })*
        $(if let Some(v) = $o.$opt { $cfg.$opt = Some(v); })*
    };
}

impl Overrides {
    fn apply(self, cfg: &mut PipelineConfig) {
        let o = self;
        apply!(cfg, o;
            outputs, synonym_threshold, salience_threshold, budget, esg_cap, seed, tokenizer, parse_mode, jobs,
            scorer, use_filtered, guidance, epochs, learning_rate;
            corpus, gazetteer, embeddings, model, vocab, keep_headers, drop_headers, template);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate an admissions file and copy it, notes date-sorted, into the outputs.
    Ingest,
    /// Drop low-scoring note sections until each admission fits the budget.
    Filter,
    /// Extract typed entity mentions from sources and references.
    Extract,
    /// Group source mentions into ranked synonym groups.
    Esg,
    /// Mark groups matched by the reference summary as salient.
    Label,
    /// Fit the salience classifier on labeled groups.
    TrainSelect,
    /// Score every group with the salience classifier.
    Select,
    /// Sweep the salience threshold and write precision and recall.
    PrCurve,
    /// Wrap salient mentions in double braces.
    Tag,
    /// Build model inputs for one prompting mode.
    Prompt {
        #[arg(long, default_value = "SPEER")]
        mode: Mode,
        /// Shuffle guidance entries with the configured seed.
        #[arg(long)]
        shuffle_guidance: bool,
    },
    /// Derive plan-then-sentence targets from reference summaries.
    OracleTarget,
    /// Produce plan-then-sentence outputs without a language model.
    Mockgen,
    /// Parse model outputs and validate their plans.
    Parse {
        /// Model-output JSONL; defaults to the mockgen artifact.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score parsed summaries against the source groups.
    Eval {
        #[arg(long)]
        with_rouge: bool,
    },
    /// Run ingest through eval with mock generation.
    Run,
    /// Write a synthetic corpus and its lexicon.
    Synth {
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        admissions: usize,
        #[arg(long, default_value_t = 7)]
        synth_seed: u64,
    },
}

fn report(msg: String) {
    eprintln!("{msg}");
}

fn run(pipeline: &Pipeline, command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest => report(pipeline.ingest()?),
        Command::Filter => report(pipeline.filter()?),
        Command::Extract => report(pipeline.extract()?),
        Command::Esg => report(pipeline.esg()?),
        Command::Label => report(pipeline.label()?),
        Command::TrainSelect => report(pipeline.train_select()?),
        Command::Select => report(pipeline.select()?),
        Command::PrCurve => report(pipeline.pr_curve()?),
        Command::Tag => report(pipeline.tag()?),
        Command::Prompt { mode, shuffle_guidance } => report(pipeline.prompt(mode, shuffle_guidance)?),
        Command::OracleTarget => report(pipeline.oracle_target()?),
        Command::Mockgen => report(pipeline.mockgen()?),
        Command::Parse { input } => report(pipeline.parse(input.as_deref())?),
        Command::Eval { with_rouge } => {
            let agg = pipeline.eval(with_rouge)?;
            println!("{}", serde_json::to_string_pretty(&agg).expect("aggregate serializes"));
        }
        Command::Run => {
            if pipeline.config().use_filtered {
                report(pipeline.ingest()?);
                report(pipeline.filter()?);
            } else {
                report(pipeline.ingest()?);
            }
            for stage in [Pipeline::extract, Pipeline::esg, Pipeline::label, Pipeline::tag, Pipeline::mockgen] {
                report(stage(pipeline)?);
            }
            report(pipeline.parse(None)?);
            let agg = pipeline.eval(false)?;
            println!("{}", serde_json::to_string_pretty(&agg).expect("aggregate serializes"));
        }
        Command::Synth { .. } => unreachable!("handled before the pipeline starts"),
    }
    Ok(())
}

fn write_synth(out_dir: &PathBuf, admissions: usize, seed: u64) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let corpus = synth::generate(&SynthConfig {
        admissions,
        seed,
        ..SynthConfig::default()
    });
    let list: Vec<_> = corpus.into_iter().map(|s| s.admission).collect();
    speer::corpus::write_admissions(BufWriter::new(File::create(out_dir.join("admissions.jsonl"))?), &list)?;
    synth::write_gazetteer(BufWriter::new(File::create(out_dir.join("gazetteer.tsv"))?))?;
    eprintln!("wrote {admissions} admissions to {}", out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Synth {
        out_dir,
        admissions,
        synth_seed,
    } = &cli.command
    {
        return match write_synth(out_dir, *admissions, *synth_seed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: synth: {e}");
                ExitCode::from(3)
            }
        };
    }

    let mut cfg = match &cli.config {
        Some(path) => match PipelineConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: config {e}");
                return ExitCode::from(2);
            }
        },
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    let result = Pipeline::new(cfg).and_then(|p| run(&p, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
