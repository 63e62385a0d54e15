use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabxai::data::load_csv;
use tabxai::pipeline::{
    add_agreement, emit_report, run_explanations, run_pipeline, train_model, MethodId, RunConfig, RunReport,
};
use tabxai::Error;

#[derive(Parser)]
#[command(
    name = "tabxai",
    version,
    about = "Explain tabular binary classifiers and compare the explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write model.json.
    Train(RunArgs),
    /// Compute the configured explanations without agreement statistics.
    Explain(RunArgs),
    /// Add agreement statistics to an existing report.json.
    Agree {
        /// Directory holding report.json; artifacts are rewritten in place.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full run: explanations, agreement and every artifact.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method ids; overrides the config list.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> tabxai::Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(methods) = &self.methods {
            cfg.methods = methods
                .iter()
                .map(|m| m.parse())
                .collect::<tabxai::Result<Vec<MethodId>>>()?;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> tabxai::Result<String> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let data = load_csv(&cfg.dataset.path, &cfg.dataset.target)?;
            let (doc, _) = train_model(&cfg, &data)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("model.json");
            doc.save(&path)?;
            Ok(format!("wrote {}", path.display()))
        }
        Command::Explain(args) => {
            let cfg = args.load()?;
            let report = run_explanations(&cfg)?;
            let files = emit_report(&report, &cfg.output_dir)?;
            Ok(summary(&report, files.files.len(), &cfg.output_dir))
        }
        Command::Agree { out } => {
            let mut report = RunReport::load(out.join("report.json"))?;
            add_agreement(&mut report)?;
            let files = emit_report(&report, &out)?;
            Ok(summary(&report, files.files.len(), &out))
        }
        Command::Report(args) => {
            let cfg = args.load()?;
            let report = run_pipeline(&cfg)?;
            let files = emit_report(&report, &cfg.output_dir)?;
            Ok(summary(&report, files.files.len(), &cfg.output_dir))
        }
    }
}

fn summary(report: &RunReport, n_files: usize, out: &std::path::Path) -> String {
    let mut s = format!(
        "{} rankings, {} curves, {} agreement matrices; {} files in {}",
        report.rankings.len(),
        report.effects.len(),
        report.agreement.len(),
        n_files,
        out.display()
    );
    for skip in &report.skipped {
        s.push_str(&format!("\nskipped {}: {}", skip.method, skip.reason));
    }
    s
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_data() {
        3
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
