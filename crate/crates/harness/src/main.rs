use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use veil_core::bootstrap::train_on;
use veil_core::config::PrivacyConfig;
use veil_core::corpus;
use veil_core::domain::PrivacyBudget;
use veil_core::gating::{GatingModel, TrainParams};
use veil_core::ldp::{verify_ldp_bound, verify_monotonicity};
use veil_harness::{sweep, BackendsConfig, Harness, HostileCloud, Method};

#[derive(Debug, Parser)]
#[command(
    name = "veil-harness",
    version,
    about = "Evaluate routing and baselines over a prompt corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One method at one budget.
    Run {
        #[arg(long, default_value = "adaptive")]
        method: Method,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Methods × budgets × seeds.
    Sweep {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "adaptive,uniform_ldp,selective_ldp,cloud_only,edge_only"
        )]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        budgets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Worker threads for cells; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Brute-force privacy bound and budget-allocation checks.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,4")]
        epsilons: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        weights: Vec<f64>,
        /// Categories to keep; all when empty.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "PERSON,LOCATION,NATIONALITY"
        )]
        categories: Vec<String>,
        #[arg(long)]
        privacy_config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Corpus utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Regenerate the synthetic corpus.
    Gen {
        #[arg(long, default_value_t = corpus::DEFAULT_SEED)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSONL corpus; the bundled one when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// TOML with `[cloud]`, `[edge]` and optional `hostile_cloud`.
    #[arg(long)]
    backends: Option<PathBuf>,
    /// Replace the cloud backend with an adversarial mock.
    #[arg(long)]
    hostile_cloud: Option<HostileCloud>,
    #[arg(long)]
    privacy_config: Option<PathBuf>,
    /// Gating model JSON; trained on the corpus when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
}

type Error = Box<dyn std::error::Error>;

fn privacy(path: &Option<PathBuf>) -> Result<PrivacyConfig, Error> {
    Ok(match path {
        Some(p) => PrivacyConfig::from_path(p)?,
        None => PrivacyConfig::bundled(),
    }
    .with_env_overrides()?)
}

fn setup(common: &Common) -> Result<(Harness, Vec<corpus::CorpusRecord>), Error> {
    let records = match &common.corpus {
        Some(p) => corpus::load(p)?,
        None => corpus::bundled(),
    };
    if records.is_empty() {
        eprintln!("warning: corpus is empty");
    }
    let config = privacy(&common.privacy_config)?;
    let model = match &common.model {
        Some(p) => GatingModel::from_json(&std::fs::read_to_string(p)?)?,
        None => train_on(
            &records,
            &config.table,
            &config.lexicon,
            veil_core::bootstrap::DEFAULT_LAMBDA,
            TrainParams::default(),
        )?,
    };
    let mut backends = match &common.backends {
        Some(p) => BackendsConfig::from_path(p)?,
        None => BackendsConfig::default(),
    };
    if common.hostile_cloud.is_some() {
        backends.hostile_cloud = common.hostile_cloud;
    }
    Ok((Harness::new(config, model, backends, &records), records))
}

fn run_grid(
    common: &Common,
    methods: &[Method],
    budgets: &[f64],
    seeds: &[u64],
) -> Result<bool, Error> {
    let (harness, records) = setup(common)?;
    let report = sweep(&harness, &records, methods, budgets, seeds)?;
    report.write_to(&common.out_dir)?;
    print!("{}", report.summary_text());
    eprintln!("wrote {}", common.out_dir.display());
    Ok(true)
}

fn verify(
    epsilons: &[f64],
    alphas: &[f64],
    weights: &[f64],
    categories: &[String],
    config: &Option<PathBuf>,
    out_dir: &Option<PathBuf>,
) -> Result<bool, Error> {
    let config = privacy(config)?;
    let table = if categories.is_empty() {
        config.table
    } else {
        let ids: Vec<&str> = categories.iter().map(String::as_str).collect();
        config.table.restricted_to(&ids)?
    };
    let mut bound_text = String::new();
    let mut bound_jsonl = String::new();
    let mut mono_text = String::new();
    let mut mono_jsonl = String::new();
    let mut passed = true;
    for &eps in epsilons {
        for &alpha in alphas {
            let report = verify_ldp_bound(&table, &PrivacyBudget::new(eps, alpha)?, weights)?;
            passed &= report.passed;
            bound_text.push_str(&report.to_text());
            bound_jsonl.push_str(&report.to_jsonl());
        }
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let mono = verify_monotonicity(eps, &grid, alphas)?;
        passed &= mono.passed;
        mono_text.push_str(&mono.to_text());
        mono_jsonl.push_str(&mono.to_jsonl());
    }
    print!("{bound_text}{mono_text}");
    println!("verify: {}", if passed { "PASS" } else { "FAIL" });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bound.jsonl"), bound_jsonl)?;
        std::fs::write(dir.join("monotonicity.jsonl"), mono_jsonl)?;
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            method,
            epsilon,
            seed,
            common,
        } => run_grid(common, &[*method], &[*epsilon], &[*seed]),
        Command::Sweep {
            methods,
            budgets,
            seeds,
            jobs,
            common,
        } => {
            if *jobs > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(*jobs)
                    .build_global();
            }
            run_grid(common, methods, budgets, seeds)
        }
        Command::Verify {
            epsilons,
            alphas,
            weights,
            categories,
            privacy_config,
            out_dir,
        } => verify(
            epsilons,
            alphas,
            weights,
            categories,
            privacy_config,
            out_dir,
        ),
        Command::Corpus {
            command: CorpusCommand::Gen { seed, out },
        } => {
            let config = PrivacyConfig::bundled();
            let text = corpus::to_jsonl(&corpus::generate(*seed, &config.table, &config.lexicon));
            match out {
                Some(p) => std::fs::write(p, text).map(|_| true).map_err(Into::into),
                None => {
                    print!("{text}");
                    Ok(true)
                }
            }
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
