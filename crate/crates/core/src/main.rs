use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use operant::bench::{
    dataset_dir, evaluate, generate_dataset, load_dataset, residual_weight_map, train_model, write_dataset,
    write_weight_map_csv, ExperimentConfig,
};
use operant::constraints::assemble_terms;
use operant::ntk::{ntk_diag, ntk_full, ntk_spectrum, ntk_weights, TermSet};
use operant::operatornet::DeepOnetParams;
use operant::trainer::{gradient_histogram, Observer};
use operant::{Error, Result};

#[derive(Parser)]
#[command(name = "operant", version, about = "Physics-informed DeepONet experiments")]
struct Cli {
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (falls back to OPERANT_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample inputs and training points and solve the test references.
    GenerateData(ConfigArg),
    /// Train a model on the generated dataset.
    Train(ConfigArg),
    /// Relative L2 errors of the trained model on the test set.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Checkpoint to evaluate (default: <output_dir>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Kernel diagonal and weights on the training terms.
    NtkProbe {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Also assemble the full kernel and write its spectrum.
        #[arg(long)]
        full: bool,
        /// Only probe the first N terms.
        #[arg(long)]
        max_terms: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Residual weights over the reference grid of one test input.
    ExportWeightMap {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Histograms of per-sample parameter gradients.
    ExportGradHistogram {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Training sample indices, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

impl Command {
    fn config_path(&self) -> &Path {
        match self {
            Command::GenerateData(c) | Command::Train(c) => &c.config,
            Command::Evaluate { cfg, .. }
            | Command::NtkProbe { cfg, .. }
            | Command::ExportWeightMap { cfg, .. }
            | Command::ExportGradHistogram { cfg, .. } => &cfg.config,
        }
    }
}

fn model_or_init(cfg: &ExperimentConfig) -> Result<DeepOnetParams> {
    let path = cfg.output_dir.join("model.json");
    if path.exists() {
        DeepOnetParams::load(&path)
    } else {
        operant::bench::init_model(cfg)
    }
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Checkpoints<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
}

impl Observer for Checkpoints<'_> {
    fn checkpoint(&mut self, step: usize, model: &DeepOnetParams) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(format!("step_{step:07}.json"));
        model.save_with_config(&path, self.cfg.seed, self.cfg.to_json())
    }
}

fn run(cmd: &Command, cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cmd {
        Command::GenerateData(_) => {
            let data = generate_dataset(cfg)?;
            let dir = dataset_dir(cfg);
            write_dataset(cfg, &data, &dir)?;
            Ok(json!({
                "dataset": dir,
                "n_train": data.train.inputs.len(),
                "n_test": data.test.inputs.len(),
            }))
        }
        Command::Train(_) => {
            let data = load_dataset(&dataset_dir(cfg))?;
            let obs = Checkpoints {
                cfg,
                dir: out.join("checkpoints"),
            };
            let (model, log) = train_model(cfg, &data.train, obs)?;
            model.save_with_config(&out.join("model.json"), cfg.seed, cfg.to_json())?;
            log.write_csv(&out.join("train_log.csv"))?;
            let last = log.records.last();
            Ok(json!({
                "model": out.join("model.json"),
                "iterations": cfg.train.iterations,
                "final_loss": last.map(|r| r.loss_total_weighted),
                "clamped": log.clamped,
            }))
        }
        Command::Evaluate { model, .. } => {
            let path = model.clone().unwrap_or_else(|| out.join("model.json"));
            let params = DeepOnetParams::load(&path)?;
            let data = load_dataset(&dataset_dir(cfg))?;
            let report = evaluate(&params, &data.test)?;
            report.write_csv(&out.join("eval_report.csv"))?;
            let summary = json!({
                "config": cfg.to_json(),
                "seed": cfg.seed,
                "report": report,
            });
            write(&out.join("eval_report.json"), serde_json::to_string_pretty(&summary)?)?;
            Ok(json!({
                "report": out.join("eval_report.csv"),
                "n": report.errors.len(),
                "mean": report.mean,
                "std": report.std,
            }))
        }
        Command::NtkProbe {
            full,
            max_terms,
            alpha,
            ..
        } => {
            let data = load_dataset(&dataset_dir(cfg))?;
            let model = model_or_init(cfg)?;
            let mut terms = assemble_terms(&cfg.benchmark_spec(), &data.train)?;
            if let Some(k) = max_terms {
                terms.truncate(*k);
            }
            let src = TermSet {
                model: &model,
                terms: &terms,
                dataset: &data.train,
                viscosity: cfg.viscosity(),
            };
            let diag = ntk_diag(&src)?;
            let w = ntk_weights(&diag, *alpha)?;
            let mut csv = String::from("term,kind,h_kk,lambda\n");
            for (k, t) in terms.iter().enumerate() {
                csv.push_str(&format!("{k},{},{:e},{:e}\n", t.kind.name(), diag[k], w.lambdas[k]));
            }
            write(&out.join("ntk_diag.csv"), csv)?;
            let mut summary = json!({
                "terms": terms.len(),
                "diag": out.join("ntk_diag.csv"),
                "clamped": w.clamped,
            });
            if *full {
                let spectrum = ntk_spectrum(&ntk_full(&src)?)?;
                let mut csv = String::from("rank,eigenvalue\n");
                for (r, v) in spectrum.iter().enumerate() {
                    csv.push_str(&format!("{r},{v:e}\n"));
                }
                write(&out.join("ntk_spectrum.csv"), csv)?;
                summary["spectrum"] = json!(out.join("ntk_spectrum.csv"));
            }
            Ok(summary)
        }
        Command::ExportWeightMap { sample, alpha, .. } => {
            let data = load_dataset(&dataset_dir(cfg))?;
            let model = model_or_init(cfg)?;
            let (u, r) = data
                .test
                .inputs
                .get(*sample)
                .zip(data.test.references.get(*sample))
                .ok_or_else(|| Error::Data(format!("no test sample {sample}")))?;
            let map = residual_weight_map(&model, cfg.benchmark, cfg.viscosity(), u, &r.x, &r.t, *alpha)?;
            let path = out.join("weight_map.csv");
            write_weight_map_csv(&path, &r.x, &r.t, &map)?;
            Ok(json!({ "weight_map": path, "rows": map.len() }))
        }
        Command::ExportGradHistogram { samples, bins, .. } => {
            let data = load_dataset(&dataset_dir(cfg))?;
            let model = model_or_init(cfg)?;
            let terms = assemble_terms(&cfg.benchmark_spec(), &data.train)?;
            let hists = gradient_histogram(&model, &terms, &data.train, cfg.viscosity(), samples, *bins)?;
            let mut csv = String::from("sample_id,bin_left,bin_right,count\n");
            for h in &hists {
                for (b, c) in h.counts.iter().enumerate() {
                    csv.push_str(&format!("{},{:e},{:e},{c}\n", h.sample_id, h.edges[b], h.edges[b + 1]));
                }
            }
            let path = out.join("grad_histogram.csv");
            write(&path, csv)?;
            Ok(json!({ "histogram": path, "samples": samples }))
        }
    }
}

fn threads(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("OPERANT_THREADS") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| format!("OPERANT_THREADS must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match threads(cli.threads) {
        Ok(Some(n)) if n > 0 => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(None) => {}
        Ok(Some(_)) | Err(_) => {
            eprintln!("error: thread count must be a positive integer");
            return ExitCode::from(2);
        }
    }
    let path = cli.command.config_path();
    if !path.is_file() {
        eprintln!("error: config file {} does not exist", path.display());
        return ExitCode::from(2);
    }
    let cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, &cfg) {
        Ok(summary) => {
            if cli.json {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
