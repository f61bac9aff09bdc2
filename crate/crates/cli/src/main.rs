use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use selfelicit::backend::{MockDataset, MockProvider, MockWorld, Provider, StreamProvider, SynthConfig};
use selfelicit::highlight::{Markers, Strategy};
use selfelicit::metrics::LabelMode;
use selfelicit::pipeline::dataset::{convert_hotpotqa, convert_mrqa, to_jsonl};
use selfelicit::pipeline::report::{rank_methods, write_csv, write_jsonl};
use selfelicit::pipeline::sweep::{apt_shift, layer_curves, sweep_alpha, sweep_layers, SweepPoint};
use selfelicit::pipeline::{aggregate, ingest_dataset, run_dataset, Method, QaSample, RunConfig};
use selfelicit::trace::{read_trace_file, validate_trace};
use selfelicit::{Granularity, LayerSpan};

#[derive(Parser)]
#[command(name = "selfelicit", version, about = "Attention-guided evidence highlighting for context-based QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more methods over a dataset.
    Run(RunArgs),
    /// SelfElicit over a grid of alpha thresholds, one trace per sample.
    SweepAlpha {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        grid: Vec<f64>,
    },
    /// SelfElicit over several evidence-reading layer spans.
    SweepLayers {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated LO:HI fractions.
        #[arg(long, value_delimiter = ',', default_value = "0:0.25,0.25:0.5,0.5:0.75,0.75:1,0:0.5,0.5:1,0:1")]
        spans: Vec<LayerSpan>,
    },
    /// Per-layer relative attention on evidence and non-evidence sentences.
    LayerCurves {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evidence attention before and after in-context highlighting.
    AptShift {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check SETR1 trace files; exits non-zero if any is invalid.
    ValidateTrace {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Convert a public dataset dump into sample records.
    ConvertDataset {
        #[arg(long, value_enum)]
        format: SourceFormat,
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with planted evidence.
    SynthDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append this many times each context's length in filler sentences.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 0.0)]
        unanswerable: f64,
    },
    /// Serve the mock model over the stream protocol on stdin/stdout.
    MockServe {
        #[arg(long)]
        dataset: PathBuf,
        /// `mock` or `mock:key=value,...`
        #[arg(long, default_value = "mock")]
        provider: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where trace files are written; defaults to a directory under the
        /// system temp dir.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "self_elicit")]
    method: Vec<Method>,
}

#[derive(Args)]
struct CommonArgs {
    /// Sample records, one JSON object per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `mock`, `mock:key=value,...` or `cmd:<shell command>`.
    #[arg(long, default_value = "mock")]
    provider: String,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value = "0.5:1")]
    layer_span: LayerSpan,
    #[arg(long, default_value = "sentence")]
    granularity: Granularity,
    #[arg(long, default_value = "in_context")]
    strategy: Strategy,
    /// `OPEN,CLOSE`
    #[arg(long)]
    markers: Option<Markers>,
    /// Evidence ground truth; defaults to annotations when present.
    #[arg(long, value_enum)]
    labels: Option<LabelArg>,
    /// Seed of the mock provider.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Annotated,
    Answer,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceFormat {
    Hotpotqa,
    Mrqa,
}

impl CommonArgs {
    fn config(&self, method: Method) -> RunConfig {
        RunConfig {
            method,
            alpha: self.alpha,
            layer_span: self.layer_span,
            granularity: self.granularity,
            strategy: self.strategy,
            markers: self.markers.clone().unwrap_or_default(),
            label_mode: self.labels.map(|l| match l {
                LabelArg::Annotated => LabelMode::Annotated,
                LabelArg::Answer => LabelMode::AnswerContainment,
            }),
            jobs: self.jobs,
        }
    }

    fn dataset_name(&self) -> String {
        self.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    fn load(&self) -> Result<(Vec<QaSample>, Box<dyn Provider>)> {
        let ingested = ingest_dataset(&self.dataset)?;
        if !ingested.rejected.is_empty() {
            log::warn!("{} dataset lines rejected", ingested.rejected.len());
        }
        let provider = make_provider(&self.provider, self.seed, &ingested.samples, self.markers.clone())?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok((ingested.samples, provider))
    }
}

fn mock_world(spec: &str, seed: u64, markers: Option<Markers>) -> Result<MockWorld> {
    let mut world = MockWorld::with_seed(seed);
    if let Some(m) = markers {
        world.markers = m;
    }
    let params = match spec.split_once(':') {
        None if spec == "mock" => "",
        Some(("mock", rest)) => rest,
        _ => bail!("unknown provider {spec:?}"),
    };
    for kv in params.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').with_context(|| format!("expected key=value, found {kv:?}"))?;
        let num = || v.parse::<f64>().with_context(|| format!("bad value for {k}: {v:?}"));
        match k {
            "beta" => world.beta = num()?,
            "layers" => world.n_layers = v.parse().with_context(|| format!("bad layer count {v:?}"))?,
            "ramp" => world.ramp_exponent = num()?,
            "concentration" => world.concentration = num()?,
            "sigma" => world.salience_sigma = num()?,
            "gain" => world.highlight_gain = num()?,
            "model" => world.model_id = v.to_owned(),
            _ => bail!("unknown mock parameter {k:?}"),
        }
    }
    ensure!(world.n_layers > 0, "the mock needs at least one layer");
    Ok(world)
}

fn make_provider(spec: &str, seed: u64, samples: &[QaSample], markers: Option<Markers>) -> Result<Box<dyn Provider>> {
    if let Some(command) = spec.strip_prefix("cmd:") {
        let p = StreamProvider::spawn(command).with_context(|| format!("starting provider {command:?}"))?;
        log::info!("connected to {:?}", p.manifest().model);
        return Ok(Box::new(p));
    }
    Ok(Box::new(MockProvider::from_samples(mock_world(spec, seed, markers)?, samples)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(args: &RunArgs) -> Result<()> {
    let c = &args.common;
    let configs: Vec<RunConfig> = args.method.iter().map(|&m| c.config(m)).collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let (samples, provider) = c.load()?;
    let name = c.dataset_name();
    let mut aggs = Vec::new();
    for cfg in &configs {
        let out = run_dataset(&samples, &*provider, cfg)?;
        write_jsonl(create(&c.out.join(format!("{}.samples.jsonl", cfg.method)))?, &out.records)?;
        write_jsonl(create(&c.out.join(format!("{}.timings.jsonl", cfg.method)))?, &out.timings)?;
        let agg = aggregate(cfg.method, &name, &out.records);
        if agg.n_failed == agg.n_samples {
            bail!("{}: every sample failed; see the log", cfg.method);
        }
        log::info!("{}: EM {:.4} F1 {:.4}", cfg.method, agg.em, agg.f1);
        aggs.push(agg);
    }
    rank_methods(&mut aggs);
    write_csv(create(&c.out.join("aggregate.csv"))?, &aggs)?;
    write_csv(io::stdout().lock(), &aggs)?;
    Ok(())
}

fn write_sweep(out: &Path, stem: &str, points: &[SweepPoint]) -> Result<()> {
    let aggs: Vec<_> = points.iter().map(|p| p.aggregate.clone()).collect();
    write_csv(create(&out.join(format!("{stem}.csv")))?, &aggs)?;
    let rows: Vec<serde_json::Value> = points
        .iter()
        .flat_map(|p| {
            p.records
                .iter()
                .map(|r| serde_json::json!({ "parameter": p.parameter, "record": r }))
        })
        .collect();
    write_jsonl(create(&out.join(format!("{stem}.samples.jsonl")))?, &rows)?;
    write_csv(io::stdout().lock(), &aggs)?;
    Ok(())
}

fn validate_traces(files: &[PathBuf]) -> Result<bool> {
    let mut all_ok = true;
    for path in files {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        // reading already validates; report everything found
        match read_trace_file(&bytes) {
            Ok(trace) => {
                let report = validate_trace(&trace);
                println!(
                    "{}: {} ({} layers, {} tokens, {} context tokens)",
                    path.display(),
                    report,
                    trace.n_layers(),
                    trace.n_tokens(),
                    trace.n_context_tokens()
                );
                all_ok &= report.is_valid();
            }
            Err(e) => {
                println!("{}: invalid: {e}", path.display());
                all_ok = false;
            }
        }
    }
    Ok(all_ok)
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&args)?,
        Command::SweepAlpha { common, grid } => {
            let (samples, provider) = common.load()?;
            let points = sweep_alpha(&samples, &*provider, &common.config(Method::SelfElicit), &common.dataset_name(), &grid)?;
            write_sweep(&common.out, "sweep_alpha", &points)?;
        }
        Command::SweepLayers { common, spans } => {
            let (samples, provider) = common.load()?;
            let points = sweep_layers(&samples, &*provider, &common.config(Method::SelfElicit), &common.dataset_name(), &spans)?;
            write_sweep(&common.out, "sweep_layers", &points)?;
        }
        Command::LayerCurves { common } => {
            let (samples, provider) = common.load()?;
            let curves = layer_curves(&samples, &*provider, &common.config(Method::SelfElicit))?;
            write_csv(create(&common.out.join("layer_curves.csv"))?, &curves.rows)?;
            eprintln!(
                "layer curves: {} correct, {} incorrect, {} skipped",
                curves.n_correct, curves.n_incorrect, curves.n_skipped
            );
        }
        Command::AptShift { common } => {
            let (samples, provider) = common.load()?;
            let shifts = apt_shift(&samples, &*provider, &common.config(Method::SelfElicit))?;
            write_csv(create(&common.out.join("apt_shift.csv"))?, &shifts)?;
            let n = shifts.len().max(1) as f64;
            eprintln!(
                "apt shift over {} samples: before {:.4}, after {:.4}",
                shifts.len(),
                shifts.iter().map(|s| s.before).sum::<f64>() / n,
                shifts.iter().map(|s| s.after).sum::<f64>() / n
            );
        }
        Command::ValidateTrace { files } => {
            if !validate_traces(&files)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ConvertDataset { format, input, out } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let samples = match format {
                SourceFormat::Hotpotqa => convert_hotpotqa(&text)?,
                SourceFormat::Mrqa => convert_mrqa(&text)?,
            };
            fs::write(&out, to_jsonl(&samples)).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::SynthDataset {
            out,
            n,
            seed,
            distractors,
            unanswerable,
        } => {
            ensure!((0.0..=1.0).contains(&unanswerable), "--unanswerable must lie in [0, 1]");
            let mut data = MockDataset::synthesize(&SynthConfig {
                seed,
                n_samples: n,
                unanswerable_fraction: unanswerable,
                ..SynthConfig::default()
            });
            if distractors > 0 {
                data = data.with_distractors(distractors);
            }
            fs::write(&out, to_jsonl(&data.samples())).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::MockServe {
            dataset,
            provider,
            seed,
            trace_dir,
        } => {
            let samples = ingest_dataset(&dataset)?.samples;
            let world = mock_world(&provider, seed, None)?;
            let model = world.model_id.clone();
            let mock = MockProvider::from_samples(world, &samples);
            let dir = trace_dir.unwrap_or_else(|| std::env::temp_dir().join(format!("selfelicit-traces-{}", std::process::id())));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let stats = selfelicit::backend::stream::serve(&mock, &model, io::stdin().lock(), io::stdout().lock(), &dir)?;
            log::info!("served {} requests, {} errors", stats.requests, stats.errors);
            io::stdout().flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
