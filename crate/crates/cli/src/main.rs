use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pamm::benchmark::{run_benchmark, BenchmarkConfig};
use pamm::inference::{predict_hazards, term_effect, CifSet};
use pamm::metrics::{aalen_johansen, ibs_at_quartiles, kaplan_meier_from, EvalResult, StepFunction};
use pamm::model::Term;
use pamm::simulate::{make_scenario_dataset, Scenario};
use pamm::{io, make_cut_points, CutStrategy, Dataset, Error, HazardModel, ModelSpec, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Piecewise exponential additive models with an optional deep predictor
#[derive(Parser, Debug)]
#[command(name = "pamm", version, about)]
struct Cli {
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, env = "PAMM_THREADS")]
    threads: Option<usize>,

    /// Log progress at info level
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Expand survival records into piecewise exponential data
    Transform(TransformArgs),
    /// Fit a model on survival records
    Fit(FitArgs),
    /// Predict survival and cumulative incidence curves
    Predict(PredictArgs),
    /// Integrated Brier scores at the event-time quartiles
    Evaluate(EvaluateArgs),
    /// Draw a dataset from a built-in scenario
    Simulate(SimulateArgs),
    /// Replicated KM / PAMM / DeepPAMM / oracle comparison
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct TransformArgs {
    /// Records CSV
    input: PathBuf,
    /// `event_times` or `quantiles:J`
    #[arg(long, default_value = "quantiles:20")]
    cuts: CutStrategy,
    #[arg(long, default_value_t = 100)]
    max_intervals: usize,
    /// Output PED CSV; cut points go to `<stem>.cuts.json`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Records CSV
    input: PathBuf,
    /// Model specification JSON
    #[arg(long)]
    model: PathBuf,
    /// Training configuration JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the training configuration
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the deep head
    #[arg(long)]
    pamm_only: bool,
    /// Fitted model JSON; report and loss curve are written alongside
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Fitted model JSON
    model: PathBuf,
    /// Records CSV with the model's feature columns
    input: PathBuf,
    /// Comma-separated evaluation times (default: the cut points)
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Also write one-dimensional term effects on a grid
    #[arg(long)]
    effects: Option<PathBuf>,
    /// Curves CSV; per-interval hazards go to `<stem>.hazards.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Test records CSV
    input: PathBuf,
    /// Fitted model JSON
    #[arg(long, required_unless_present = "km", conflicts_with = "km")]
    model: Option<PathBuf>,
    /// Score the Kaplan–Meier (Aalen–Johansen for a cause) baseline
    #[arg(long)]
    km: bool,
    /// Records used to fit the baseline (default: the test records)
    #[arg(long, requires = "km")]
    train: Option<PathBuf>,
    /// Cause to score in competing-risks data
    #[arg(long)]
    cause: Option<usize>,
    /// Result JSON; the Brier series goes to `<stem>.brier.csv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario name (single_v1, cr_v1, mixed_v1, latent_v1)
    scenario: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Records CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Scenario name
    scenario: String,
    /// Benchmark configuration JSON
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the deep model
    #[arg(long)]
    pamm_only: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Usage(String),
    Quota { failed: usize, total: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_data_insufficiency() => 3,
            Failure::Core(e) if e.is_numerical() => 4,
            Failure::Core(_) | Failure::Usage(_) => 2,
            Failure::Quota { .. } => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::Usage(m) => m.clone(),
            Failure::Quota { failed, total } => {
                format!("{failed} of {total} replicates failed (limit 20%)")
            }
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    tool_version: &'static str,
    seed: Option<u64>,
    config_hash: Option<String>,
    data_hash: Option<String>,
    outputs: Vec<String>,
    warnings: BTreeMap<String, usize>,
    timings: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenario: Option<Scenario>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: None,
            config_hash: None,
            data_hash: None,
            outputs: Vec::new(),
            warnings: BTreeMap::new(),
            timings: BTreeMap::new(),
            scenario: None,
        }
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    fn finish(mut self, started: Instant, path: &Path) -> CmdResult {
        self.timings
            .insert("total_seconds".into(), started.elapsed().as_secs_f64());
        io::write_json(path, &self)?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> std::result::Result<String, Failure> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// `dir/stem.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    io::read_json(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn transform(args: &TransformArgs) -> CmdResult {
    let started = Instant::now();
    let data = io::read_records(&args.input)?;
    let cuts = make_cut_points(&data.records, args.cuts, args.max_intervals)?;
    let ped = data.to_ped(&cuts)?;
    io::write_ped(&args.out, &ped)?;
    let cuts_path = sibling(&args.out, "cuts.json");
    io::write_json(&cuts_path, &cuts)?;

    let mut m = RunManifest::new("transform");
    m.data_hash = Some(hash_file(&args.input)?);
    m.config_hash = Some(sha256_hex(format!("{:?}/{}", args.cuts, args.max_intervals).as_bytes()));
    m.warnings.insert("admin_censored".into(), ped.admin_censored);
    m.warnings.insert("dropped".into(), ped.dropped);
    m.output(&args.out);
    m.output(&cuts_path);
    m.finish(started, &sibling(&args.out, "manifest.json"))
}

fn fit(args: &FitArgs) -> CmdResult {
    let started = Instant::now();
    let spec_text = std::fs::read_to_string(&args.model)?;
    let mut spec: ModelSpec = serde_json::from_str(&spec_text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.model.display())))?;
    let config_text = match &args.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => "{}".to_string(),
    };
    let mut config: TrainConfig = serde_json::from_str(&config_text)
        .map_err(|e| Failure::Usage(format!("training config: {e}")))?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    if args.pamm_only {
        spec = spec.pamm_only();
    }
    let data = io::read_records(&args.input)?;
    let cuts = make_cut_points(&data.records, spec.cuts.strategy, spec.cuts.max_intervals)?;
    let ped = data.to_ped(&cuts)?;
    let fit_started = Instant::now();
    let (model, report) = pamm::tune(&ped, &spec, &config)?;
    let fit_seconds = fit_started.elapsed().as_secs_f64();

    std::fs::write(&args.out, model.to_json()? + "\n")?;
    let report_path = sibling(&args.out, "report.json");
    io::write_json(&report_path, &report)?;
    let loss_path = sibling(&args.out, "loss.csv");
    std::fs::write(&loss_path, report.loss_csv())?;

    let mut m = RunManifest::new(if args.pamm_only { "fit --pamm-only" } else { "fit" });
    m.seed = Some(config.seed);
    m.data_hash = Some(hash_file(&args.input)?);
    m.config_hash = Some(sha256_hex(
        format!("{}\n{}", serde_json::to_string(&spec).unwrap(), serde_json::to_string(&config).unwrap())
            .as_bytes(),
    ));
    m.warnings.insert("admin_censored".into(), ped.admin_censored);
    m.warnings.insert("dropped".into(), ped.dropped);
    m.timings.insert("fit_seconds".into(), fit_seconds);
    m.output(&args.out);
    m.output(&report_path);
    m.output(&loss_path);
    m.finish(started, &sibling(&args.out, "manifest.json"))
}

fn load_model(path: &Path) -> std::result::Result<HazardModel, Failure> {
    let text = std::fs::read_to_string(path)?;
    HazardModel::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_for_model(model: &HazardModel, path: &Path) -> std::result::Result<Dataset, Failure> {
    let data = io::read_records(path)?;
    Ok(data.select_features(&model.feature_names)?)
}

fn predict(args: &PredictArgs) -> CmdResult {
    let started = Instant::now();
    let model = load_model(&args.model)?;
    let data = load_for_model(&model, &args.input)?;
    let hazards = predict_hazards(&model, &data.records)?;
    let sets: Vec<CifSet> = hazards
        .iter()
        .map(|h| h.cifs(&model.cuts))
        .collect::<pamm::Result<_>>()?;
    let times = args
        .times
        .clone()
        .unwrap_or_else(|| model.cuts.as_slice().to_vec());
    let ids: Vec<String> = hazards.iter().map(|h| h.id.clone()).collect();
    io::write_curves(&args.out, &ids, &sets, &times)?;

    let hazard_path = sibling(&args.out, "hazards.csv");
    let mut text = String::from("id,j,cause,hazard\n");
    for h in &hazards {
        for (k, hk) in h.hazards.iter().enumerate() {
            for (j, v) in hk.iter().enumerate() {
                text.push_str(&format!("{},{},{},{}\n", h.id, j + 1, k + 1, v));
            }
        }
    }
    std::fs::write(&hazard_path, text)?;

    let mut m = RunManifest::new("predict");
    m.data_hash = Some(hash_file(&args.input)?);
    m.config_hash = Some(hash_file(&args.model)?);
    m.warnings.insert(
        "beyond_horizon".into(),
        times.iter().filter(|&&t| t > model.cuts.horizon()).count(),
    );
    m.output(&args.out);
    m.output(&hazard_path);
    if let Some(path) = &args.effects {
        write_effects(&model, path)?;
        m.output(path);
    }
    m.finish(started, &sibling(&args.out, "manifest.json"))
}

fn write_effects(model: &HazardModel, path: &Path) -> CmdResult {
    let mut text = String::from("term,cause,x,effect\n");
    for (i, t) in model.terms.iter().enumerate() {
        let (lo, hi) = match &t.term {
            Term::Smooth { basis, .. } | Term::SmoothTime { basis } => (basis.lo, basis.hi),
            _ => continue,
        };
        let grid: Vec<f64> = (0..=100).map(|s| lo + (hi - lo) * s as f64 / 100.0).collect();
        for k in 1..=model.n_causes {
            let f = term_effect(model, i, k, &grid)?;
            for (x, v) in grid.iter().zip(f) {
                text.push_str(&format!("{},{},{},{}\n", t.term.label(), k, x, v));
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput {
    q25: f64,
    q50: f64,
    q75: f64,
    quartiles: [f64; 3],
    brier_at_quartiles: [f64; 3],
    n_events: usize,
    warnings: usize,
}

fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let started = Instant::now();
    let mut m = RunManifest::new(if args.km { "evaluate --km" } else { "evaluate" });
    let result: EvalResult = if let Some(model_path) = &args.model {
        let model = load_model(model_path)?;
        let data = load_for_model(&model, &args.input)?;
        let cause = if model.n_causes > 1 {
            Some(args.cause.unwrap_or(1))
        } else {
            None
        };
        let sets: Vec<CifSet> = predict_hazards(&model, &data.records)?
            .iter()
            .map(|h| h.cifs(&model.cuts))
            .collect::<pamm::Result<_>>()?;
        let (times, causes) = outcomes(&data);
        m.config_hash = Some(hash_file(model_path)?);
        ibs_at_quartiles(&times, &causes, cause, |i, tau| match cause {
            None => sets[i].survival(tau),
            Some(k) => 1.0 - sets[i].cif(k, tau).unwrap_or(f64::NAN),
        })?
    } else {
        let test = io::read_records(&args.input)?;
        let base = match &args.train {
            Some(p) => io::read_records(p)?,
            None => test.clone(),
        };
        let (bt, bc) = outcomes(&base);
        let (times, causes) = outcomes(&test);
        let cause = args.cause.filter(|_| test.n_causes() > 1 || base.n_causes() > 1);
        let curve: StepFunction = match cause {
            None => kaplan_meier_from(&bt, &bc.iter().map(|&c| c != 0).collect::<Vec<_>>()),
            Some(k) => aalen_johansen(&bt, &bc, k),
        };
        ibs_at_quartiles(&times, &causes, cause, |_, tau| match cause {
            None => curve.at(tau),
            Some(_) => 1.0 - curve.at(tau),
        })?
    };
    let out = EvaluationOutput {
        q25: result.ibs_q25,
        q50: result.ibs_q50,
        q75: result.ibs_q75,
        quartiles: result.quartiles,
        brier_at_quartiles: result.brier_at_quartiles,
        n_events: result.n_events,
        warnings: result.dropped_terms,
    };
    io::write_json(&args.out, &out)?;
    let brier_path = sibling(&args.out, "brier.csv");
    io::write_series(&brier_path, ["tau", "brier"], &result.brier_series)?;
    m.data_hash = Some(hash_file(&args.input)?);
    m.warnings.insert("dropped_brier_terms".into(), result.dropped_terms);
    m.output(&args.out);
    m.output(&brier_path);
    m.finish(started, &sibling(&args.out, "manifest.json"))
}

fn outcomes(data: &Dataset) -> (Vec<f64>, Vec<usize>) {
    (
        data.records.iter().map(|r| r.exit).collect(),
        data.records.iter().map(|r| r.cause).collect(),
    )
}

fn simulate(args: &SimulateArgs) -> CmdResult {
    let started = Instant::now();
    let mut scenario = Scenario::named(&args.scenario)?;
    if let Some(n) = args.n {
        scenario = scenario.with_subjects(n);
    }
    let sim = make_scenario_dataset(&scenario, args.seed)?;
    io::write_records(&args.out, &sim.dataset)?;
    let mut m = RunManifest::new("simulate");
    m.seed = Some(args.seed);
    m.config_hash = Some(sha256_hex(serde_json::to_string(&scenario).unwrap().as_bytes()));
    m.data_hash = Some(hash_file(&args.out)?);
    m.warnings.insert(
        "censored".into(),
        sim.dataset.records.iter().filter(|r| r.cause == 0).count(),
    );
    m.scenario = Some(scenario);
    m.output(&args.out);
    m.finish(started, &sibling(&args.out, "manifest.json"))
}

fn benchmark(args: &BenchmarkArgs) -> CmdResult {
    let started = Instant::now();
    let mut config = match &args.config {
        Some(p) => {
            let mut c: BenchmarkConfig = read_json_file(p)?;
            c.scenario = args.scenario.clone();
            c
        }
        None => BenchmarkConfig::new(&args.scenario),
    };
    if let Some(v) = args.reps {
        config.n_reps = v;
    }
    if let Some(v) = args.n_train {
        config.n_train = v;
    }
    if let Some(v) = args.n_test {
        config.n_test = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.pamm_only {
        config.include_deep = false;
    }
    let result = run_benchmark(&config)?;
    result.write(&args.out)?;

    let mut m = RunManifest::new("benchmark");
    m.seed = Some(config.seed);
    m.config_hash = Some(sha256_hex(serde_json::to_string(&config).unwrap().as_bytes()));
    m.warnings.insert("failed_replicates".into(), result.n_failed());
    for f in ["summary.csv", "table.csv", "replicates.csv"] {
        m.output(&args.out.join(f));
    }
    m.finish(started, &args.out.join("manifest.json"))?;
    if result.failure_rate() > 0.2 {
        return Err(Failure::Quota {
            failed: result.n_failed(),
            total: result.replicates.len(),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Transform(a) => transform(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => simulate(a),
        Command::Benchmark(a) => benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
