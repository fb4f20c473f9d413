use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use wicm::bootstrap::{smooth_residual_bootstrap, BootstrapConfig};
use wicm::rng::substream;
use wicm::sim::{
    emit_table, generate, run_study, run_study_with_workers, Beta1Scale, Dgp, Family, Layout, Shape,
    ShapeAlternative, Sigma, StudySpec,
};
use wicm::weights::{directional_weight, sdr_weight};
use wicm::{fit_least_squares, make_linear_model, standardize, WeightVector};

use crate::error::CliError;
use crate::ingest::{ingest_csv, write_csv, Table};
use crate::manifest::{sha256_file, FileDigest, RunManifest, MANIFEST_FILE};

pub const REPORT_FILE: &str = "report.json";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const TABLE_FILE: &str = "table.txt";

#[derive(Debug, Parser)]
#[command(name = "wicm", version, about = "Weighted-residual specification tests for regression models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Test a linear regression fit on a CSV dataset.
    Test(TestArgs),
    /// Run a Monte Carlo size/power study from a JSON config.
    Simulate(SimulateArgs),
    /// Rerun a command from its manifest and compare outputs.
    Replay(ReplayArgs),
    /// Write a synthetic dataset drawn from one of the built-in models.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Directional,
    Nonparametric,
}

/// Directional alternative: a built-in shape and the index it is applied to.
#[derive(Debug, Clone, PartialEq)]
pub struct AltSpec {
    pub shape: Shape,
    pub index: IndexSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IndexSpec {
    /// Slope direction of the least-squares fit.
    Fitted,
    Coefficients(Vec<f64>),
}

impl FromStr for AltSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (shape, index) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let shape: Shape = shape.trim().parse().map_err(|e: wicm::Error| e.to_string())?;
        let index = match index.map(str::trim) {
            None | Some("fitted") => IndexSpec::Fitted,
            Some(list) => IndexSpec::Coefficients(
                list.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad index coefficient {v:?}")))
                    .collect::<Result<_, _>>()?,
            ),
        };
        Ok(Self { shape, index })
    }
}

impl std::fmt::Display for AltSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.index {
            IndexSpec::Fitted => write!(f, "{}:fitted", self.shape),
            IndexSpec::Coefficients(c) => {
                let list: Vec<String> = c.iter().map(f64::to_string).collect();
                write!(f, "{}:{}", self.shape, list.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the response column; every other column is a predictor.
    #[arg(long)]
    pub response: String,
    /// Scale predictors and response to mean 0, standard deviation 1.
    #[arg(long)]
    pub standardize: bool,
    /// Fit without an intercept.
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, value_enum, default_value_t = WeightKind::Directional)]
    pub weight: WeightKind,
    /// SHAPE[:INDEX] with SHAPE one of cosine, quadratic, cubic, h4 and INDEX
    /// either `fitted` or comma-separated coefficients, one per predictor.
    #[arg(long, default_value = "cosine:fitted")]
    pub alt: AltSpec,
    /// Bootstrap replications B.
    #[arg(long, default_value_t = 500)]
    pub bootstrap: usize,
    /// Bootstrap smoothing bandwidth.
    #[arg(long, default_value_t = 0.2)]
    pub vn: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
    /// Directory for report.json, residuals.csv and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Study config (JSON); see docs/simulate-config.schema.json.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Bootstrap replications B.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Master seed; overrides the config's `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; does not affect the results.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory for results.csv, table.txt and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where to write the replayed outputs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Family,
    #[arg(long, default_value_t = 0.0)]
    pub a: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long, value_parser = parse_sigma, default_value = "identity")]
    pub sigma: Sigma,
    #[arg(long, value_parser = parse_scale, default_value = "unit")]
    pub beta1_scale: Beta1Scale,
    #[arg(long)]
    pub seed: u64,
    /// Output CSV; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: wicm::Error| e.to_string())
}

fn parse_sigma(s: &str) -> Result<Sigma, String> {
    s.parse().map_err(|e: wicm::Error| e.to_string())
}

fn parse_scale(s: &str) -> Result<Beta1Scale, String> {
    match s {
        "unit" => Ok(Beta1Scale::Unit),
        "raw" => Ok(Beta1Scale::Raw),
        _ => Err(format!("unknown beta1 scale {s:?} (expected unit|raw)")),
    }
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path).map_err(|e| CliError::io(path.display(), e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn output_digests(dir: &Path, names: &[&str]) -> Result<Vec<FileDigest>, CliError> {
    names
        .iter()
        .map(|name| {
            Ok(FileDigest {
                path: (*name).to_string(),
                sha256: sha256_file(&dir.join(name))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub alpha: f64,
    #[serde(rename = "B")]
    pub bootstrap: usize,
    pub v_n: f64,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub standardized: bool,
    pub intercept: bool,
    pub weight: WeightKind,
    /// Directional class, or the SDR basis description.
    pub alternative: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_hat: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sdr_eigenvalues: Option<Vec<f64>>,
    pub coefficients: Vec<Coefficient>,
    pub converged: bool,
}

impl TestReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "WICM test (n = {}, d = {}, weight = {:?})", self.n, self.d, self.weight);
        let _ = writeln!(s, "  alternative     {}", self.alternative);
        if let Some(k) = self.s_hat {
            let _ = writeln!(s, "  s_hat           {k}");
        }
        let _ = writeln!(s, "  statistic       {:.6}", self.statistic);
        let _ = writeln!(s, "  p-value         {:.4}", self.p_value);
        let _ = writeln!(s, "  critical value  {:.6} (alpha = {})", self.critical_value, self.alpha);
        let _ = writeln!(s, "  bootstrap       B = {}, v_n = {}, seed = {}", self.bootstrap, self.v_n, self.seed);
        let _ = writeln!(
            s,
            "  decision        {}",
            if self.reject { "reject the linear model" } else { "do not reject" }
        );
        s
    }
}

/// Result of `test` before anything is written.
#[derive(Debug, Clone)]
pub struct TestRun {
    pub report: TestReport,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub weight: Vec<f64>,
}

fn standardize_table(table: &Table) -> Result<wicm::Dataset, CliError> {
    standardize(&table.data).map_err(|e| match e {
        wicm::Error::ZeroVariance { column } => {
            let name = column
                .strip_prefix('x')
                .and_then(|k| k.parse::<usize>().ok())
                .and_then(|k| table.predictors.get(k - 1).cloned())
                .unwrap_or_else(|| table.response.clone());
            CliError::Input(format!("column {name:?} has zero sample variance"))
        }
        other => other.into(),
    })
}

pub fn execute_test(args: &TestArgs) -> Result<TestRun, CliError> {
    let cfg = BootstrapConfig::new(args.seed)
        .with_replications(args.bootstrap)
        .with_v_n(args.vn)
        .with_alpha(args.alpha);
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let table = ingest_csv(&args.data, &args.response)?;
    let data = if args.standardize {
        standardize_table(&table)?
    } else {
        table.data.clone()
    };
    let (n, d) = (data.n(), data.d());
    let intercept = !args.no_intercept;
    let spec = make_linear_model(d, intercept);
    let fit = fit_least_squares(&data, &spec, None)?;

    let (w, alternative, s_hat, eigenvalues): (WeightVector, String, _, _) = match args.weight {
        WeightKind::Directional => {
            let alt = match &args.alt.index {
                IndexSpec::Fitted => ShapeAlternative::along(args.alt.shape, &fit.beta_hat[..d])?,
                IndexSpec::Coefficients(c) => {
                    if c.len() != d {
                        return Err(CliError::Input(format!(
                            "--alt index has {} coefficients but the data has {d} predictors",
                            c.len()
                        )));
                    }
                    ShapeAlternative::new(args.alt.shape, c.clone(), c.clone())?
                }
            };
            let class = alt.directional_with_intercept(intercept);
            let w = directional_weight(&data, &fit, &spec, &class)?;
            (w, format!("{} ({})", class.label(), args.alt), None, None)
        }
        WeightKind::Nonparametric => {
            let (w, sdr) = sdr_weight(&data, &fit, &spec)?;
            let eig = sdr.eigenvalues().iter().copied().collect::<Vec<_>>();
            (w, "cse-mere-basis".to_string(), Some(sdr.s_hat()), Some(eig))
        }
    };

    let outcome = smooth_residual_bootstrap(&data, &spec, &fit, &w, &cfg)?;
    let mut coefficients: Vec<Coefficient> = table
        .predictors
        .iter()
        .zip(&fit.beta_hat)
        .map(|(name, b)| Coefficient {
            name: name.clone(),
            estimate: *b,
        })
        .collect();
    if intercept {
        coefficients.push(Coefficient {
            name: "(intercept)".into(),
            estimate: fit.beta_hat[d],
        });
    }
    let report = TestReport {
        statistic: outcome.statistic,
        p_value: outcome.p_value,
        critical_value: outcome.critical_value,
        reject: outcome.reject(),
        alpha: args.alpha,
        bootstrap: args.bootstrap,
        v_n: args.vn,
        seed: args.seed,
        n,
        d,
        standardized: args.standardize,
        intercept,
        weight: args.weight,
        alternative,
        s_hat,
        sdr_eigenvalues: eigenvalues,
        coefficients,
        converged: fit.converged,
    };
    Ok(TestRun {
        report,
        fitted: fit.fitted.clone(),
        residuals: fit.residuals.clone(),
        weight: w.values().to_vec(),
    })
}

fn test_to_args(args: &TestArgs, data: &Path) -> Vec<String> {
    let mut v = vec![
        "test".to_string(),
        "--data".into(),
        data.display().to_string(),
        "--response".into(),
        args.response.clone(),
    ];
    if args.standardize {
        v.push("--standardize".into());
    }
    if args.no_intercept {
        v.push("--no-intercept".into());
    }
    let weight = match args.weight {
        WeightKind::Directional => "directional",
        WeightKind::Nonparametric => "nonparametric",
    };
    v.extend([
        "--weight".into(),
        weight.into(),
        "--alt".into(),
        args.alt.to_string(),
        "--bootstrap".into(),
        args.bootstrap.to_string(),
        "--vn".into(),
        args.vn.to_string(),
        "--alpha".into(),
        args.alpha.to_string(),
        "--seed".into(),
        args.seed.to_string(),
    ]);
    v
}

pub fn cmd_test(args: &TestArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let run = execute_test(args)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&run.report).expect("report serializes"));
    } else {
        print!("{}", run.report.to_text());
    }
    let Some(out) = &args.out else {
        return Ok(());
    };
    create_dir(out)?;
    let mut report = serde_json::to_string_pretty(&run.report).expect("report serializes");
    report.push('\n');
    write_file(&out.join(REPORT_FILE), report.as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Input(format!("writing residuals: {e}"));
    w.write_record(["row", "fitted", "residual", "weight"]).map_err(csv_err)?;
    for i in 0..run.residuals.len() {
        w.write_record([
            (i + 1).to_string(),
            run.fitted[i].to_string(),
            run.residuals[i].to_string(),
            run.weight[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out.join(RESIDUALS_FILE), &bytes)?;

    let data = absolute(&args.data)?;
    let manifest = RunManifest {
        command: "test".into(),
        args: test_to_args(args, &data),
        inputs: vec![FileDigest::of(&data)?],
        outputs: output_digests(out, &[REPORT_FILE, RESIDUALS_FILE])?,
        seed: args.seed,
        config: serde_json::json!({
            "B": args.bootstrap,
            "v_n": args.vn,
            "alpha": args.alpha,
            "weight": args.weight,
            "alt": args.alt.to_string(),
            "standardize": args.standardize,
            "intercept": !args.no_intercept,
        }),
        version: env!("CARGO_PKG_VERSION").into(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out.join(MANIFEST_FILE))
}

/// Reads the config and applies command-line overrides.
pub fn load_study(args: &SimulateArgs) -> Result<StudySpec, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::io(args.config.display(), e))?;
    let mut spec: StudySpec =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(r) = args.reps {
        spec.reps = r;
    }
    if let Some(b) = args.bootstrap {
        spec.bootstrap.replications = b;
    }
    if let Some(a) = args.alpha {
        spec.bootstrap.alpha = a;
    }
    if let Some(s) = args.seed {
        spec.master_seed = Some(s);
    }
    Ok(spec)
}

fn simulate_to_args(args: &SimulateArgs, config: &Path) -> Vec<String> {
    let mut v = vec!["simulate".to_string(), "--config".into(), config.display().to_string()];
    let mut opt = |flag: &str, value: Option<String>| {
        if let Some(value) = value {
            v.push(flag.into());
            v.push(value);
        }
    };
    opt("--reps", args.reps.map(|x| x.to_string()));
    opt("--bootstrap", args.bootstrap.map(|x| x.to_string()));
    opt("--alpha", args.alpha.map(|x| x.to_string()));
    opt("--seed", args.seed.map(|x| x.to_string()));
    opt("--workers", args.workers.map(|x| x.to_string()));
    v
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let spec = load_study(args)?;
    let cfg = spec.expand().map_err(|e| CliError::Config(e.to_string()))?;
    let result = match args.workers {
        Some(w) => run_study_with_workers(&cfg, w),
        None => run_study(&cfg),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    for row in result.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: cell {} a={} n={} p={} {} failed: {}",
            row.family,
            row.a,
            row.n,
            row.p,
            row.method,
            row.error.as_deref().unwrap_or_default()
        );
    }
    let table = emit_table(&result, Layout::Paper);
    print!("{table}");
    let Some(out) = &args.out else {
        return Ok(());
    };
    create_dir(out)?;
    write_file(&out.join(RESULTS_FILE), emit_table(&result, Layout::Flat).as_bytes())?;
    write_file(&out.join(TABLE_FILE), table.as_bytes())?;
    let config = absolute(&args.config)?;
    let manifest = RunManifest {
        command: "simulate".into(),
        args: simulate_to_args(args, &config),
        inputs: vec![FileDigest::of(&config)?],
        outputs: output_digests(out, &[RESULTS_FILE, TABLE_FILE])?,
        seed: cfg.master_seed,
        config: serde_json::to_value(&spec).expect("config serializes"),
        version: env!("CARGO_PKG_VERSION").into(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out.join(MANIFEST_FILE))
}

pub fn generate_table(args: &GenerateArgs) -> Result<Table, CliError> {
    let dgp = Dgp::new(args.family, args.a, args.n, args.p)
        .with_sigma(args.sigma)
        .with_beta1_scale(args.beta1_scale);
    let data = generate(&dgp, &mut substream(args.seed, &[]))?;
    Ok(Table {
        predictors: (1..=args.p).map(|j| format!("x{j}")).collect(),
        response: "y".into(),
        data,
    })
}

fn generate_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn generate_to_args(args: &GenerateArgs) -> Vec<String> {
    let scale = match args.beta1_scale {
        Beta1Scale::Unit => "unit",
        Beta1Scale::Raw => "raw",
    };
    vec![
        "generate".into(),
        "--family".into(),
        args.family.to_string(),
        "--a".into(),
        args.a.to_string(),
        "--n".into(),
        args.n.to_string(),
        "--p".into(),
        args.p.to_string(),
        "--sigma".into(),
        args.sigma.to_string(),
        "--beta1-scale".into(),
        scale.into(),
        "--seed".into(),
        args.seed.to_string(),
    ]
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let table = generate_table(args)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut buf = Vec::new();
    write_csv(&mut buf, &table).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&args.out, &buf)?;
    let name = args.out.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let manifest = RunManifest {
        command: "generate".into(),
        args: generate_to_args(args),
        inputs: vec![],
        outputs: vec![FileDigest {
            path: name,
            sha256: sha256_file(&args.out)?,
        }],
        seed: args.seed,
        config: serde_json::json!({
            "family": args.family,
            "a": args.a,
            "n": args.n,
            "p": args.p,
            "sigma": args.sigma,
            "beta1_scale": args.beta1_scale,
        }),
        version: env!("CARGO_PKG_VERSION").into(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&generate_manifest_path(&args.out))?;
    println!("wrote {} ({} rows, {} predictors)", args.out.display(), args.n, args.p);
    Ok(())
}

/// Reruns the recorded command into `out` and checks every recorded output.
pub fn cmd_replay(args: &ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::load(&args.manifest)?;
    for input in &manifest.inputs {
        let actual = sha256_file(Path::new(&input.path))?;
        if actual != input.sha256 {
            return Err(CliError::Input(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let argv = std::iter::once("wicm".to_string()).chain(manifest.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Config(format!("manifest arguments: {e}")))?;
    let out_dir = args.out.clone();
    let command = match cli.command {
        Command::Test(mut a) => {
            a.out = Some(out_dir.clone());
            Command::Test(a)
        }
        Command::Simulate(mut a) => {
            a.out = Some(out_dir.clone());
            Command::Simulate(a)
        }
        Command::Generate(mut a) => {
            let name = manifest
                .outputs
                .first()
                .map(|o| o.path.clone())
                .ok_or_else(|| CliError::Config("manifest lists no outputs".into()))?;
            a.out = out_dir.join(name);
            Command::Generate(a)
        }
        Command::Replay(_) => return Err(CliError::Config("a manifest cannot record a replay".into())),
    };
    run(command)?;
    let mut mismatched = Vec::new();
    for output in &manifest.outputs {
        let path = out_dir.join(&output.path);
        if sha256_file(&path)? != output.sha256 {
            mismatched.push(output.path.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replay: {} outputs identical to the recorded run", manifest.outputs.len());
        Ok(())
    } else {
        Err(CliError::Mismatch(format!("outputs differ: {}", mismatched.join(", "))))
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Test(a) => cmd_test(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::Generate(a) => cmd_generate(&a),
    }
}
