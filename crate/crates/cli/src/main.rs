//! Command-line pipeline for multitype point pattern analysis.
//!
//! Subcommands cover the full workflow: CSV ingestion, intensity surfaces,
//! segregation and relative-risk inference, second-order summaries, global
//! envelope tests, cross-sample ANOVA, count regression, and null-model
//! simulation. Every run writes a `manifest.json` that records the
//! effective configuration, the seed and the emitted files, so any output
//! can be reproduced exactly.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ppstat::counts::{build_counts_table, design_from_table, fit_gee_quasipoisson, Working, TABLE_TERMS};
use ppstat::envelopes::{envelope_from_generator, Side, StatName, StatisticConfig};
use ppstat::field::GridSpec;
use ppstat::geometry::{Point2, Window};
use ppstat::groupstats::{
    functional_anova_permutation, functional_levene_test, patient_curves, GroupField,
};
use ppstat::intensity::{
    adaptive_kernel_intensity, fixed_kernel_intensity, nadaraya_watson, relative_risk,
    scott_global_bandwidth, segregation_test, terrell_global_bandwidth,
};
use ppstat::nullmodels::{simulate_poisson, simulate_thomas, NullSpec, PoissonIntensity};
use ppstat::pattern::{
    filter_min_type_count, parse_pattern_csv, restrict, CsvSchema, MultitypePattern,
    PatientRecord, Selector,
};
use ppstat::report;
use ppstat::secondorder::{
    default_r_grid, fest, gcross, jfun, kcross_inhom, l_transform, pcf_cross, stoyan_bandwidth,
    uniform_r_grid, EdgeCorrection, IntensitySource, Mode, Target,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ppstat",
    version,
    about = "Spatial statistics for multitype cell point patterns"
)]
struct Cli {
    /// JSON run configuration; values present in the file override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $PPSTAT_OUT or ./ppstat-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed for all Monte Carlo work.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (results are identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse cell and clinical CSV tables into canonical pattern JSON.
    Ingest(IngestArgs),
    /// Kernel intensity surface of one type (or the unmarked pattern).
    Intensity(IntensityArgs),
    /// Monte Carlo segregation test of the type labels.
    Segregation(SegregationArgs),
    /// Spatial log relative risk of two types with tolerance p-values.
    Risk(RiskArgs),
    /// Nadaraya-Watson smoothing of a continuous mark.
    Smooth(SmoothArgs),
    /// Second-order summary function (K, L, pcf, G, F, J).
    Summary(SummaryArgs),
    /// Global envelope test of a summary statistic against a null model.
    Envelope(EnvelopeArgs),
    /// Cross-sample functional tests (variance gate + permutation ANOVA).
    Anova(AnovaArgs),
    /// Patient x type x tissue counts and the GEE count regression.
    Counts(CountsArgs),
    /// Simulate a null-model pattern.
    Simulate(SimulateArgs),
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    cells: PathBuf,
    #[arg(long)]
    clinical: PathBuf,
    /// Schema JSON mapping CSV columns onto roles; defaults to the flat
    /// export layout.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Keep only patterns with at least this many cells of every immune
    /// type (0 disables the filter).
    #[arg(long, default_value_t = 8)]
    min_type_count: usize,
}

#[derive(Args, Serialize)]
struct IntensityArgs {
    #[arg(long)]
    pattern: PathBuf,
    /// Type level; the whole pattern when omitted.
    #[arg(long = "type")]
    type_level: Option<String>,
    /// "scott", "terrell", or an explicit value.
    #[arg(long, default_value = "scott")]
    bandwidth: String,
    /// Fixed-bandwidth estimate instead of the adaptive default.
    #[arg(long)]
    fixed: bool,
    #[arg(long, default_value_t = 128)]
    grid: usize,
}

#[derive(Args, Serialize)]
struct SegregationArgs {
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long, default_value_t = 999)]
    nsim: usize,
    /// Bonferroni group size (number of parallel tests).
    #[arg(long, default_value_t = 1)]
    group_size: usize,
}

#[derive(Args, Serialize)]
struct RiskArgs {
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long)]
    i: String,
    #[arg(long)]
    j: String,
    #[arg(long, default_value_t = 99)]
    nsim: usize,
    #[arg(long, default_value_t = 64)]
    grid: usize,
}

#[derive(Args, Serialize)]
struct SmoothArgs {
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long)]
    mark: String,
    #[arg(long, default_value = "scott")]
    bandwidth: String,
    #[arg(long, default_value_t = 128)]
    grid: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SummaryStat {
    Kcross,
    Lcross,
    Pcf,
    G,
    F,
    J,
}

#[derive(Args, Serialize)]
struct SummaryArgs {
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long, value_enum, ignore_case = true)]
    stat: SummaryStat,
    #[arg(long)]
    i: Option<String>,
    #[arg(long)]
    j: Option<String>,
    /// Maximum distance (defaults to the quarter-side rule capped at 350).
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long, default_value_t = 513)]
    grid_points: usize,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliEdge::Translation)]
    edge: CliEdge,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliIntensity::Adaptive)]
    intensity: CliIntensity,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliMode::Inhomogeneous)]
    mode: CliMode,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliEdge {
    None,
    Translation,
    Border,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliIntensity {
    Constant,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliMode {
    Homogeneous,
    Inhomogeneous,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliStat {
    Kcross,
    Lcentred,
    Pcf,
    G,
    F,
    J,
    Jdot,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "camelCase")]
enum CliNull {
    Csr,
    #[value(alias = "inhomPoisson")]
    InhomPoisson,
    #[value(alias = "randomLabel")]
    RandomLabel,
    #[value(alias = "randomShift")]
    RandomShift,
    Thomas,
}

#[derive(Args, Serialize)]
struct EnvelopeArgs {
    #[arg(long)]
    pattern: PathBuf,
    #[arg(long, value_enum, ignore_case = true)]
    stat: CliStat,
    #[arg(long, value_enum, ignore_case = true)]
    null: CliNull,
    #[arg(long)]
    i: Option<String>,
    #[arg(long)]
    j: Option<String>,
    #[arg(long, default_value_t = 2999)]
    nsim: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Shift radius for randomShift (defaults to the summary range).
    #[arg(long)]
    radius: Option<f64>,
    /// Cluster parameters for the thomas null.
    #[arg(long, default_value_t = 10.0)]
    kappa: f64,
    #[arg(long, default_value_t = 10.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.02)]
    sigma: f64,
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long, default_value_t = 256)]
    grid_points: usize,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliMode::Inhomogeneous)]
    mode: CliMode,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliIntensity::Constant)]
    intensity: CliIntensity,
}

#[derive(Args, Serialize)]
struct AnovaArgs {
    /// Directory of pattern JSON files.
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    records: PathBuf,
    /// Grouping covariate: stage, prior_chemo, death, brca, parpi,
    /// primary_tumour.
    #[arg(long)]
    group: String,
    #[arg(long, default_value_t = 50_000)]
    nperm: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 64)]
    grid_points: usize,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliIntensity::Constant)]
    intensity: CliIntensity,
    /// Focal type for the per-patient curves; unmarked when omitted.
    #[arg(long)]
    i: Option<String>,
}

#[derive(Args, Serialize)]
struct CountsArgs {
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, ignore_case = true, default_value_t = CliWorking::Exchangeable)]
    working: CliWorking,
    /// Comma-separated model terms (default: the full covariate set):
    /// immune,tissue,primary,chemo,stage,brca,parpi,death,age.
    #[arg(long, value_delimiter = ',')]
    terms: Option<Vec<String>>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliWorking {
    Independence,
    Exchangeable,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, ignore_case = true)]
    model: CliModel,
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    #[arg(long, default_value_t = 10.0)]
    kappa: f64,
    #[arg(long, default_value_t = 10.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.02)]
    sigma: f64,
    /// Window JSON file ({"vertices": ...}); unit square when omitted.
    #[arg(long)]
    window: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum CliModel {
    Csr,
    Thomas,
}

/// Optional JSON run configuration; any present value overrides the
/// corresponding flag.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    /// Null-model override for the envelope subcommand.
    null: Option<NullSpec>,
}

#[derive(Debug)]
enum CliError {
    Io(std::io::Error, String),
    Data(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(e, path) => write!(f, "{path}: {e}"),
            CliError::Data(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("JSON error: {e}"))
    }
}

macro_rules! from_data_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self { CliError::Data(e.to_string()) }
        }
    )*};
}
from_data_error!(
    ppstat::pattern::PatternError,
    ppstat::geometry::GeometryError,
    ppstat::intensity::IntensityError,
    ppstat::secondorder::SecondOrderError,
    ppstat::nullmodels::NullModelError,
    ppstat::envelopes::EnvelopeError,
    ppstat::groupstats::GroupStatsError,
    ppstat::counts::CountsError,
    csv::Error
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help/--version print and exit 0.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    null_override: Option<NullSpec>,
    outputs: Vec<String>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(e, parent.display().to_string()))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::Io(e, path.display().to_string()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn manifest<T: Serialize>(&mut self, command: &str, params: &T) -> Result<(), CliError> {
        let manifest = json!({
            "command": command,
            "version": ppstat::VERSION,
            "seed": self.seed,
            "params": serde_json::to_value(params)?,
            "outputs": self.outputs,
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::Io(e, path.display().to_string()))?;
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file_cfg: FileConfig = match &cli.config {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => FileConfig::default(),
    };
    if let Some(n) = file_cfg.threads.or(cli.threads) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = file_cfg
        .out
        .or(cli.out)
        .or_else(|| std::env::var_os("PPSTAT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ppstat-out"));
    let seed = file_cfg.seed.or(cli.seed).unwrap_or(42);
    fs::create_dir_all(&out).map_err(|e| CliError::Io(e, out.display().to_string()))?;
    let mut ctx = Ctx {
        out,
        seed,
        null_override: file_cfg.null,
        outputs: Vec::new(),
    };
    match cli.cmd {
        Cmd::Ingest(a) => cmd_ingest(&mut ctx, a),
        Cmd::Intensity(a) => cmd_intensity(&mut ctx, a),
        Cmd::Segregation(a) => cmd_segregation(&mut ctx, a),
        Cmd::Risk(a) => cmd_risk(&mut ctx, a),
        Cmd::Smooth(a) => cmd_smooth(&mut ctx, a),
        Cmd::Summary(a) => cmd_summary(&mut ctx, a),
        Cmd::Envelope(a) => cmd_envelope(&mut ctx, a),
        Cmd::Anova(a) => cmd_anova(&mut ctx, a),
        Cmd::Counts(a) => cmd_counts(&mut ctx, a),
        Cmd::Simulate(a) => cmd_simulate(&mut ctx, a),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(e, path.display().to_string()))
}

fn load_pattern(path: &Path) -> Result<MultitypePattern, CliError> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn load_patterns(dir: &Path) -> Result<Vec<MultitypePattern>, CliError> {
    let mut out = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Io(e, dir.display().to_string()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        out.push(load_pattern(&p)?);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "no pattern JSON files found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn load_records(path: &Path) -> Result<Vec<PatientRecord>, CliError> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn parse_bandwidth(spec: &str, points: &[Point2]) -> Result<f64, CliError> {
    match spec {
        "scott" => Ok(scott_global_bandwidth(points)?),
        "terrell" => Ok(terrell_global_bandwidth(points)?),
        other => other
            .parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0)
            .ok_or_else(|| CliError::Data(format!("bad bandwidth '{other}'"))),
    }
}

fn cmd_ingest(ctx: &mut Ctx, a: IngestArgs) -> Result<(), CliError> {
    let schema: CsvSchema = match &a.schema {
        Some(path) => serde_json::from_str(&read_text(path)?)?,
        None => CsvSchema::default(),
    };
    let cells = fs::File::open(&a.cells).map_err(|e| CliError::Io(e, a.cells.display().to_string()))?;
    let clinical =
        fs::File::open(&a.clinical).map_err(|e| CliError::Io(e, a.clinical.display().to_string()))?;
    let (patterns, records, log) = parse_pattern_csv(cells, clinical, &schema)?;
    let kept = filter_min_type_count(&patterns, a.min_type_count);
    for p in &kept {
        ctx.write_json(&format!("patterns/{}.json", sanitize(p.patient_id())), p)?;
    }
    ctx.write_json("records.json", &records)?;
    ctx.write_json(
        "ingest_log.json",
        &json!({
            "parsed_patterns": patterns.len(),
            "kept_patterns": kept.len(),
            "min_type_count": a.min_type_count,
            "log": log,
        }),
    )?;
    println!(
        "ingested {} patterns ({} kept after the min-count filter)",
        patterns.len(),
        kept.len()
    );
    ctx.manifest("ingest", &a)
}

fn cmd_intensity(ctx: &mut Ctx, a: IntensityArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let sub = match &a.type_level {
        Some(level) => restrict(&pattern, Selector::Type(level))?,
        None => restrict(&pattern, Selector::Unmarked)?,
    };
    let eps = parse_bandwidth(&a.bandwidth, sub.points())?;
    let grid = GridSpec::square(a.grid);
    let field = if a.fixed {
        fixed_kernel_intensity(sub.points(), sub.window(), eps, grid)?
    } else {
        adaptive_kernel_intensity(sub.points(), sub.window(), eps, grid)?.0
    };
    let mut csv_buf = Vec::new();
    report::field_to_csv(&field, &mut csv_buf)?;
    ctx.write("intensity.csv", &csv_buf)?;
    let title = format!(
        "intensity: {} (eps* = {:.3})",
        a.type_level.as_deref().unwrap_or("all types"),
        eps
    );
    ctx.write("intensity.svg", report::field_to_svg(&field, &title).as_bytes())?;
    println!(
        "integrated intensity mass = {:.2} over {} points",
        field.integral(),
        sub.n()
    );
    ctx.manifest("intensity", &a)
}

fn cmd_segregation(ctx: &mut Ctx, a: SegregationArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let result = segregation_test(&pattern, a.nsim, ctx.seed, a.group_size)?;
    println!(
        "segregation: T = {:.6}, p = {:.4}, Bonferroni p = {:.4}",
        result.statistic, result.p_value, result.p_bonferroni
    );
    ctx.write_json("segregation.json", &result)?;
    ctx.manifest("segregation", &a)
}

fn cmd_risk(ctx: &mut Ctx, a: RiskArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let pi = restrict(&pattern, Selector::Type(&a.i))?;
    let pj = restrict(&pattern, Selector::Type(&a.j))?;
    let risk = relative_risk(
        pi.points(),
        pj.points(),
        pattern.window(),
        GridSpec::square(a.grid),
        a.nsim,
        ctx.seed,
    )?;
    ctx.write_json("risk.json", &risk)?;
    let title = format!("log relative risk {} vs {}", a.i, a.j);
    ctx.write("risk.svg", report::risk_to_svg(&risk, &title).as_bytes())?;
    let mut csv_buf = Vec::new();
    report::field_to_csv(&risk.log_risk, &mut csv_buf)?;
    ctx.write("risk.csv", &csv_buf)?;
    ctx.manifest("risk", &a)
}

fn cmd_smooth(ctx: &mut Ctx, a: SmoothArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let eps = parse_bandwidth(&a.bandwidth, pattern.points())?;
    let field = nadaraya_watson(&pattern, &a.mark, eps, GridSpec::square(a.grid))?;
    let mut csv_buf = Vec::new();
    report::field_to_csv(&field, &mut csv_buf)?;
    ctx.write("smooth.csv", &csv_buf)?;
    let title = format!("smoothed mark '{}' (eps = {eps:.3})", a.mark);
    ctx.write("smooth.svg", report::field_to_svg(&field, &title).as_bytes())?;
    ctx.manifest("smooth", &a)
}

fn cmd_summary(ctx: &mut Ctx, a: SummaryArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let work;
    let pat = if a.i.is_none() {
        work = restrict(&pattern, Selector::Unmarked)?;
        &work
    } else {
        &pattern
    };
    let i = a.i.clone().unwrap_or_else(|| "all".into());
    let j = match &a.j {
        Some(t) => Target::Level(t),
        None => Target::Any,
    };
    let r = match a.r0 {
        Some(r0) => uniform_r_grid(r0, a.grid_points),
        None => {
            let full = default_r_grid(pat.window());
            uniform_r_grid(*full.last().unwrap(), a.grid_points)
        }
    };
    let grid = GridSpec::default();
    let intensity = match a.intensity {
        CliIntensity::Constant => IntensitySource::Homogeneous,
        CliIntensity::Adaptive => IntensitySource::Adaptive {
            global_bandwidth: None,
            grid,
        },
    };
    let edge = match a.edge {
        CliEdge::None => EdgeCorrection::None,
        CliEdge::Translation => EdgeCorrection::Translation,
        CliEdge::Border => EdgeCorrection::Border,
    };
    let mode = match a.mode {
        CliMode::Homogeneous => Mode::Homogeneous,
        CliMode::Inhomogeneous => Mode::Inhomogeneous,
    };
    let result = match a.stat {
        SummaryStat::Kcross => kcross_inhom(pat, &i, j, &r, &intensity, edge)?,
        SummaryStat::Lcross => {
            let k = kcross_inhom(pat, &i, j, &r, &intensity, edge)?;
            l_transform(&k, false)?
        }
        SummaryStat::Pcf => {
            let b = stoyan_bandwidth(pat.n(), pat.window().area());
            let r0 = *r.last().unwrap();
            let r_pcf: Vec<f64> = r.iter().copied().filter(|&x| x >= b).collect();
            if r_pcf.is_empty() {
                return Err(CliError::Data(format!(
                    "pair-correlation bandwidth {b:.4} exceeds the whole grid (r0 = {r0:.4})"
                )));
            }
            pcf_cross(pat, &i, j, &r_pcf, &intensity, None)?
        }
        SummaryStat::G => gcross(pat, &i, j, &r, mode, &intensity)?,
        SummaryStat::F => fest(pat, j, &r, GridSpec::square(64), mode, &intensity)?,
        SummaryStat::J => jfun(pat, &i, j, &r, GridSpec::square(64), mode, &intensity)?,
    };
    let mut csv_buf = Vec::new();
    report::summary_to_csv(&result, &mut csv_buf)?;
    ctx.write("summary.csv", &csv_buf)?;
    ctx.write("summary.svg", report::summary_to_svg(&result, &result.name).as_bytes())?;
    ctx.manifest("summary", &a)
}

fn cmd_envelope(ctx: &mut Ctx, a: EnvelopeArgs) -> Result<(), CliError> {
    let pattern = load_pattern(&a.pattern)?;
    let r0 = a.r0.unwrap_or_else(|| {
        let full = default_r_grid(pattern.window());
        *full.last().unwrap()
    });
    let stat = match a.stat {
        CliStat::Kcross => StatName::Kcross,
        CliStat::Lcentred => StatName::Lcentred,
        CliStat::Pcf => StatName::Pcf,
        CliStat::G => StatName::Gcross,
        CliStat::F => StatName::Fest,
        CliStat::J => StatName::J,
        CliStat::Jdot => StatName::JdotCentred,
    };
    let r = if matches!(stat, StatName::Pcf) {
        let b = stoyan_bandwidth(pattern.n(), pattern.window().area());
        uniform_r_grid(r0, a.grid_points)
            .into_iter()
            .filter(|&x| x >= b)
            .collect()
    } else {
        uniform_r_grid(r0, a.grid_points)
    };
    let mut config = StatisticConfig::new(stat, r);
    config.i = a.i.clone();
    config.j = a.j.clone();
    config.mode = match a.mode {
        CliMode::Homogeneous => Mode::Homogeneous,
        CliMode::Inhomogeneous => Mode::Inhomogeneous,
    };
    config.constant_intensity = matches!(a.intensity, CliIntensity::Constant);
    let null = if let Some(spec) = ctx.null_override.clone() {
        spec
    } else {
        match a.null {
        CliNull::Csr => NullSpec::Csr,
        CliNull::InhomPoisson => NullSpec::InhomPoisson { bandwidth: None },
        CliNull::RandomLabel => NullSpec::RandomLabel,
        CliNull::RandomShift => NullSpec::RandomShift {
            moving_type: a
                .i
                .clone()
                .ok_or_else(|| CliError::Data("randomShift needs --i (the moving type)".into()))?,
            max_radius: a.radius.unwrap_or(r0),
        },
        CliNull::Thomas => NullSpec::Thomas {
            kappa: a.kappa,
            mu: a.mu,
            sigma: a.sigma,
        },
        }
    };
    let run = envelope_from_generator(
        &pattern,
        &config,
        &null,
        a.nsim,
        ctx.seed,
        a.alpha,
        Side::TwoSided,
    )?;
    println!(
        "envelope test {}: p = {:.4} ({})",
        run.statistic,
        run.result.p_value,
        if run.result.rejected { "rejected" } else { "not rejected" }
    );
    ctx.write_json("envelope.json", &run)?;
    ctx.write(
        "envelope.svg",
        report::envelope_to_svg(&run.result, &run.statistic).as_bytes(),
    )?;
    ctx.manifest("envelope", &a)
}

fn cmd_anova(ctx: &mut Ctx, a: AnovaArgs) -> Result<(), CliError> {
    let patterns = load_patterns(&a.patterns)?;
    let records = load_records(&a.records)?;
    let field = match a.group.as_str() {
        "stage" => GroupField::Stage,
        "prior_chemo" | "chemo" => GroupField::PriorChemo,
        "death" => GroupField::Death,
        "brca" => GroupField::Brca,
        "parpi" => GroupField::Parpi,
        "primary_tumour" | "primary" => GroupField::PrimaryTumour,
        other => return Err(CliError::Data(format!("unknown grouping '{other}'"))),
    };
    let mut template = StatisticConfig::new(StatName::Lcentred, vec![1.0]);
    template.i = a.i.clone();
    template.constant_intensity = matches!(a.intensity, CliIntensity::Constant);
    let grouped = patient_curves(&patterns, &records, &template, field, a.grid_points)?;
    let mut csv_buf = Vec::new();
    report::grouped_curves_to_csv(&grouped, &mut csv_buf)?;
    ctx.write("curves.csv", &csv_buf)?;

    let levene = functional_levene_test(&grouped, a.nperm, ctx.seed, a.alpha)?;
    let anova = functional_anova_permutation(&grouped, a.nperm, ctx.seed.wrapping_add(1), a.alpha)?;
    println!(
        "variance gate p = {:.4}; functional ANOVA p = {:.4}",
        levene.p_value, anova.p_value
    );
    ctx.write_json(
        "anova.json",
        &json!({
            "group": a.group,
            "levene_p": levene.p_value,
            "anova_p": anova.p_value,
            "levene": levene,
            "anova": anova,
        }),
    )?;
    ctx.write(
        "levene.svg",
        report::group_means_to_svg(&grouped, &levene, &format!("variance test by {}", a.group))
            .as_bytes(),
    )?;
    ctx.write(
        "anova.svg",
        report::group_means_to_svg(&grouped, &anova, &format!("functional ANOVA by {}", a.group))
            .as_bytes(),
    )?;
    ctx.manifest("anova", &a)
}

fn cmd_counts(ctx: &mut Ctx, a: CountsArgs) -> Result<(), CliError> {
    let patterns = load_patterns(&a.patterns)?;
    let records = load_records(&a.records)?;
    let table = build_counts_table(&patterns, &records)?;
    let mut csv_buf = Vec::new();
    report::counts_to_csv(&table, &mut csv_buf)?;
    ctx.write("counts.csv", &csv_buf)?;
    let terms: Vec<ppstat::counts::Term> = match &a.terms {
        None => TABLE_TERMS.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| parse_term(n))
            .collect::<Result<_, _>>()?,
    };
    let design = design_from_table(&table, &terms)?;
    let working = match a.working {
        CliWorking::Independence => Working::Independence,
        CliWorking::Exchangeable => Working::Exchangeable,
    };
    let fit = fit_gee_quasipoisson(&design, working)?;
    let mut csv_buf = Vec::new();
    report::gee_to_csv(&fit, &mut csv_buf)?;
    ctx.write("gee.csv", &csv_buf)?;
    let text = ppstat::counts::render_wald_table(&fit);
    print!("{text}");
    ctx.write("gee.txt", text.as_bytes())?;
    ctx.manifest("counts", &a)
}

fn parse_term(name: &str) -> Result<ppstat::counts::Term, CliError> {
    use ppstat::counts::Term;
    Ok(match name {
        "immune" => Term::Immune,
        "tissue" => Term::Tissue,
        "primary" | "primary_tumour" => Term::PrimaryTumour,
        "chemo" | "prior_chemo" => Term::PriorChemo,
        "stage" => Term::Stage,
        "brca" => Term::Brca,
        "parpi" => Term::Parpi,
        "death" => Term::Death,
        "age" => Term::Age,
        other => return Err(CliError::Data(format!("unknown model term '{other}'"))),
    })
}

fn cmd_simulate(ctx: &mut Ctx, a: SimulateArgs) -> Result<(), CliError> {
    let window = match &a.window {
        Some(path) => serde_json::from_str::<Window>(&read_text(path)?)?,
        None => Window::rectangle(0.0, 0.0, 1.0, 1.0).map_err(CliError::from)?,
    };
    let mut rng = ppstat::rng::master(ctx.seed);
    let points = match a.model {
        CliModel::Csr => simulate_poisson(&window, &PoissonIntensity::Constant(a.lambda), &mut rng)?,
        CliModel::Thomas => simulate_thomas(&window, a.kappa, a.mu, a.sigma, &mut rng)?,
    };
    let n = points.len();
    let pattern = MultitypePattern::new("sim", points, vec!["all".into()], vec![0; n], window)
        .map_err(CliError::from)?;
    ctx.write_json("pattern.json", &pattern)?;
    println!("simulated {n} points");
    ctx.manifest("simulate", &a)
}
