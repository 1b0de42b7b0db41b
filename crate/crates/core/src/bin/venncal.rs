//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use venncal::calibrators::{
    check_in_sample_calibration, fit_calibrator, isotonic_calibrate, BinningConfig, CalibratorAlgo,
};
use venncal::conformal::{
    marginal_threshold, write_rows, ConformalSet, GroupingSpec, MondrianCp, MulticalCp, VennCp,
};
use venncal::data::Dataset;
use venncal::harness::experiment::abs_scores;
use venncal::harness::{
    gen_synthetic, load_csv, run_experiment, ColumnRoles, DgpName, ExperimentConfig, SyntheticDgp,
};
use venncal::loss::{samples_from, LossSpec, ScoreSpec};
use venncal::metrics::{cce_groups, coverage_and_width, EvalReport};
use venncal::multical::basis::DEFAULT_KNOTS;
use venncal::multical::{
    multicalibration_error, BasisSpec, GridMode, MulticalModel, MulticalOptions,
};
use venncal::venn::{equal_frequency_values, ImputationGrid, VennCalibrator};
use venncal::Error;

#[derive(Parser)]
#[command(
    name = "venncal",
    version,
    about = "Venn, Venn-Abers and Venn multicalibration with conformal intervals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a point calibrator (histogram binning or isotonic) and check in-sample calibration.
    Calibrate(CalibrateArgs),
    /// Venn calibration with histogram binning at query predictions.
    Venn(VennArgs),
    /// Venn calibration with isotonic regression at query predictions.
    VennAbers(VennArgs),
    /// Venn multicalibration over an additive spline basis.
    Multical(MulticalArgs),
    /// Conformal intervals for the rows of a query file.
    Conformal(ConformalArgs),
    /// Coverage, width and CCE of precomputed intervals.
    Evaluate(EvaluateArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Run an experiment from a JSON config.
    Run(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Calibration CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long, default_value = "y")]
    outcome: String,
    /// Comma-separated feature columns [default: every column not used otherwise].
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Comma-separated feature columns to treat as categorical.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    /// Squared error.
    #[value(alias = "squared-error")]
    Se,
    /// Pinball loss targeting the (1 - alpha)-quantile of the outcome.
    Pinball,
    /// Pinball loss on the score |y - mu| (needs --mu).
    ScorePinball,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, value_enum, default_value = "se")]
    loss: LossKind,
    /// Miscoverage level of the pinball losses.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Score center column for score-pinball.
    #[arg(long)]
    mu: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibratorKind {
    Histogram,
    Isotonic,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Prediction column to calibrate.
    #[arg(long)]
    pred: String,
    #[arg(long, value_enum, default_value = "isotonic")]
    calibrator: CalibratorKind,
    /// Number of uniform-mass bins for histogram binning.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VennArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Prediction column to calibrate.
    #[arg(long)]
    pred: String,
    /// Number of uniform-mass bins (venn only).
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Query predictions; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    x_pred: Vec<f64>,
    /// Equal-frequency imputation grid size over the calibration targets.
    #[arg(long, default_value_t = 200)]
    y_bins: usize,
    /// Explicit imputation grid (comma-separated), overriding --y-bins.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    y_grid: Option<Vec<f64>>,
    /// Also tabulate Venn sets at this many equal-frequency prediction keys.
    #[arg(long)]
    pred_grid: Option<usize>,
    /// CSV destination of the --pred-grid table (x_key, imputed_y, prediction).
    #[arg(long, requires = "pred_grid")]
    table_out: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MulticalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Prediction column to calibrate [default: the zero model].
    #[arg(long)]
    pred: Option<String>,
    /// Interior knots per continuous feature.
    #[arg(long, default_value_t = DEFAULT_KNOTS)]
    knots: usize,
    /// Use only an intercept.
    #[arg(long)]
    intercept_only: bool,
    /// Ridge penalty on the Gram matrix (squared error).
    #[arg(long, default_value_t = venncal::multical::DEFAULT_RIDGE)]
    ridge: f64,
    /// CSV of query rows (same columns as --data) for Venn multicalibration sets.
    #[arg(long)]
    query: Option<PathBuf>,
    /// Query row indices [default: all].
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<usize>>,
    #[arg(long, default_value_t = 200)]
    y_bins: usize,
    /// Evaluate only the grid extremes (after a monotonicity check).
    #[arg(long)]
    extremes: bool,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntervalMethod {
    Uncalibrated,
    Marginal,
    Mondrian,
    Venn,
    VennAbers,
    Multical,
}

#[derive(Args)]
struct ConformalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Query CSV with the same columns (outcome included).
    #[arg(long)]
    query: PathBuf,
    #[arg(long, value_enum, default_value = "venn-abers")]
    method: IntervalMethod,
    /// Score center column.
    #[arg(long, default_value = "mu")]
    mu: String,
    /// Score quantile model column (uncalibrated, mondrian, venn, venn-abers; also enables CCE).
    #[arg(long)]
    quantile: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Bins for venn and mondrian.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Knots per continuous feature for multical.
    #[arg(long, default_value_t = DEFAULT_KNOTS)]
    knots: usize,
    /// Outcome grid size (half as many score levels, mirrored around mu).
    #[arg(long, default_value_t = 200)]
    y_bins: usize,
    /// Per-row CSV (lower, upper, covered, width).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON array of the full sets.
    #[arg(long)]
    sets_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// CSV with one row per test point.
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "lower")]
    lower: String,
    #[arg(long, default_value = "upper")]
    upper: String,
    /// Column of calibrated threshold levels used to group CCE.
    #[arg(long)]
    fstar: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value = "evaluated")]
    method: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum DgpArg {
    HeteroGauss,
    SkewGamma,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    dgp: DgpArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Miscoverage level targeted by the `q` column.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Destination CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config and VENNCAL_OUT_DIR.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Calibrate(a) => calibrate(a),
        Command::Venn(a) => venn(a, false),
        Command::VennAbers(a) => venn(a, true),
        Command::Multical(a) => multical(a),
        Command::Conformal(a) => conformal(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> CliResult {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

impl LossArgs {
    fn spec(&self) -> CliResult<LossSpec> {
        match self.loss {
            LossKind::Se => Ok(LossSpec::SquaredError),
            LossKind::Pinball => {
                check_alpha(self.alpha)?;
                Ok(LossSpec::pinball(self.alpha))
            }
            LossKind::ScorePinball => {
                check_alpha(self.alpha)?;
                let mu = self
                    .mu
                    .clone()
                    .ok_or_else(|| usage("--loss score-pinball requires --mu"))?;
                Ok(LossSpec::ScorePinball {
                    alpha: self.alpha,
                    score: ScoreSpec::AbsResidual { mu_column: mu },
                })
            }
        }
    }

    fn columns(&self) -> Vec<String> {
        match self.loss {
            LossKind::ScorePinball => self.mu.iter().cloned().collect(),
            _ => Vec::new(),
        }
    }
}

impl DataArgs {
    fn roles(&self, predictions: Vec<String>) -> ColumnRoles {
        let mut preds = predictions;
        preds.sort();
        preds.dedup();
        ColumnRoles {
            outcome: self.outcome.clone(),
            predictions: preds,
            features: self.features.clone(),
            categorical: self.categorical.clone(),
        }
    }

    fn load(&self, predictions: Vec<String>) -> CliResult<Dataset> {
        self.load_path(&self.data, predictions)
    }

    fn load_path(&self, path: &Path, predictions: Vec<String>) -> CliResult<Dataset> {
        let (data, report) = load_csv(path, &self.roles(predictions))?;
        if !report.dropped.is_empty() {
            eprintln!(
                "note: {} of {} rows in {} dropped for missing values",
                report.dropped.len(),
                report.rows_read,
                path.display()
            );
        }
        Ok(data)
    }
}

fn algo(kind: CalibratorKind, bins: usize) -> CliResult<CalibratorAlgo> {
    match kind {
        CalibratorKind::Isotonic => Ok(CalibratorAlgo::Isotonic),
        CalibratorKind::Histogram if bins == 0 => Err(usage("--bins must be positive")),
        CalibratorKind::Histogram => {
            Ok(CalibratorAlgo::Histogram(BinningConfig::uniform_mass(bins)))
        }
    }
}

fn calibrate(a: CalibrateArgs) -> CliResult {
    let loss = a.loss.spec()?;
    let mut cols = a.loss.columns();
    cols.push(a.pred.clone());
    let data = a.data.load(cols)?;
    let samples = samples_from(data.pred(&a.pred)?, &loss.targets(&data)?)?;
    let cal = fit_calibrator(&algo(a.calibrator, a.bins)?, &loss, &samples)?;
    let check = check_in_sample_calibration(&loss, &cal, &samples)?;
    emit(
        &json!({
            "loss": loss,
            "calibrator": cal,
            "in_sample": {
                "passes": check.passes(),
                "max_abs_derivative_sum": check.max_abs_derivative_sum(),
                "levels": check.levels,
            },
        }),
        a.out.as_deref(),
    )
}

fn venn(a: VennArgs, isotonic: bool) -> CliResult {
    let loss = a.loss.spec()?;
    let kind = if isotonic {
        CalibratorKind::Isotonic
    } else {
        CalibratorKind::Histogram
    };
    if a.x_pred.is_empty() && a.pred_grid.is_none() {
        return Err(usage("give at least one --x-pred or --pred-grid"));
    }
    let mut cols = a.loss.columns();
    cols.push(a.pred.clone());
    let data = a.data.load(cols)?;
    let samples = samples_from(data.pred(&a.pred)?, &loss.targets(&data)?)?;
    let calibrator = VennCalibrator::new(algo(kind, a.bins)?, loss, &samples)?;
    let grid = match &a.y_grid {
        Some(values) => ImputationGrid::explicit(values.clone())?,
        None => {
            let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
            ImputationGrid::equal_frequency(&targets, a.y_bins)?
        }
    };
    let sets = a
        .x_pred
        .iter()
        .map(|&x| calibrator.venn_set(x, &grid))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = a.pred_grid {
        let keys: Vec<f64> = samples.iter().map(|s| s.key).collect();
        let table = calibrator.batch(&equal_frequency_values(&keys, m)?, &grid)?;
        match &a.table_out {
            Some(p) => table.write_csv(std::fs::File::create(p)?)?,
            None if sets.is_empty() => return emit(&table, a.out.as_deref()),
            None => return Err(usage("--pred-grid with --x-pred needs --table-out")),
        }
    }
    match sets.as_slice() {
        [] => Ok(()),
        [one] => emit(one, a.out.as_deref()),
        many => emit(&many, a.out.as_deref()),
    }
}

fn multical(a: MulticalArgs) -> CliResult {
    let loss = a.loss.spec()?;
    let mut cols = a.loss.columns();
    cols.extend(a.pred.iter().cloned());
    let data = a.data.load(cols.clone())?;
    let spec = if a.intercept_only {
        BasisSpec::intercept_only()
    } else {
        BasisSpec::additive(&data, a.knots)
    };
    let options = MulticalOptions {
        ridge: a.ridge,
        ..Default::default()
    };
    let pred = a.pred.as_deref();
    let model = MulticalModel::fit(loss.clone(), &data, pred, &spec, options)?;
    let targets = loss.targets(&data)?;
    let raw: Vec<f64> = match pred {
        Some(c) => data.pred(c)?.to_vec(),
        None => vec![0.0; data.len()],
    };
    let offsets = model.design().times(&model.point_fit().beta);
    let point: Vec<f64> = raw.iter().zip(&offsets).map(|(f, g)| f + g).collect();
    let mut report = json!({
        "loss": loss,
        "basis_columns": model.basis().column_names(),
        "knots": model.basis().knots(),
        "warnings": model.basis().warnings(),
        "fit": model.point_fit(),
    });
    if loss.is_squared_error() {
        report["multicalibration_error"] = json!({
            "uncalibrated": multicalibration_error(&raw, model.design(), &targets)?,
            "point": multicalibration_error(&point, model.design(), &targets)?,
        });
    }
    if let Some(qpath) = &a.query {
        let query = a.data.load_path(qpath, cols)?;
        let grid = ImputationGrid::equal_frequency(&targets, a.y_bins)?;
        let mode = if a.extremes {
            GridMode::Extremes
        } else {
            GridMode::FullGrid
        };
        let rows = a.rows.clone().unwrap_or_else(|| (0..query.len()).collect());
        let mut out = Vec::with_capacity(rows.len());
        for i in rows {
            if i >= query.len() {
                return Err(usage(format!(
                    "query row {i} out of range (query has {} rows)",
                    query.len()
                )));
            }
            let q = model.query(&query, i, pred)?;
            out.push(json!({
                "row": i,
                "prediction": q.prediction,
                "point": model.point_prediction(&q),
                "venn_set": model.venn_set(&q, &grid, mode)?,
            }));
        }
        report["queries"] = json!(out);
    }
    emit(&report, a.out.as_deref())
}

fn conformal(a: ConformalArgs) -> CliResult {
    check_alpha(a.alpha)?;
    let needs_q = matches!(
        a.method,
        IntervalMethod::Uncalibrated
            | IntervalMethod::Mondrian
            | IntervalMethod::Venn
            | IntervalMethod::VennAbers
    );
    if needs_q && a.quantile.is_none() {
        return Err(usage("this --method needs --quantile"));
    }
    if matches!(a.method, IntervalMethod::Venn | IntervalMethod::Mondrian) && a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let mut cols = vec![a.mu.clone()];
    cols.extend(a.quantile.iter().cloned());
    let cal = a.data.load(cols.clone())?;
    let test = a.data.load_path(&a.query, cols)?;
    let scores = abs_scores(&cal, &a.mu)?;
    let mu = test.pred(&a.mu)?;
    let qc = a.quantile.as_deref().map(|c| cal.pred(c)).transpose()?;
    let qt = a.quantile.as_deref().map(|c| test.pred(c)).transpose()?;
    let levels = equal_frequency_values(&scores, (a.y_bins / 2).max(1))?;
    let n = test.len();
    let sets: Vec<ConformalSet> = match a.method {
        IntervalMethod::Uncalibrated => {
            let qt = qt.expect("checked above");
            (0..n)
                .map(|i| ConformalSet::from_threshold(a.alpha, mu[i], qt[i]))
                .collect()
        }
        IntervalMethod::Marginal => {
            let t = marginal_threshold(&scores, a.alpha)?;
            (0..n)
                .map(|i| ConformalSet::from_threshold(a.alpha, mu[i], t))
                .collect()
        }
        IntervalMethod::Mondrian => {
            let (qc, qt) = (qc.expect("checked above"), qt.expect("checked above"));
            let cp = MondrianCp::new(GroupingSpec::PredictionBins(a.bins), qc, &scores, a.alpha)?;
            (0..n)
                .map(|i| cp.interval(mu[i], qt[i]))
                .collect::<Result<_, _>>()?
        }
        IntervalMethod::Venn | IntervalMethod::VennAbers => {
            let (qc, qt) = (qc.expect("checked above"), qt.expect("checked above"));
            let kind = if matches!(a.method, IntervalMethod::Venn) {
                CalibratorKind::Histogram
            } else {
                CalibratorKind::Isotonic
            };
            let cp = VennCp::new(algo(kind, a.bins)?, a.alpha, qc, &scores)?;
            (0..n)
                .map(|i| cp.symmetric_interval(mu[i], qt[i], &levels))
                .collect::<Result<_, _>>()?
        }
        IntervalMethod::Multical => {
            let spec = BasisSpec::additive(&cal, a.knots);
            let cp = MulticalCp::new(
                a.alpha,
                &cal,
                &scores,
                &spec,
                None,
                MulticalOptions::default(),
            )?;
            (0..n)
                .map(|i| cp.symmetric_interval(&cp.query(&test, i)?, mu[i], &levels))
                .collect::<Result<_, _>>()?
        }
    };
    let y = test.y();
    let (coverage, width) = coverage_and_width(&sets, y)?;
    let mut report = EvalReport::new(format!("cp-{}", method_name(a.method)), n);
    report.marginal_coverage = Some(coverage);
    report.avg_width = width;
    if let (Some(qc), Some(qt)) = (qc, qt) {
        let fstar = isotonic_calibrate(&LossSpec::pinball(a.alpha), &samples_from(qc, &scores)?)?;
        let covered: Vec<bool> = sets.iter().zip(y).map(|(s, &v)| s.contains(v)).collect();
        let (cce, groups) = cce_groups(&covered, &fstar.eval_all(qt), a.alpha)?;
        report.cce = Some(cce);
        report.per_group = groups;
    }
    if let Some(p) = &a.out {
        write_rows(&sets, y, std::fs::File::create(p)?)?;
    }
    if let Some(p) = &a.sets_out {
        emit(&sets, Some(p))?;
    }
    emit(&report, None)
}

fn method_name(m: IntervalMethod) -> &'static str {
    match m {
        IntervalMethod::Uncalibrated => "uncalibrated",
        IntervalMethod::Marginal => "marginal",
        IntervalMethod::Mondrian => "mondrian",
        IntervalMethod::Venn => "venn",
        IntervalMethod::VennAbers => "venn-abers",
        IntervalMethod::Multical => "multical",
    }
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    check_alpha(a.alpha)?;
    let mut rdr = csv::Reader::from_path(&a.points).map_err(Error::from)?;
    let header = rdr.headers().map_err(Error::from)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Runtime(Error::MissingColumn(name.to_string())))
    };
    let (iy, ilo, ihi) = (col(&a.outcome)?, col(&a.lower)?, col(&a.upper)?);
    let ifs = a.fstar.as_deref().map(col).transpose()?;
    let mut y = Vec::new();
    let mut sets = Vec::new();
    let mut fstar = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let num = |j: usize, blank_ok: bool| -> CliResult<f64> {
            let cell = rec.get(j).unwrap_or("").trim();
            if blank_ok && (cell.is_empty() || cell == "NaN") {
                return Ok(f64::NAN);
            }
            cell.parse::<f64>().map_err(|_| {
                Failure::Runtime(Error::NonNumeric {
                    row: k + 1,
                    column: header[j].to_string(),
                    value: cell.to_string(),
                })
            })
        };
        y.push(num(iy, false)?);
        let (lo, hi) = (num(ilo, true)?, num(ihi, true)?);
        sets.push(if lo.is_nan() || hi.is_nan() || lo > hi {
            ConformalSet::from_threshold(a.alpha, 0.0, -1.0)
        } else {
            ConformalSet::from_threshold(a.alpha, 0.5 * (lo + hi), 0.5 * (hi - lo))
        });
        if let Some(j) = ifs {
            fstar.push(num(j, false)?);
        }
    }
    if y.is_empty() {
        return Err(Failure::Runtime(Error::EmptyFile(a.points.clone())));
    }
    let (coverage, width) = coverage_and_width(&sets, &y)?;
    let mut report = EvalReport::new(a.method, y.len());
    report.marginal_coverage = Some(coverage);
    report.avg_width = width;
    if ifs.is_some() {
        let covered: Vec<bool> = sets.iter().zip(&y).map(|(s, &v)| s.contains(v)).collect();
        let (cce, groups) = cce_groups(&covered, &fstar, a.alpha)?;
        report.cce = Some(cce);
        report.per_group = groups;
    }
    emit(&report, None)
}

fn synth(a: SynthArgs) -> CliResult {
    check_alpha(a.alpha)?;
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut dgp = SyntheticDgp::new(match a.dgp {
        DgpArg::HeteroGauss => DgpName::HeteroGauss,
        DgpArg::SkewGamma => DgpName::SkewGamma,
    });
    dgp.models.alpha = a.alpha;
    let data = gen_synthetic(&dgp, a.n, a.seed)?.dataset;
    match &a.out {
        Some(p) => data.write_csv(std::fs::File::create(p)?)?,
        None => data.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run(a: RunArgs) -> CliResult {
    let cfg = match ExperimentConfig::from_path(&a.config) {
        Ok(c) => c,
        Err(e @ (Error::Json(_) | Error::Config(_))) => {
            return Err(usage(format!("{}: {e}", a.config.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.resolve_output_dir());
    let outcome = run_experiment(&cfg)?;
    outcome.write(&dir)?;
    for r in outcome.replications.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "replication {} failed: {}",
            r.replication,
            r.error.as_deref().unwrap_or("")
        );
    }
    venncal::harness::experiment::write_summary_csv(&outcome.summary, std::io::stdout().lock())?;
    if outcome.failures() == outcome.replications.len() {
        return Err(Failure::Runtime(Error::Domain(
            "every replication failed".into(),
        )));
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}
