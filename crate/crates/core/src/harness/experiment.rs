//! Per-replication split, calibrate, predict and score pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, MethodSpec, SCHEMA_VERSION};
use super::csvio::{load_csv, ParseReport};
use super::synth::gen_synthetic;
use crate::calibrators::{fit_calibrator, isotonic_calibrate, CalibratorAlgo};
use crate::conformal::{
    marginal_threshold, ConformalSet, GroupingSpec, MondrianCp, MulticalCp, VennCp,
};
use crate::data::{fmt_num, Dataset};
use crate::error::{Error, Result};
use crate::loss::{samples_from, LossSpec, WeightedSample};
use crate::metrics::{cal_l2_plugin, cce_groups, coverage_and_width, EvalReport, CCE_GROUPING};
use crate::multical::basis::DEFAULT_KNOTS;
use crate::multical::{BasisSpec, DesignMatrix, GridMode, MulticalModel};
use crate::par;
use crate::venn::{equal_frequency_values, ImputationGrid, VennCalibrator};

/// Prediction column marking calibration rows (0) against all others (1).
pub const CANARY_COLUMN: &str = "__canary";

/// Calibration rows that passed the leakage canary. Every calibration step
/// takes its data through this type.
#[derive(Debug, Clone, Copy)]
pub struct CalRows<'a>(&'a Dataset);

impl<'a> CalRows<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        check_canary(data)?;
        Ok(Self(data))
    }

    pub fn data(&self) -> &'a Dataset {
        self.0
    }
}

/// Fails if any row carries a poisoned canary value.
pub fn check_canary(cal: &Dataset) -> Result<()> {
    let canary = cal.pred(CANARY_COLUMN)?;
    if let Some(i) = canary.iter().position(|&v| v != 0.0) {
        return Err(Error::invalid(format!(
            "leakage canary tripped: calibration row {i} is not a calibration-split row"
        )));
    }
    Ok(())
}

/// One test point of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointRow {
    pub method: String,
    /// Row index in the full dataset.
    pub row: usize,
    pub y: f64,
    pub lower: f64,
    pub upper: f64,
    /// Interval methods only.
    pub covered: Option<bool>,
    pub width: f64,
    /// Point prediction (point calibrator or calibrated threshold).
    pub point: Option<f64>,
}

/// Band data: `oracle` is the oracle prediction for Venn methods and the
/// realized outcome for interval methods.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub method: String,
    pub x_key: f64,
    pub lo: f64,
    pub hi: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub reports: Vec<EvalReport>,
    /// Set when a stage failed; the replication then has no reports.
    pub error: Option<String>,
    #[serde(skip)]
    pub points: Vec<PointRow>,
    #[serde(skip)]
    pub bands: Vec<BandRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error of the mean over replications (`NaN` for one).
    pub se: f64,
    pub count: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let se = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        Some(Self {
            mean,
            se,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub replications_ok: usize,
    pub marginal_coverage: Option<Stat>,
    pub avg_width: Option<Stat>,
    pub cce: Option<Stat>,
    pub extras: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub schema_version: u32,
    pub cce_grouping: String,
    pub config: ExperimentConfig,
    pub parse_report: Option<ParseReport>,
    pub n_rows: usize,
    pub summary: Vec<MethodSummary>,
    pub replications: Vec<ReplicationResult>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.replications
            .iter()
            .filter(|r| r.error.is_some())
            .count()
    }

    /// `report.json`, `summary.csv`, and `points.csv` / `bands.csv` for the
    /// first successful replication.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("report.json"), json)?;
        write_summary_csv(
            &self.summary,
            std::fs::File::create(dir.join("summary.csv"))?,
        )?;
        let first = self.replications.iter().find(|r| r.error.is_none());
        let points = first.map(|r| r.points.as_slice()).unwrap_or_default();
        let bands = first.map(|r| r.bands.as_slice()).unwrap_or_default();
        write_points_csv(points, std::fs::File::create(dir.join("points.csv"))?)?;
        write_bands_csv(bands, std::fs::File::create(dir.join("bands.csv"))?)?;
        Ok(())
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn write_summary_csv<W: std::io::Write>(summary: &[MethodSummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "method",
        "replications_ok",
        "coverage_mean",
        "coverage_se",
        "width_mean",
        "width_se",
        "cce_mean",
        "cce_se",
    ])?;
    for s in summary {
        let pair = |st: &Option<Stat>| {
            (
                opt_num(st.as_ref().map(|x| x.mean)),
                opt_num(st.as_ref().map(|x| x.se).filter(|v| v.is_finite())),
            )
        };
        let (cm, cs) = pair(&s.marginal_coverage);
        let (wm, ws) = pair(&s.avg_width);
        let (em, es) = pair(&s.cce);
        wtr.write_record([
            s.method.clone(),
            s.replications_ok.to_string(),
            cm,
            cs,
            wm,
            ws,
            em,
            es,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_points_csv<W: std::io::Write>(rows: &[PointRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "method", "row", "y", "lower", "upper", "covered", "width", "point",
    ])?;
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            r.row.to_string(),
            fmt_num(r.y),
            fmt_num(r.lower),
            fmt_num(r.upper),
            r.covered
                .map(|c| u8::from(c).to_string())
                .unwrap_or_default(),
            fmt_num(r.width),
            opt_num(r.point),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_bands_csv<W: std::io::Write>(rows: &[BandRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["method", "x_key", "lo", "hi", "oracle"])?;
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            fmt_num(r.x_key),
            fmt_num(r.lo),
            fmt_num(r.hi),
            fmt_num(r.oracle),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Loads or generates the data and applies the configured preprocessing.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<ParseReport>)> {
    let (data, report) = match &cfg.data {
        DataSource::Csv { path, roles } => {
            let (d, r) = load_csv(path, roles)?;
            (d, Some(r))
        }
        DataSource::Synthetic { dgp, n, seed } => (gen_synthetic(dgp, *n, *seed)?.dataset, None),
    };
    let data = if cfg.rescale_outcome {
        rescale(&data, cfg.columns.quantile.as_deref())?
    } else {
        data
    };
    Ok((data, report))
}

/// Min-max map of the outcome to `[0, 1]`. Prediction columns follow the
/// same affine map, except the score-quantile column, which is only scaled.
fn rescale(data: &Dataset, quantile_col: Option<&str>) -> Result<Dataset> {
    let lo = data.y().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::domain("cannot rescale a constant outcome"));
    }
    let mut out = data.with_outcome(data.y().iter().map(|y| (y - lo) / span).collect())?;
    let names: Vec<String> = data.pred_names().map(str::to_string).collect();
    for name in names {
        let col = data.pred(&name)?;
        let mapped = if Some(name.as_str()) == quantile_col {
            col.iter().map(|v| v / span).collect()
        } else {
            col.iter().map(|v| (v - lo) / span).collect()
        };
        out = out.with_pred_column(&name, mapped)?;
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (data, parse_report) = load_data(cfg)?;
    // fail fast on splits that cannot work for this many rows
    cfg.split.sizes(data.len())?;
    let replications: Vec<ReplicationResult> =
        par::map_range(cfg.replications, |r| match run_replication(cfg, &data, r) {
            Ok((reports, points, bands)) => ReplicationResult {
                replication: r,
                reports,
                error: None,
                points,
                bands,
            },
            Err(e) => ReplicationResult {
                replication: r,
                reports: Vec::new(),
                error: Some(e.to_string()),
                points: Vec::new(),
                bands: Vec::new(),
            },
        });
    let summary = summarize(cfg, &replications);
    Ok(ExperimentOutcome {
        schema_version: SCHEMA_VERSION,
        cce_grouping: CCE_GROUPING.to_string(),
        config: cfg.clone(),
        parse_report,
        n_rows: data.len(),
        summary,
        replications,
    })
}

fn summarize(cfg: &ExperimentConfig, reps: &[ReplicationResult]) -> Vec<MethodSummary> {
    cfg.methods
        .iter()
        .map(|m| {
            let label = m.label();
            let reports: Vec<&EvalReport> = reps
                .iter()
                .flat_map(|r| r.reports.iter().filter(|e| e.method == label))
                .collect();
            let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<Stat> {
                Stat::of(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let mut keys: Vec<&String> = reports.iter().flat_map(|r| r.extras.keys()).collect();
            keys.sort();
            keys.dedup();
            let extras = keys
                .into_iter()
                .filter_map(|k| Some((k.clone(), collect(&|r| r.extras.get(k).copied())?)))
                .collect();
            MethodSummary {
                method: label,
                replications_ok: reports.len(),
                marginal_coverage: collect(&|r| r.marginal_coverage),
                avg_width: collect(&|r| Some(r.avg_width)),
                cce: collect(&|r| r.cce),
                extras,
            }
        })
        .collect()
}

type MethodOutput = (EvalReport, Vec<PointRow>, Vec<BandRow>);

/// Split `data` for replication `r` and run every method.
pub fn run_replication(
    cfg: &ExperimentConfig,
    data: &Dataset,
    r: usize,
) -> Result<(Vec<EvalReport>, Vec<PointRow>, Vec<BandRow>)> {
    let split = cfg.split.split(data.len(), r as u64)?;
    let mut canary = vec![1.0; data.len()];
    for &i in &split.cal {
        canary[i] = 0.0;
    }
    let marked = data.with_pred_column(CANARY_COLUMN, canary)?;
    let cal_data = marked.subset(&split.cal);
    let test = marked.subset(&split.test);
    let cal = CalRows::new(&cal_data)?;
    let ctx = Context {
        cfg,
        cal,
        test: &test,
        test_rows: &split.test,
    };
    let mut reports = Vec::new();
    let mut points = Vec::new();
    let mut bands = Vec::new();
    for m in &cfg.methods {
        let (rep, p, b) = ctx.run(m)?;
        reports.push(rep);
        points.extend(p);
        bands.extend(b);
    }
    Ok((reports, points, bands))
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    cal: CalRows<'a>,
    test: &'a Dataset,
    test_rows: &'a [usize],
}

impl Context<'_> {
    fn run(&self, m: &MethodSpec) -> Result<MethodOutput> {
        match m {
            MethodSpec::Venn { .. } | MethodSpec::VennAbers => self.venn(
                &m.label(),
                m.algo().expect("venn methods carry a calibrator"),
            ),
            MethodSpec::Multical => self.multical(&m.label()),
            _ => self.interval(m),
        }
    }

    fn basis_spec(&self) -> BasisSpec {
        self.cfg
            .basis
            .clone()
            .unwrap_or_else(|| BasisSpec::additive(self.cal.data(), DEFAULT_KNOTS))
    }

    fn venn(&self, label: &str, algo: CalibratorAlgo) -> Result<MethodOutput> {
        let loss = self.cfg.point_loss();
        let cal = self.cal.data();
        let pred = &self.cfg.columns.pred;
        let samples = samples_from(cal.pred(pred)?, &loss.targets(cal)?)?;
        let calibrator = VennCalibrator::new(algo, loss.clone(), &samples)?;
        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let grid = ImputationGrid::equal_frequency(&targets, self.cfg.grid.y_bins)?;
        let keys: Vec<f64> = samples.iter().map(|s| s.key).collect();
        let table = calibrator.batch(
            &equal_frequency_values(&keys, self.cfg.grid.pred_bins)?,
            &grid,
        )?;
        let point = fit_calibrator(&algo, &loss, &samples)?;

        let test_samples = samples_from(self.test.pred(pred)?, &loss.targets(self.test)?)?;
        let oracle = par::try_map(&test_samples, |s| {
            calibrator.oracle_prediction(s.key, s.target)
        })?;
        let point_preds: Vec<f64> = test_samples.iter().map(|s| point.eval(s.key)).collect();
        let raw: Vec<f64> = test_samples.iter().map(|s| s.key).collect();

        let mut report = EvalReport::new(label, test_samples.len());
        let mut width = 0.0;
        let mut inside = 0usize;
        let mut points = Vec::with_capacity(test_samples.len());
        let mut bands = Vec::with_capacity(test_samples.len());
        for (k, s) in test_samples.iter().enumerate() {
            let set = table.lookup(s.key);
            width += set.width();
            inside += usize::from(set.lo <= oracle[k] && oracle[k] <= set.hi);
            points.push(PointRow {
                method: label.to_string(),
                row: self.test_rows[k],
                y: self.test.y()[k],
                lower: set.lo,
                upper: set.hi,
                covered: None,
                width: set.width(),
                point: Some(point_preds[k]),
            });
            bands.push(BandRow {
                method: label.to_string(),
                x_key: s.key,
                lo: set.lo,
                hi: set.hi,
                oracle: oracle[k],
            });
        }
        let n = test_samples.len() as f64;
        report.avg_width = width / n;
        let ex = &mut report.extras;
        ex.insert("oracle_in_set".into(), inside as f64 / n);
        ex.insert(
            "loss_uncalibrated".into(),
            mean_loss(&loss, &raw, &test_samples)?,
        );
        ex.insert(
            "loss_point".into(),
            mean_loss(&loss, &point_preds, &test_samples)?,
        );
        ex.insert(
            "loss_oracle".into(),
            mean_loss(&loss, &oracle, &test_samples)?,
        );
        ex.insert(
            "cal_l2_point".into(),
            cal_l2_plugin(&point_preds, &test_samples, &loss)?,
        );
        Ok((report, points, bands))
    }

    fn multical(&self, label: &str) -> Result<MethodOutput> {
        let loss = self.cfg.point_loss();
        let cal = self.cal.data();
        let pred = self.cfg.columns.pred.as_str();
        let model = MulticalModel::fit(
            loss.clone(),
            cal,
            Some(pred),
            &self.basis_spec(),
            self.cfg.multical,
        )?;
        let grid = ImputationGrid::equal_frequency(&loss.targets(cal)?, self.cfg.grid.y_bins)?;
        let mode = if loss.is_squared_error() {
            GridMode::FullGrid
        } else {
            GridMode::Extremes
        };
        let targets = loss.targets(self.test)?;
        let idx: Vec<usize> = (0..self.test.len()).collect();
        let per_point = par::try_map(&idx, |&i| {
            let q = model.query(self.test, i, Some(pred))?;
            let set = model.venn_set(&q, &grid, mode)?;
            let oracle = model.oracle_prediction(&q, targets[i])?;
            Ok::<_, Error>((
                q.prediction,
                model.point_prediction(&q),
                oracle,
                set.lo,
                set.hi,
            ))
        })?;
        let design = model.basis().design(self.test)?;
        let raw: Vec<f64> = per_point.iter().map(|p| p.0).collect();
        let point: Vec<f64> = per_point.iter().map(|p| p.1).collect();
        let oracle: Vec<f64> = per_point.iter().map(|p| p.2).collect();
        let test_samples = samples_from(&raw, &targets)?;

        let n = idx.len() as f64;
        let mut report = EvalReport::new(label, idx.len());
        report.avg_width = per_point.iter().map(|p| p.4 - p.3).sum::<f64>() / n;
        let inside = per_point
            .iter()
            .filter(|p| p.3 <= p.2 && p.2 <= p.4)
            .count();
        let ex = &mut report.extras;
        ex.insert("oracle_in_set".into(), inside as f64 / n);
        ex.insert(
            "multical_error_uncalibrated".into(),
            multical_error(&loss, &raw, &design, &targets)?,
        );
        ex.insert(
            "multical_error_point".into(),
            multical_error(&loss, &point, &design, &targets)?,
        );
        ex.insert(
            "multical_error_oracle".into(),
            multical_error(&loss, &oracle, &design, &targets)?,
        );
        ex.insert(
            "loss_uncalibrated".into(),
            mean_loss(&loss, &raw, &test_samples)?,
        );
        ex.insert(
            "loss_point".into(),
            mean_loss(&loss, &point, &test_samples)?,
        );
        ex.insert(
            "loss_oracle".into(),
            mean_loss(&loss, &oracle, &test_samples)?,
        );

        let mut points = Vec::with_capacity(idx.len());
        let mut bands = Vec::with_capacity(idx.len());
        for (k, p) in per_point.iter().enumerate() {
            points.push(PointRow {
                method: label.to_string(),
                row: self.test_rows[k],
                y: self.test.y()[k],
                lower: p.3,
                upper: p.4,
                covered: None,
                width: p.4 - p.3,
                point: Some(p.1),
            });
            bands.push(BandRow {
                method: label.to_string(),
                x_key: p.0,
                lo: p.3,
                hi: p.4,
                oracle: p.2,
            });
        }
        Ok((report, points, bands))
    }

    fn interval(&self, m: &MethodSpec) -> Result<MethodOutput> {
        let label = m.label();
        let alpha = self.cfg.alpha;
        let cal = self.cal.data();
        let mu_col = self.cfg.columns.mu.as_str();
        let scores = abs_scores(cal, mu_col)?;
        let mu_test = self.test.pred(mu_col)?;
        let q_col = self.cfg.columns.quantile.as_deref();
        let q_cal = q_col.map(|c| cal.pred(c)).transpose()?;
        let q_test = q_col.map(|c| self.test.pred(c)).transpose()?;
        let need_q = || {
            q_cal
                .zip(q_test)
                .ok_or_else(|| Error::Config(format!("{label} needs columns.quantile")))
        };
        let levels = equal_frequency_values(&scores, (self.cfg.grid.y_bins / 2).max(1))?;
        let idx: Vec<usize> = (0..self.test.len()).collect();

        let sets: Vec<ConformalSet> = match m {
            MethodSpec::CpUncalibrated => {
                let (_, qt) = need_q()?;
                idx.iter()
                    .map(|&i| ConformalSet::from_threshold(alpha, mu_test[i], qt[i]))
                    .collect()
            }
            MethodSpec::CpMarginal => {
                let t = marginal_threshold(&scores, alpha)?;
                idx.iter()
                    .map(|&i| ConformalSet::from_threshold(alpha, mu_test[i], t))
                    .collect()
            }
            MethodSpec::CpMondrian { bins } => {
                let (qc, qt) = need_q()?;
                let cp = MondrianCp::new(GroupingSpec::PredictionBins(*bins), qc, &scores, alpha)?;
                idx.iter()
                    .map(|&i| cp.interval(mu_test[i], qt[i]))
                    .collect::<Result<_>>()?
            }
            MethodSpec::CpVenn { .. } | MethodSpec::CpVennAbers => {
                let (qc, qt) = need_q()?;
                let cp = VennCp::new(
                    m.algo().expect("venn methods carry a calibrator"),
                    alpha,
                    qc,
                    &scores,
                )?;
                par::try_map(&idx, |&i| cp.symmetric_interval(mu_test[i], qt[i], &levels))?
            }
            MethodSpec::CpMultical => {
                let cp = MulticalCp::new(
                    alpha,
                    cal,
                    &scores,
                    &self.basis_spec(),
                    None,
                    self.cfg.multical,
                )?;
                par::try_map(&idx, |&i| {
                    let q = cp.query(self.test, i)?;
                    cp.symmetric_interval(&q, mu_test[i], &levels)
                })?
            }
            MethodSpec::Venn { .. } | MethodSpec::VennAbers | MethodSpec::Multical => {
                unreachable!("point methods are dispatched elsewhere")
            }
        };

        let y = self.test.y();
        let (coverage, width) = coverage_and_width(&sets, y)?;
        let mut report = EvalReport::new(&label, sets.len());
        report.marginal_coverage = Some(coverage);
        report.avg_width = width;
        let covered: Vec<bool> = sets.iter().zip(y).map(|(s, &v)| s.contains(v)).collect();
        if let (Some(qc), Some(qt)) = (q_cal, q_test) {
            let fstar = isotonic_calibrate(&LossSpec::pinball(alpha), &samples_from(qc, &scores)?)?;
            let (cce, groups) = cce_groups(&covered, &fstar.eval_all(qt), alpha)?;
            report.cce = Some(cce);
            report.per_group = groups;
        }
        let n = sets.len() as f64;
        let rate =
            |f: &dyn Fn(&ConformalSet) -> bool| sets.iter().filter(|s| f(s)).count() as f64 / n;
        report
            .extras
            .insert("tie_rate".into(), rate(&|s| !s.tie_events.is_empty()));
        report
            .extras
            .insert("truncated_rate".into(), rate(&|s| s.truncated));
        report
            .extras
            .insert("empty_rate".into(), rate(&|s| s.is_empty()));

        let key = |i: usize| q_test.map_or(mu_test[i], |q| q[i]);
        let mut points = Vec::with_capacity(sets.len());
        let mut bands = Vec::with_capacity(sets.len());
        for (k, s) in sets.iter().enumerate() {
            points.push(PointRow {
                method: label.clone(),
                row: self.test_rows[k],
                y: y[k],
                lower: s.lower(),
                upper: s.upper(),
                covered: Some(covered[k]),
                width: s.width(),
                point: None,
            });
            bands.push(BandRow {
                method: label.clone(),
                x_key: key(k),
                lo: s.lower(),
                hi: s.upper(),
                oracle: y[k],
            });
        }
        Ok((report, points, bands))
    }
}

/// `|y - mu|` for every row.
pub fn abs_scores(data: &Dataset, mu_column: &str) -> Result<Vec<f64>> {
    let mu = data.pred(mu_column)?;
    Ok(data
        .y()
        .iter()
        .zip(mu)
        .map(|(y, m)| (y - m).abs())
        .collect())
}

fn mean_loss(loss: &LossSpec, preds: &[f64], samples: &[WeightedSample]) -> Result<f64> {
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(samples) {
        total += loss.value(*p, s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Squared error: `|| Phi^T (y - yhat) / n ||_2`. Pinball: the same with the
/// loss derivative in place of the residual.
fn multical_error(
    loss: &LossSpec,
    preds: &[f64],
    design: &DesignMatrix,
    targets: &[f64],
) -> Result<f64> {
    if loss.is_squared_error() {
        return crate::multical::multicalibration_error(preds, design, targets);
    }
    let d = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| loss.derivative(p, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(design.transpose_times(&d).norm() / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{DgpName, SyntheticDgp};

    fn config(methods: Vec<MethodSpec>, n: usize, reps: usize) -> ExperimentConfig {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataSource::Synthetic {
                dgp: SyntheticDgp::new(DgpName::HeteroGauss),
                n,
                seed: 11,
            },
            split: Default::default(),
            methods,
            alpha: 0.1,
            loss: None,
            columns: Default::default(),
            grid: super::super::config::GridConfig {
                y_bins: 40,
                pred_bins: 40,
            },
            basis: None,
            multical: Default::default(),
            replications: reps,
            output_dir: None,
            rescale_outcome: false,
        }
    }

    #[test]
    fn canary_trips_on_poisoned_rows() {
        let data = gen_synthetic(&SyntheticDgp::new(DgpName::HeteroGauss), 10, 0)
            .unwrap()
            .dataset;
        let mut flags = vec![0.0; 10];
        assert!(
            check_canary(&data.with_pred_column(CANARY_COLUMN, flags.clone()).unwrap()).is_ok()
        );
        flags[3] = 1.0;
        assert!(CalRows::new(&data.with_pred_column(CANARY_COLUMN, flags).unwrap()).is_err());
    }

    #[test]
    fn every_method_runs() {
        let methods = vec![
            MethodSpec::Venn { bins: 5 },
            MethodSpec::VennAbers,
            MethodSpec::Multical,
            MethodSpec::CpUncalibrated,
            MethodSpec::CpVenn { bins: 5 },
            MethodSpec::CpVennAbers,
            MethodSpec::CpMarginal,
            MethodSpec::CpMondrian { bins: 5 },
            MethodSpec::CpMultical,
        ];
        let out = run_experiment(&config(methods, 300, 2)).unwrap();
        assert_eq!(out.failures(), 0, "{:?}", out.replications[0].error);
        assert_eq!(out.summary.len(), 9);
        for s in &out.summary {
            assert_eq!(s.replications_ok, 2);
            assert!(
                s.avg_width.as_ref().unwrap().mean.is_finite(),
                "{}",
                s.method
            );
        }
        let vs = &out.summary[1];
        assert!(vs.extras["oracle_in_set"].mean <= 1.0);
        assert!(out.summary[6].marginal_coverage.is_some());
        assert!(out.summary[0].marginal_coverage.is_none());
    }

    #[test]
    fn rescale_maps_outcome_to_unit_interval() {
        let mut cfg = config(vec![MethodSpec::CpMarginal], 200, 1);
        cfg.rescale_outcome = true;
        let (d, _) = load_data(&cfg).unwrap();
        let lo = d.y().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.y().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
        // scores scale with the outcome, the quantile column scales alike
        let (raw, _) = load_data(&config(vec![MethodSpec::CpMarginal], 200, 1)).unwrap();
        let span = raw.y().iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - raw.y().iter().copied().fold(f64::INFINITY, f64::min);
        let s0 = abs_scores(&raw, "mu").unwrap();
        let s1 = abs_scores(&d, "mu").unwrap();
        assert!((s1[4] - s0[4] / span).abs() < 1e-12);
        assert!((d.pred("q").unwrap()[4] - raw.pred("q").unwrap()[4] / span).abs() < 1e-12);
    }

    #[test]
    fn stage_errors_are_recorded_per_replication() {
        let mut cfg = config(vec![MethodSpec::CpMarginal], 100, 2);
        cfg.columns.mu = "missing".into();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures(), 2);
        assert_eq!(out.summary[0].replications_ok, 0);
    }
}
