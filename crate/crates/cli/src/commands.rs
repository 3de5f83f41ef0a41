//! Subcommand implementations. Each writes its artifacts into a run
//! directory named by the hash of its configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use traverse_core::analysis::{
    case_study, cross_correlation, heatmap_text, lag_value_csv, peak_lag_distribution, CaseStudy, LagHistogram,
    PairSource, XCorrCurve,
};
use traverse_core::checkpoint::Checkpoint;
use traverse_core::data::RawDataset;
use traverse_core::gradcheck::{layer_check, model_check, operation_checks, reference_model, CheckResult};
use traverse_core::model::{Ablation, ModelConfig, ModelGraphs, ModelParams};
use traverse_core::stgraph::SpatialGraph;
use traverse_core::training::{
    fmt_mape, fmt_mean_std, mean_std, naive_last_value, repeat_seed, sweep, train, EpochRecord, MetricReport,
    SeriesDataset, Split, SweepAxis, SweepTable, TrainConfig,
};
use traverse_core::{Error, Result};

use crate::settings::RunConfig;

/// Creates `out/<command>-<hash>` and writes the config echo. An existing
/// directory is only replaced with `force`.
pub fn prepare_run_dir(out: &Path, command: &str, rc: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = out.join(format!("{command}-{}", rc.hash(command)));
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "run directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.cfg"), rc.config.to_string())?;
    Ok(dir)
}

struct Prepared {
    raw: RawDataset,
    graph: SpatialGraph,
    data: SeriesDataset,
    model: ModelConfig,
    train: TrainConfig,
}

fn prepare(rc: &RunConfig) -> Result<Prepared> {
    let (raw, graph) = rc.dataset()?;
    let model = rc.model(raw.n_nodes(), raw.n_features())?;
    let train = rc.train()?;
    let data = SeriesDataset::new(&raw, model.steps, model.horizon, train.ratios, train.target_feature)?;
    Ok(Prepared {
        raw,
        graph,
        data,
        model,
        train,
    })
}

/// Outcome of one seeded training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub naive: MetricReport,
}

fn metrics_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("seed,best_epoch,mae,rmse,mape\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.seed,
            r.best_epoch,
            r.test.mae,
            r.test.rmse,
            fmt_mape(r.test.mape)
        ));
    }
    out
}

fn horizon_csv(report: &MetricReport) -> String {
    let mut out = String::from("step,mae,rmse,mape\n");
    for (i, s) in report.per_step.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", i + 1, s.mae, s.rmse, fmt_mape(s.mape)));
    }
    out
}

/// Trains one seed, streaming the epoch log into `dir`.
fn train_one(p: &Prepared, rc: &RunConfig, seed: u64, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir)?;
    let model = ModelConfig { seed, ..p.model.clone() };
    let tcfg = TrainConfig { seed, ..p.train.clone() };
    let graphs = ModelGraphs::build(&p.graph, &model)?;
    let mut log = fs::File::create(dir.join("epochs.csv"))?;
    writeln!(log, "{}", EpochRecord::CSV_HEADER)?;
    let outcome = train(&model, &tcfg, &p.data, &graphs, |rec| {
        writeln!(log, "{}", rec.csv_row())?;
        log.flush()?;
        Ok(())
    })?;
    let ck = Checkpoint::capture(
        &rc.with_seed(seed).config,
        seed,
        outcome.best_epoch,
        &outcome.best,
        Some(&outcome.best_adam),
    );
    fs::write(dir.join("checkpoint.txt"), ck.to_text())?;
    let result = RunResult {
        seed,
        best_epoch: outcome.best_epoch,
        val: outcome.val,
        test: outcome.test,
    };
    fs::write(dir.join("metrics.csv"), metrics_csv(std::slice::from_ref(&result)))?;
    fs::write(dir.join("horizon.csv"), horizon_csv(&result.test))?;
    Ok(result)
}

fn summary(runs: &[RunResult], naive: &MetricReport) -> String {
    let col = |f: &dyn Fn(&RunResult) -> Option<f64>| -> String {
        let vals: Vec<f64> = runs.iter().filter_map(f).collect();
        if vals.len() == runs.len() {
            fmt_mean_std(&vals)
        } else {
            "undefined".into()
        }
    };
    let mut out = format!("runs: {}\n", runs.len());
    out.push_str(&format!("test MAE  {}\n", col(&|r| Some(r.test.mae))));
    out.push_str(&format!("test RMSE {}\n", col(&|r| Some(r.test.rmse))));
    out.push_str(&format!("test MAPE {}\n", col(&|r| r.test.mape)));
    out.push_str(&format!("last-value baseline: {naive}\n"));
    for r in runs {
        out.push_str(&format!(
            "seed {}: best epoch {}, validation {}, test {}\n",
            r.seed, r.best_epoch, r.val, r.test
        ));
    }
    out
}

/// Trains `repeats` seeds and reports mean ± std of the test metrics.
pub fn cmd_train(rc: &RunConfig, out: &Path, repeats: usize, force: bool) -> Result<TrainReport> {
    let repeats = repeats.max(1);
    let p = prepare(rc)?;
    let dir = prepare_run_dir(out, "train", rc, force)?;
    let base = rc.seed()?;
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let seed = repeat_seed(base, r);
        let sub = if repeats == 1 {
            dir.clone()
        } else {
            dir.join(format!("seed-{seed}"))
        };
        runs.push(train_one(&p, rc, seed, &sub)?);
    }
    let naive = naive_last_value(&p.data, Split::Test, p.train.mape_threshold)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&runs))?;
    let text = summary(&runs, &naive);
    fs::write(dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(TrainReport { dir, runs, naive })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub dir: PathBuf,
    /// Per variant, in table column order, the per-seed results.
    pub variants: Vec<(Ablation, Vec<RunResult>)>,
}

impl AblationReport {
    /// Rows MAE, MAPE, RMSE; columns the six variants; cells are means over seeds.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("metric");
        for (a, _) in &self.variants {
            out.push(',');
            out.push_str(a.name());
        }
        out.push('\n');
        let rows: [(&str, &dyn Fn(&RunResult) -> Option<f64>); 3] = [
            ("MAE", &|r| Some(r.test.mae)),
            ("MAPE", &|r| r.test.mape),
            ("RMSE", &|r| Some(r.test.rmse)),
        ];
        for (name, f) in rows {
            out.push_str(name);
            for (_, runs) in &self.variants {
                let vals: Vec<f64> = runs.iter().filter_map(f).collect();
                out.push(',');
                if vals.len() == runs.len() {
                    out.push_str(&mean_std(&vals).0.to_string());
                } else {
                    out.push_str("undefined");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every ablation variant with shared seeds.
pub fn cmd_ablate(rc: &RunConfig, out: &Path, repeats: usize, force: bool) -> Result<AblationReport> {
    let repeats = repeats.max(1);
    let p = prepare(rc)?;
    let dir = prepare_run_dir(out, "ablate", rc, force)?;
    let base = rc.seed()?;
    let mut variants = Vec::new();
    let mut runs_csv = String::from("variant,seed,best_epoch,mae,rmse,mape\n");
    for ablation in Ablation::ALL {
        let pv = Prepared {
            model: ModelConfig {
                ablation,
                ..p.model.clone()
            },
            raw: p.raw.clone(),
            graph: p.graph.clone(),
            data: p.data.clone(),
            train: p.train.clone(),
        };
        let mut runs = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let seed = repeat_seed(base, r);
            let sub = dir.join(ablation.name()).join(format!("seed-{seed}"));
            let res = train_one(&pv, rc, seed, &sub)?;
            runs_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                ablation.name(),
                seed,
                res.best_epoch,
                res.test.mae,
                res.test.rmse,
                fmt_mape(res.test.mape)
            ));
            runs.push(res);
        }
        eprintln!("{ablation}: test MAE {}", fmt_mean_std(&runs.iter().map(|r| r.test.mae).collect::<Vec<_>>()));
        variants.push((ablation, runs));
    }
    let report = AblationReport { dir, variants };
    fs::write(report.dir.join("ablation.csv"), report.table_csv())?;
    fs::write(report.dir.join("ablation_runs.csv"), runs_csv)?;
    print!("{}", report.table_csv());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct XCorrReport {
    pub dir: PathBuf,
    pub connected: LagHistogram,
    pub far: LagHistogram,
    pub pair: Option<XCorrCurve>,
}

/// Peak-lag histograms and mean curves for connected and far pairs, plus
/// one pair's curve when requested.
pub fn cmd_xcorr(rc: &RunConfig, out: &Path, force: bool) -> Result<XCorrReport> {
    let (raw, graph) = rc.dataset()?;
    let feature = rc.analysis_feature()?;
    let (k_max, norm, seed) = (rc.k_max()?, rc.xcorr_norm()?, rc.seed()?);
    let dir = prepare_run_dir(out, "xcorr", rc, force)?;
    let connected = peak_lag_distribution(&graph, &raw, feature, k_max, PairSource::Connected, norm, seed)?;
    let far = peak_lag_distribution(&graph, &raw, feature, k_max, PairSource::Far, norm, seed)?;
    for (name, h) in [("connected", &connected), ("far", &far)] {
        fs::write(dir.join(format!("{name}_peaks.csv")), lag_value_csv(&h.proportions))?;
        fs::write(dir.join(format!("{name}_mean.csv")), lag_value_csv(&h.mean_curve))?;
        match h.mode() {
            Some(m) => println!("{name} pairs: {}, most common peak lag {m}", h.pairs.len()),
            None => println!("{name} pairs: none qualify"),
        }
    }
    let pair = match rc.case_pair()? {
        Some((u, v)) => {
            if u >= raw.n_nodes() || v >= raw.n_nodes() {
                return Err(Error::Contract(format!("pair ({u}, {v}) outside the {} nodes", raw.n_nodes())));
            }
            let mut c = cross_correlation(raw.series(u, feature), raw.series(v, feature), k_max, norm)?;
            c.pair = Some((u, v, feature));
            fs::write(dir.join(format!("pair_{u}_{v}.csv")), c.to_csv())?;
            println!("pair {u} -> {v}: peak lag {}", c.peak_lag());
            Some(c)
        }
        None => None,
    };
    Ok(XCorrReport {
        dir,
        connected,
        far,
        pair,
    })
}

/// Writes a generated dataset as wide CSV with its edge list and lag table.
pub fn cmd_synth(rc: &RunConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let spec = rc
        .synth_spec()?
        .ok_or_else(|| Error::Config("synth needs a generator spec (--synth <file>)".into()))?;
    let raw = traverse_core::data::generate(&spec)?;
    let dir = prepare_run_dir(out, "synth", rc, force)?;
    fs::write(dir.join("series.csv"), raw.to_wide_csv())?;
    fs::write(dir.join("edges.txt"), spec.graph(false)?.to_edge_list_text())?;
    fs::write(dir.join("lags.csv"), spec.lag_table_csv())?;
    fs::write(dir.join("spec.cfg"), spec.to_config().to_string())?;
    println!("wrote {} nodes x {} steps to {}", raw.n_nodes(), raw.len(), dir.display());
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub dir: PathBuf,
    /// Worst relative error per check name over all seeds.
    pub worst: Vec<(String, f64)>,
    pub passed: bool,
}

/// Finite-difference checks of every operation, one layer and the
/// reference model over `seeds` seeds.
pub fn cmd_gradcheck(rc: &RunConfig, out: &Path, seeds: usize, force: bool) -> Result<GradcheckReport> {
    let base = rc.seed()?;
    let dir = prepare_run_dir(out, "gradcheck", rc, force)?;
    let (cfg, graph) = reference_model();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut note = |r: CheckResult| match worst.iter_mut().find(|(n, _)| *n == r.name) {
        Some(w) => w.1 = w.1.max(r.max_rel_error),
        None => worst.push((r.name, r.max_rel_error)),
    };
    for s in 0..seeds.max(1) as u64 {
        let seed = base.wrapping_add(s);
        for r in operation_checks(seed)? {
            note(r);
        }
        note(layer_check(seed)?);
        note(model_check(&cfg, &graph, 2, 3, seed)?);
    }
    let passed = worst.iter().all(|(_, e)| *e < traverse_core::gradcheck::TOLERANCE);
    let mut csv = String::from("check,max_rel_error\n");
    for (n, e) in &worst {
        csv.push_str(&format!("{n},{e}\n"));
        println!("{n:<24} {e:.3e}");
    }
    let overall = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    println!("max relative error {overall:.3e} ({})", if passed { "pass" } else { "FAIL" });
    fs::write(dir.join("gradcheck.csv"), csv)?;
    Ok(GradcheckReport { dir, worst, passed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub table: SweepTable,
}

/// Varies one hyperparameter and tabulates validation MAE over repeats.
pub fn cmd_sweep(rc: &RunConfig, out: &Path, repeats: usize, force: bool) -> Result<SweepReport> {
    let p = prepare(rc)?;
    let (axis, values) = rc.sweep()?;
    let axis: SweepAxis = axis.parse()?;
    let dir = prepare_run_dir(out, "sweep", rc, force)?;
    let table = sweep(&p.model, &p.train, &p.data, &p.graph, axis, &values, repeats.max(1))?;
    fs::write(dir.join("sweep.csv"), table.to_csv())?;
    for r in &table.rows {
        println!(
            "{} = {}: val MAE {}{}",
            axis.name(),
            r.value,
            fmt_mean_std(&r.runs),
            if r.argmin { "  <- lowest" } else { "" }
        );
    }
    Ok(SweepReport { dir, table })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudyReport {
    pub dir: PathBuf,
    pub study: CaseStudy,
}

/// Attention heatmaps, cross-correlation and aligned series of one edge.
/// Trains a model unless a checkpoint is given.
pub fn cmd_case_study(rc: &RunConfig, out: &Path, checkpoint: Option<&Path>, force: bool) -> Result<CaseStudyReport> {
    let p = prepare(rc)?;
    let (u, v) = rc
        .case_pair()?
        .ok_or_else(|| Error::Config("case study needs case.source and case.target".into()))?;
    let dir = prepare_run_dir(out, "case-study", rc, force)?;
    let seed = rc.seed()?;
    let model = ModelConfig { seed, ..p.model.clone() };
    let graphs = ModelGraphs::build(&p.graph, &model)?;
    let mut params = ModelParams::init(&model)?;
    match checkpoint {
        Some(path) => Checkpoint::parse(&fs::read_to_string(path)?)?.restore(&mut params)?,
        None => {
            let r = train_one(&p, rc, seed, &dir.join("training"))?;
            let text = fs::read_to_string(dir.join("training").join("checkpoint.txt"))?;
            Checkpoint::parse(&text)?.restore(&mut params)?;
            println!("trained: best epoch {}, test {}", r.best_epoch, r.test);
        }
    }
    let study = case_study(
        &params,
        &model,
        &graphs,
        &p.data,
        (u, v),
        Split::Test,
        rc.case_sample()?,
        rc.k_max()?,
    )?;
    fs::write(dir.join("heatmap.txt"), heatmap_text(&study.heatmap))?;
    fs::write(dir.join("mean_heatmap.txt"), heatmap_text(&study.mean_heatmap))?;
    fs::write(dir.join("xcorr.csv"), study.xcorr.to_csv())?;
    fs::write(dir.join("aligned.csv"), study.aligned_csv())?;
    println!("edge {u} -> {v}: cross-correlation peaks at lag {}", study.xcorr.peak_lag());
    Ok(CaseStudyReport { dir, study })
}

/// Process exit code for an error: 1 configuration or usage, 2 data, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Ingest { .. } | Error::Io(_) => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}
