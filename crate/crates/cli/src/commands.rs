use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ctr_core::bench::{bench_on, run_bench};
use ctr_core::data::Dataset;
use ctr_core::eval::{c_index, kfold_cv, mean_stderr, period_stratified_improvement, FoldReport, FoldResult};
use ctr_core::io::{self, load_json, save_json, write_atomic};
use ctr_core::nn::FdOptions;
use ctr_core::report::{bar_chart_svg, comparison_csv, comparison_text, period_chart_svg, period_csv};
use ctr_core::synth::generate;
use ctr_core::train::{
    gradient_suite, initial_pipeline, split_validation, static_features, train_model, Pipeline, TrainedModel,
    STATIC_QUANTILES,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{Cli, Command, Failure, Result};

const DEFAULT_OUTPUT_DIR: &str = "ctr-out";

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, flag: Option<&Path>) -> Result<Dataset> {
        let dir = self.config.data_dir(flag)?;
        Ok(io::ingest(&dir, self.config.imputation)?)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        Ok(write_atomic(&self.path(name), text.as_bytes())?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        Ok(save_json(&self.path(name), value)?)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = ExperimentConfig::load(cli.global.config.as_deref())?;
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let needs_seed = !matches!(cli.command, Command::Report { .. } | Command::Gradcheck { .. });
    if needs_seed {
        config.resolve_seed(cli.global.seed)?;
    }
    let ctx = Ctx { config, out };
    match cli.command {
        Command::Generate { states, records } => cmd_generate(ctx, states, records),
        Command::Featurize { data, checkpoint, with_static } => {
            cmd_featurize(ctx, data.as_deref(), checkpoint.as_deref(), with_static)
        }
        Command::Train { data } => cmd_train(ctx, data.as_deref()),
        Command::Evaluate { data, checkpoint } => cmd_evaluate(ctx, data.as_deref(), checkpoint.as_deref()),
        Command::Bench { data } => cmd_bench(ctx, data.as_deref()),
        Command::Gradcheck { seeds, max_per_block, full, tolerance } => {
            cmd_gradcheck(ctx, &seeds, (!full).then_some(max_per_block), tolerance)
        }
        Command::Report { bench, a, b, data, thresholds } => cmd_report(ctx, bench, a.zip(b), data, thresholds),
    }
}

fn cmd_generate(mut ctx: Ctx, states: Option<usize>, records: Option<usize>) -> Result<()> {
    if let Some(k) = states {
        ctx.config.synth.num_states = k;
    }
    if let Some(n) = records {
        ctx.config.synth.records = n;
    }
    let synth = generate(&ctx.config.synth)?;
    io::write_synth(&ctx.out, &synth)?;
    println!("wrote {} records to {}", synth.dataset.len(), ctx.out.display());
    Ok(())
}

fn feature_columns(pipeline: &Pipeline, width: usize, demographics: usize) -> Vec<String> {
    let prefix = if pipeline.num_states().is_some() { "z" } else { "s" };
    let n = width - demographics;
    let mut cols: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    cols.extend((n..width).map(|i| format!("demo{}", i - n)));
    cols
}

fn table(header: &[String], ids: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = format!("record_id,{}\n", header.join(","));
    for (id, row) in ids.iter().zip(rows) {
        out.push_str(id);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct FeaturizeMeta<'a> {
    source: String,
    columns: Vec<String>,
    pipeline: &'a Pipeline,
    config: &'a ExperimentConfig,
}

fn cmd_featurize(ctx: Ctx, data: Option<&Path>, checkpoint: Option<&Path>, with_static: bool) -> Result<()> {
    let dataset = ctx.dataset(data)?;
    let (pipeline, source) = match checkpoint {
        Some(path) => (load_json::<TrainedModel>(path)?.pipeline, path.display().to_string()),
        None => (initial_pipeline(&dataset, &ctx.config.train)?, "fitted from config".to_string()),
    };
    let features = pipeline.features(&dataset)?;
    let columns = feature_columns(&pipeline, features.ncols(), dataset.demographics_dim());
    let ids: Vec<&str> = dataset.records().iter().map(|r| r.sequence.record_id()).collect();
    ctx.write_text("features.csv", &table(&columns, &ids, features.rows().into_iter().map(|r| r.to_vec())))?;
    if with_static {
        let mut names: Vec<String> = (0..dataset.dim()).map(|d| format!("x{d}")).collect();
        names.push("stay".into());
        let mut stats = vec!["mean".to_string(), "std".to_string()];
        stats.extend(STATIC_QUANTILES.iter().map(|q| format!("q{}", (q * 100.0).round())));
        let header: Vec<String> = names.iter().flat_map(|c| stats.iter().map(move |s| format!("{c}_{s}"))).collect();
        let rows = dataset.records().iter().map(|r| static_features(&r.sequence));
        ctx.write_text("static_features.csv", &table(&header, &ids, rows))?;
    }
    ctx.write_json("features.json", &FeaturizeMeta { source, columns, pipeline: &pipeline, config: &ctx.config })?;
    println!("wrote {} x {} features to {}", features.nrows(), features.ncols(), ctx.path("features.csv").display());
    Ok(())
}

fn cmd_train(ctx: Ctx, data: Option<&Path>) -> Result<()> {
    let dataset = ctx.dataset(data)?;
    let cv = ctx.config.cv_options(true);
    let (tr, va) = split_validation(dataset.len(), cv.validation_fraction, ctx.config.train.seed)?;
    let model = train_model(&dataset.subset(&tr), &dataset.subset(&va), &ctx.config.train)?;
    ctx.write_json("checkpoint.json", &model)?;
    ctx.write_text("history.jsonl", &model.history_jsonl()?)?;
    println!(
        "{}: best validation C-index {:.4} at epoch {} ({} epochs run)",
        ctx.config.train.model.label(),
        model.best_validation_c_index,
        model.best_epoch,
        model.history.len()
    );
    Ok(())
}

fn cmd_evaluate(ctx: Ctx, data: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let dataset = ctx.dataset(data)?;
    let report = match checkpoint {
        Some(path) => {
            let model: TrainedModel = load_json(path)?;
            let preds = model.predict(&dataset)?;
            let c = c_index(&preds, &dataset.labels())?;
            let (mean, stderr) = mean_stderr(&[c]);
            FoldReport {
                method: model.config.model.label().to_string(),
                k: 1,
                seed: model.config.seed,
                folds: vec![FoldResult {
                    fold: 0,
                    test_indices: (0..dataset.len()).collect(),
                    test_predictions: preds,
                    c_index: Some(c),
                    chosen_candidate: 0,
                    chosen_config: model.config.clone(),
                    validation_scores: vec![model.best_validation_c_index],
                    wall_clock_secs: 0.0,
                }],
                mean,
                stderr,
                warnings: vec![],
            }
        }
        None => {
            let cv = ctx.config.cv_options(true);
            let train = &ctx.config.train;
            let report = kfold_cv(&dataset, train.model.label(), &train.candidates(), &cv)?;
            let timings: Vec<f64> = report.folds.iter().map(|f| f.wall_clock_secs).collect();
            ctx.write_json("timings.json", &timings)?;
            report
        }
    };
    ctx.write_json("scores.json", &report)?;
    print!("{}", comparison_text(&[&report]));
    Ok(())
}

fn cmd_bench(ctx: Ctx, data: Option<&Path>) -> Result<()> {
    let cfg = ctx.config.bench_config();
    let (report, timings) = match data {
        Some(dir) => {
            let synth = io::read_synth(dir)?;
            let cfg = ExperimentConfig { synth: synth.config.clone(), ..ctx.config.clone() }.bench_config();
            bench_on(&synth, &cfg)?
        }
        None => run_bench(&cfg)?,
    };
    ctx.write_json("bench.json", &report)?;
    ctx.write_json("timings.json", &timings)?;
    render_bench(&ctx, &report)?;
    println!("noise-free targets: {:.4}", report.noise_free_c_index);
    let reports: Vec<&FoldReport> = report.results.iter().map(|r| &r.report).collect();
    print!("{}", comparison_text(&reports));
    Ok(())
}

fn render_bench(ctx: &Ctx, report: &ctr_core::bench::BenchReport) -> Result<()> {
    let reports: Vec<&FoldReport> = report.results.iter().map(|r| &r.report).collect();
    ctx.write_text("comparison.csv", &comparison_csv(&reports))?;
    let title =
        format!("C-index, {}-fold cross-validation, K = {}", report.config.cv.k, report.config.synth.num_states);
    ctx.write_text("comparison.svg", &bar_chart_svg(&reports, &title))?;
    if let Some(p) = &report.period {
        ctx.write_text("period.csv", &period_csv(p))?;
        ctx.write_text("period.svg", &period_chart_svg(p))?;
    }
    Ok(())
}

fn cmd_gradcheck(ctx: Ctx, seeds: &[u64], max_per_block: Option<usize>, tolerance: f64) -> Result<()> {
    let opts = FdOptions { max_per_block, ..FdOptions::default() };
    let report = gradient_suite(seeds, &ctx.config.train, opts, tolerance)?;
    ctx.write_json("gradcheck.json", &report)?;
    for c in &report.checks {
        let worst = c.report.max_rel_error();
        let verdict = if worst < tolerance { "ok" } else { "FAIL" };
        println!("{verdict:4} seed {} {:<32} max relative error {worst:.3e}", c.seed, c.name);
    }
    if report.passes() {
        Ok(())
    } else {
        Err(Failure::runtime(
            "gradcheck",
            format!("max relative error {:.3e} exceeds tolerance {tolerance:e}", report.worst()),
        ))
    }
}

fn cmd_report(
    ctx: Ctx,
    bench: Option<PathBuf>,
    pair: Option<(PathBuf, PathBuf)>,
    data: Option<PathBuf>,
    thresholds: Option<Vec<f64>>,
) -> Result<()> {
    match (bench, pair) {
        (Some(path), None) => {
            let report: ctr_core::bench::BenchReport = load_json(&path)?;
            render_bench(&ctx, &report)?;
            let reports: Vec<&FoldReport> = report.results.iter().map(|r| &r.report).collect();
            print!("{}", comparison_text(&reports));
        }
        (None, Some((a, b))) => {
            let a: FoldReport = load_json(&a)?;
            let b: FoldReport = load_json(&b)?;
            let thresholds = thresholds.ok_or_else(|| Failure::usage("--thresholds is required with --a/--b"))?;
            let dataset = ctx.dataset(data.as_deref())?;
            let period = period_stratified_improvement(&a, &b, &dataset, &thresholds)?;
            ctx.write_json("period.json", &period)?;
            ctx.write_text("period.csv", &period_csv(&period))?;
            ctx.write_text("period.svg", &period_chart_svg(&period))?;
            ctx.write_text("comparison.csv", &comparison_csv(&[&a, &b]))?;
            print!("{}", period_csv(&period));
        }
        _ => return Err(Failure::usage("report needs --bench FILE or --a FILE --b FILE")),
    }
    Ok(())
}
