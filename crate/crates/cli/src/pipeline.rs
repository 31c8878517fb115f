//! Stage runners. Every stage reads its inputs from disk, so a stage run on
//! its own produces the same tables as the same stage inside `run`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use wwas_core::doseresponse::{self, PsplineConfig, PsplineData};
use wwas_core::ingest::{self, BuildConfig, InputPaths, RawInputs};
use wwas_core::laglead::{self, DlmConfig, DlmResult};
use wwas_core::mixtures::{self, MixtureSpec, QgcompConfig};
use wwas_core::panelprep::{self, FilterConfig, PreparedPanel};
use wwas_core::screening::{self, ScreenConfig, Status};
use wwas_core::synth::{self, SynthSpec};
use wwas_core::table::{self, fmt_f64, TableWriter};
use wwas_core::{FitOptions, RegressionSpec, ZipYearPanel};

use crate::config::RunConfig;
use crate::error::{Category, CliError};
use crate::report::{self, StageRecord, StageStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    BuildPanel,
    Screen,
    Dlm,
    Mixtures,
    DoseResponse,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::BuildPanel,
        Stage::Screen,
        Stage::Dlm,
        Stage::Mixtures,
        Stage::DoseResponse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildPanel => "build-panel",
            Stage::Screen => "screen",
            Stage::Dlm => "dlm",
            Stage::Mixtures => "mixtures",
            Stage::DoseResponse => "doseresponse",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::BuildPanel => &[Stage::Synth],
            Stage::Screen | Stage::Dlm | Stage::Mixtures => &[Stage::BuildPanel],
            Stage::DoseResponse => &[Stage::BuildPanel, Stage::Screen],
        }
    }
}

pub const PANEL: &str = "panel.csv";
pub const CLASSES: &str = "analyte_classes.csv";
pub const SCREEN: &str = "screen_results.csv";

/// What a stage hands back to the runner for its record.
#[derive(Default)]
struct StageOutput {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    diagnostics: BTreeMap<String, Value>,
}

impl StageOutput {
    fn diag(&mut self, key: &str, value: impl Into<Value>) {
        self.diagnostics.insert(key.to_string(), value.into());
    }
}

fn out(config: &RunConfig, name: &str) -> PathBuf {
    config.out_dir.join(name)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// File-name-safe version of an analyte name.
pub fn file_stem(analyte: &str) -> String {
    let s: String = analyte
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn require(stage: Stage, producer: Stage, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::dependency(stage.name(), producer.name(), path))
    }
}

fn fit_options(config: &RunConfig) -> FitOptions {
    FitOptions {
        small_sample_correction: config.small_sample_correction,
        ..FitOptions::default()
    }
}

fn filter_config(config: &RunConfig) -> FilterConfig {
    FilterConfig {
        missing_threshold: config.missing_threshold,
        nzv_freq_ratio: config.nzv_freq_ratio,
        nzv_unique_pct: config.nzv_unique_pct,
    }
}

fn dlm_config(config: &RunConfig) -> DlmConfig {
    let mut lags = vec![0];
    lags.extend(config.lags.iter().copied());
    lags.sort_unstable();
    lags.dedup();
    DlmConfig {
        lags,
        lead: (config.lead > 0).then_some(config.lead),
    }
}

/// Reads `panel.csv` and applies the column filters and standardization.
fn load_prepared(stage: Stage, config: &RunConfig, so: &mut StageOutput) -> Result<PreparedPanel, CliError> {
    let panel_path = out(config, PANEL);
    require(stage, Stage::BuildPanel, &panel_path)?;
    let classes = out(config, CLASSES);
    let panel = ZipYearPanel::read_csv(&panel_path, Some(&classes))?;
    so.inputs.push(panel_path);
    if classes.exists() {
        so.inputs.push(classes);
    }
    Ok(panelprep::prepare_panel(&panel, &filter_config(config))?)
}

fn run_synth(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_zips: config.synth_zips,
        n_years: config.synth_years,
        first_year: config.synth_first_year,
        n_analytes: config.synth_analytes,
        beta: config.synth_beta.clone(),
        missing_rate: config.synth_missing,
        censor_threshold: config.synth_censor,
        seed: config.seed,
        ..SynthSpec::default()
    };
    let (panel, truth) = synth::generate_panel(&spec)?;
    synth::write_ingest_inputs(&panel, &config.input_dir)?;
    let truth_path = config.input_dir.join("synth_truth.json");
    let text = serde_json::to_string_pretty(&json!({ "spec": spec, "beta": truth.beta, "gamma": truth.gamma }))
        .expect("truth serializes");
    std::fs::write(&truth_path, text + "\n").map_err(|e| CliError::io(&truth_path, e))?;
    for name in [
        "samples.csv",
        "lods.csv",
        "crosswalk.csv",
        "sources.csv",
        "demographics.csv",
        "deaths.csv",
        "analyte_classes.csv",
        "mixtures.json",
        "synth_truth.json",
    ] {
        let p = config.input_dir.join(name);
        if p.exists() {
            so.outputs.push(p);
        }
    }
    so.diag("rows", panel.n_rows());
    so.diag("analytes", panel.analytes().len());
    Ok(())
}

fn run_build_panel(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let paths = InputPaths::in_dir(&config.input_dir);
    let mut required = vec![
        &paths.samples,
        &paths.lods,
        &paths.crosswalk,
        &paths.sources,
        &paths.demographics,
        &paths.deaths,
    ];
    if let Some(missing) = required.iter().find(|p| !p.exists()) {
        return Err(CliError::new(Category::Input, format!("input file {} not found", missing.display())));
    }
    required.extend(paths.classes.iter());
    so.inputs.extend(required.into_iter().cloned());

    let raw = RawInputs::read(&paths)?;
    let build = BuildConfig {
        first_year: config.first_year,
        last_year: config.last_year,
        drop_censored: config.drop_censored,
    };
    let (panel, build_report) = ingest::build_panel(&raw, &build)?;
    let prepared = panelprep::prepare_panel(&panel, &filter_config(config))?;

    ensure_dir(&config.out_dir)?;
    panel.write_csv(&out(config, PANEL), &out(config, CLASSES))?;
    prepared
        .panel
        .write_csv(&out(config, "prepared_panel.csv"), &out(config, "prepared_classes.csv"))?;
    panelprep::write_summary_csv(&prepared.summary, &out(config, "panel_summary.csv"))?;
    let br = out(config, "build_report.json");
    let text = serde_json::to_string_pretty(&build_report).expect("build report serializes");
    std::fs::write(&br, text + "\n").map_err(|e| CliError::io(&br, e))?;
    for f in [PANEL, CLASSES, "prepared_panel.csv", "prepared_classes.csv", "panel_summary.csv", "build_report.json"] {
        so.outputs.push(out(config, f));
    }

    so.diag("rows", panel.n_rows());
    so.diag("analytes", panel.analytes().len());
    so.diag("analytes_kept", prepared.n_kept());
    so.diag("excluded_rows", build_report.excluded_rows.len());
    so.diag("unmapped_pws", build_report.unmapped_pws.len());
    so.diag("censored_rows_kept", build_report.censored_rows_kept);
    info!(
        "panel: {} rows, {} of {} analytes kept",
        panel.n_rows(),
        prepared.n_kept(),
        panel.analytes().len()
    );
    Ok(())
}

fn run_screen(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let prepared = load_prepared(Stage::Screen, config, so)?;
    let sc = ScreenConfig {
        spec: RegressionSpec::primary(),
        alpha: config.bh_alpha,
        dlm: dlm_config(config),
        fit: fit_options(config),
        clip_attribution: config.clip_attribution,
    };
    let res = screening::run_screen(&prepared.panel, &sc)?;
    screening::write_screen_csv(&res.rows, &out(config, SCREEN))?;
    screening::write_attribution_csv(
        &res.attribution,
        &out(config, "attribution.csv"),
        &out(config, "attribution_totals.csv"),
    )?;
    for f in [SCREEN, "attribution.csv", "attribution_totals.csv"] {
        so.outputs.push(out(config, f));
    }
    let count = |s: Status| res.rows.iter().filter(|r| r.status == s).count();
    so.diag("analytes", res.rows.len());
    so.diag("fit_failed", count(Status::Failed));
    so.diag("not_significant", count(Status::NotSignificant));
    so.diag("excluded_after_checks", count(Status::ExcludedAfterChecks));
    so.diag("retained", count(Status::Retained));
    so.diag("dropped_groups", res.rows.iter().map(|r| r.dropped_groups).sum::<usize>());
    so.diag("max_iterations", res.rows.iter().map(|r| r.iterations).max().unwrap_or(0));
    Ok(())
}

fn run_dlm(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let prepared = load_prepared(Stage::Dlm, config, so)?;
    let panel = &prepared.panel;
    let dc = dlm_config(config);
    let spec = RegressionSpec::primary();
    let opts = fit_options(config);
    let results: Vec<(String, Result<DlmResult, String>, Option<f64>)> = panel
        .analytes()
        .par_iter()
        .map(|a| {
            let reference = screening::fit_analyte(panel, &a.name, &spec, &opts).ok().map(|f| f.fit.coef[0]);
            let r = laglead::fit_dlm(panel, &a.name, &spec, &dc, &opts).map_err(|e| e.to_string());
            (a.name.clone(), r, reference)
        })
        .collect();
    laglead::write_dlm_csv(&results, &dc, &out(config, "dlm_results.csv"))?;
    so.outputs.push(out(config, "dlm_results.csv"));
    let ok: Vec<&DlmResult> = results.iter().filter_map(|r| r.1.as_ref().ok()).collect();
    so.diag("analytes", results.len());
    so.diag("fit_failed", results.len() - ok.len());
    so.diag("lead_ci_covers_zero", ok.iter().filter(|r| r.pass_lead()).count());
    so.diag("dropped_groups", ok.iter().map(|r| r.dropped_groups).sum::<usize>());
    Ok(())
}

fn mixture_specs(config: &RunConfig) -> Result<(Vec<MixtureSpec>, String), CliError> {
    let default_file = config.input_dir.join("mixtures.json");
    match &config.mixtures {
        Some(p) => Ok((mixtures::read_mixtures_json(p)?, p.display().to_string())),
        None if default_file.exists() => Ok((mixtures::read_mixtures_json(&default_file)?, default_file.display().to_string())),
        None => Ok((mixtures::builtin_mixtures(), "builtin".to_string())),
    }
}

fn run_mixtures(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let prepared = load_prepared(Stage::Mixtures, config, so)?;
    let panel = &prepared.panel;
    let names: Vec<&str> = panel.analyte_names();
    let cm = mixtures::correlation_matrix(panel, &names)?;
    mixtures::write_correlations_csv(&cm, &out(config, "correlations.csv"))?;
    let edges = mixtures::correlation_network(&cm, config.network_threshold);
    mixtures::write_network_csv(&edges, &out(config, "network.csv"))?;
    so.outputs.push(out(config, "correlations.csv"));
    so.outputs.push(out(config, "network.csv"));
    so.diag("network_edges", edges.len());

    if names.len() >= 2 {
        let (d, imputed) = mixtures::dissimilarity(&cm);
        let emb = mixtures::mds_embed(&d)?;
        let classes: Vec<String> = panel.analytes().iter().map(|a| a.class.clone()).collect();
        let owned: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        mixtures::write_mds_csv(&owned, &classes, &emb, &out(config, "mds.csv"))?;
        so.outputs.push(out(config, "mds.csv"));
        so.diag("mds_imputed_pairs", imputed);
    } else {
        warn!("fewer than two analytes; skipping the MDS embedding");
    }

    let (specs, source) = mixture_specs(config)?;
    if let Some(p) = &config.mixtures {
        so.inputs.push(p.clone());
    }
    mixtures::write_mixtures_json(&specs, &out(config, "mixtures_used.json"))?;
    so.outputs.push(out(config, "mixtures_used.json"));
    let qc = QgcompConfig {
        n_quantiles: config.n_quantiles,
        year_spline_df: config.year_spline_df,
        clustered: config.qgcomp_clustered,
    };
    let spec = RegressionSpec::primary();
    let opts = fit_options(config);
    let results: Vec<Result<mixtures::MixtureResult, (String, String)>> = specs
        .par_iter()
        .map(|m| mixtures::qgcomp_fit(panel, m, &spec, &qc, &opts).map_err(|e| (m.name.clone(), e.to_string())))
        .collect();
    mixtures::write_mixture_results_csv(&results, &out(config, "mixture_results.csv"))?;
    so.outputs.push(out(config, "mixture_results.csv"));
    so.diag("mixture_source", source);
    so.diag("mixtures", results.len());
    so.diag("mixtures_failed", results.iter().filter(|r| r.is_err()).count());
    Ok(())
}

/// Analytes named in the config, or those below the BH threshold.
fn doseresponse_analytes(config: &RunConfig, screen_path: &Path) -> Result<Vec<String>, CliError> {
    if !config.dr_analytes.is_empty() {
        return Ok(config.dr_analytes.clone());
    }
    let mut rdr = table::open_csv(screen_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::new(Category::Input, format!("{}: {e}", screen_path.display())))?
        .clone();
    let (idx, _) = table::column_index(screen_path, &headers, &["analyte", "bh_p"], &[])?;
    let mut v = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::new(Category::Input, format!("{}: {e}", screen_path.display())))?;
        let q = table::parse_opt_f64(&rec[idx[1]]).map_err(|m| CliError::new(Category::Input, m))?;
        if q.is_some_and(|q| q < config.bh_alpha) {
            v.push(rec[idx[0]].to_string());
        }
    }
    Ok(v)
}

fn read_mcl(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let mut rdr = table::open_csv(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::new(Category::Input, format!("{}: {e}", path.display())))?
        .clone();
    let (idx, _) = table::column_index(path, &headers, &["analyte", "mcl"], &[])?;
    let mut v = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::new(Category::Input, format!("{}: {e}", path.display())))?;
        if let Some(m) = table::parse_opt_f64(&rec[idx[1]]).map_err(|m| CliError::new(Category::Input, m))? {
            v.push((rec[idx[0]].to_string(), m));
        }
    }
    Ok(v)
}

struct CurveSummary {
    analyte: String,
    outcome: Result<(doseresponse::LambdaSelection, doseresponse::GamFit), String>,
}

fn run_doseresponse(config: &RunConfig, so: &mut StageOutput) -> Result<(), CliError> {
    let screen_path = out(config, SCREEN);
    require(Stage::DoseResponse, Stage::BuildPanel, &out(config, PANEL))?;
    if config.dr_analytes.is_empty() {
        require(Stage::DoseResponse, Stage::Screen, &screen_path)?;
        so.inputs.push(screen_path.clone());
    }
    let prepared = load_prepared(Stage::DoseResponse, config, so)?;
    let panel = &prepared.panel;
    let analytes = doseresponse_analytes(config, &screen_path)?;
    let pc = PsplineConfig {
        n_interior_knots: config.knots,
        degree: config.spline_degree,
        penalty_order: config.penalty_order,
    };
    let grid = doseresponse::log_grid(config.lambda_min, config.lambda_max, config.lambda_points);
    let spec = RegressionSpec::primary();
    let opts = fit_options(config);
    let dir = out(config, "doseresponse");
    ensure_dir(&dir)?;

    let fits: Vec<CurveSummary> = analytes
        .par_iter()
        .map(|a| {
            let outcome = (|| {
                let data = PsplineData::from_panel(panel, a, &spec)?;
                let sel = doseresponse::select_lambda(&data, &grid, &pc, &opts)?;
                let fit = doseresponse::fit_pspline(&data, sel.lambda, &pc, &opts)?;
                let stem = file_stem(a);
                doseresponse::write_curve_csv(&fit, &data.exposure, config.curve_points, &dir.join(format!("doseresponse_{stem}.csv")))?;
                doseresponse::write_density_csv(&data.exposure, config.curve_points, &dir.join(format!("density_{stem}.csv")))?;
                Ok::<_, wwas_core::Error>((sel, fit))
            })()
            .map_err(|e| e.to_string());
            CurveSummary {
                analyte: a.clone(),
                outcome,
            }
        })
        .collect();

    let mut w = TableWriter::create(
        &out(config, "doseresponse_summary.csv"),
        &["analyte", "lambda", "lambda_at_grid_end", "edf", "gcv", "deviance", "n_obs", "iterations", "converged", "error"],
    )?;
    let mut scores = TableWriter::create(&out(config, "lambda_scores.csv"), &["analyte", "lambda", "gcv", "edf"])?;
    for c in &fits {
        match &c.outcome {
            Ok((sel, fit)) => {
                let stem = file_stem(&c.analyte);
                so.outputs.push(dir.join(format!("doseresponse_{stem}.csv")));
                so.outputs.push(dir.join(format!("density_{stem}.csv")));
                w.row([
                    c.analyte.clone(),
                    fmt_f64(fit.lambda),
                    u8::from(sel.at_endpoint).to_string(),
                    fmt_f64(fit.edf),
                    fmt_f64(fit.gcv()),
                    fmt_f64(fit.deviance),
                    fit.n_obs.to_string(),
                    fit.iterations.to_string(),
                    u8::from(fit.converged).to_string(),
                    String::new(),
                ])?;
                for (lam, g, edf) in &sel.scores {
                    scores.row([c.analyte.clone(), fmt_f64(*lam), fmt_f64(*g), fmt_f64(*edf)])?;
                }
            }
            Err(msg) => {
                let mut row = vec![c.analyte.clone()];
                row.extend(std::iter::repeat_n(table::NA.to_string(), 8));
                row.push(msg.clone());
                w.row(row)?;
            }
        }
    }
    w.finish()?;
    scores.finish()?;
    so.outputs.push(out(config, "doseresponse_summary.csv"));
    so.outputs.push(out(config, "lambda_scores.csv"));

    let mcl_path = config.mcl.clone().or_else(|| {
        let p = config.input_dir.join("mcl.csv");
        p.exists().then_some(p)
    });
    if let Some(p) = mcl_path {
        so.inputs.push(p.clone());
        let mut w = TableWriter::create(&out(config, "mcl_reference.csv"), &["analyte", "mcl", "mcl_standardized"])?;
        for (a, m) in read_mcl(&p)? {
            if !analytes.iter().any(|x| x.eq_ignore_ascii_case(&a)) {
                continue;
            }
            let z = panel
                .analytes()
                .iter()
                .find(|c| c.name.eq_ignore_ascii_case(&a))
                .and_then(|c| c.standardization)
                .map(|s| s.apply(m));
            w.row([a, fmt_f64(m), table::fmt_opt(z)])?;
        }
        w.finish()?;
        so.outputs.push(out(config, "mcl_reference.csv"));
    }

    so.diag("analytes", fits.len());
    so.diag("fit_failed", fits.iter().filter(|c| c.outcome.is_err()).count());
    so.diag(
        "lambda_at_grid_end",
        fits.iter().filter(|c| c.outcome.as_ref().is_ok_and(|(s, _)| s.at_endpoint)).count(),
    );
    Ok(())
}

/// Runs one stage and writes its record, whatever the outcome.
pub fn run_stage(stage: Stage, config: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let mut so = StageOutput::default();
    info!("stage {} starting", stage.name());
    let result = match stage {
        Stage::Synth => run_synth(config, &mut so),
        Stage::BuildPanel => run_build_panel(config, &mut so),
        Stage::Screen => run_screen(config, &mut so),
        Stage::Dlm => run_dlm(config, &mut so),
        Stage::Mixtures => run_mixtures(config, &mut so),
        Stage::DoseResponse => run_doseresponse(config, &mut so),
    }
    .map_err(|e| e.in_stage(stage.name()));
    let wall = start.elapsed().as_secs_f64();
    info!("stage {} finished in {wall:.2}s", stage.name());

    // A dependency error leaves nothing behind worth recording.
    if matches!(&result, Err(e) if e.category == Category::Dependency) {
        return result;
    }
    let existing: Vec<PathBuf> = so.outputs.iter().filter(|p| p.exists()).cloned().collect();
    let existing_inputs: Vec<PathBuf> = so.inputs.iter().filter(|p| p.exists()).cloned().collect();
    let record = StageRecord {
        stage: stage.name().to_string(),
        status: if result.is_ok() { StageStatus::Ok } else { StageStatus::Failed },
        wall_seconds: wall,
        inputs: report::hash_map(&existing_inputs)?,
        outputs: report::hash_map(&existing)?,
        diagnostics: so.diagnostics,
        error: result.as_ref().err().map(|e| e.message.clone()),
    };
    report::write_record(&config.out_dir, &record)?;
    result
}

fn skip_record(stage: Stage, config: &RunConfig, cause: &str) -> Result<(), CliError> {
    let previous = report::read_record(&config.out_dir, stage);
    let record = StageRecord {
        stage: stage.name().to_string(),
        status: StageStatus::Skipped,
        wall_seconds: 0.0,
        inputs: BTreeMap::new(),
        outputs: previous.map(|p| p.outputs).unwrap_or_default(),
        diagnostics: BTreeMap::new(),
        error: Some(format!("skipped because stage `{cause}` failed")),
    };
    report::write_record(&config.out_dir, &record)
}

/// Runs `stages` in pipeline order. A failed stage halts the stages that
/// depend on it; unrelated stages still run. Returns the first failure.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage]) -> Result<(), CliError> {
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut failed: Vec<Stage> = Vec::new();
    let mut first_error: Option<CliError> = None;
    for stage in ordered {
        if let Some(cause) = stage.upstream().iter().find(|u| failed.contains(u)) {
            warn!("skipping {} because {} failed", stage.name(), cause.name());
            skip_record(stage, config, cause.name())?;
            failed.push(stage);
            continue;
        }
        if let Err(e) = run_stage(stage, config) {
            warn!("stage {} failed: {e}", stage.name());
            failed.push(stage);
            first_error.get_or_insert(e);
        }
    }
    report::write_report(config)?;
    first_error.map_or(Ok(()), Err)
}

/// Runs `f` inside a worker pool sized from the config.
pub fn with_pool<T: Send>(config: &RunConfig, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let threads = config.resolved_threads()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(f))
}
