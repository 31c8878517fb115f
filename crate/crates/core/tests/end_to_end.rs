use wwas_core::feglm::{FitOptions, RegressionSpec};
use wwas_core::ingest::{build_panel, BuildConfig, InputPaths, RawInputs};
use wwas_core::laglead::{fit_dlm, DlmConfig};
use wwas_core::panelprep::{prepare_panel, FilterConfig};
use wwas_core::screening::{fit_analyte, run_screen, ScreenConfig, Status};
use wwas_core::synth::{generate_panel, write_ingest_inputs, SynthSpec};
use wwas_core::ZipYearPanel;

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_zips: 60,
        n_years: 6,
        n_analytes: 5,
        beta: vec![0.08],
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_inputs_rebuild_the_same_panel() {
    let (panel, _) = generate_panel(&small_spec(11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_ingest_inputs(&panel, dir.path()).unwrap();
    let raw = RawInputs::read(&InputPaths::in_dir(dir.path())).unwrap();
    let config = BuildConfig {
        first_year: 2012,
        last_year: 2017,
        drop_censored: false,
    };
    let (rebuilt, report) = build_panel(&raw, &config).unwrap();

    assert_eq!(rebuilt.n_rows(), panel.n_rows());
    assert_eq!(report.n_analytes, panel.analytes().len());
    assert!(report.unmapped_pws.is_empty());
    for (a, b) in panel.rows().iter().zip(rebuilt.rows()) {
        assert_eq!((&a.zip, a.year, a.deaths), (&b.zip, b.year, b.deaths));
        assert!((a.population - b.population).abs() < 1e-6 * a.population);
    }
    for col in panel.analytes() {
        let other = rebuilt.analyte(&col.name).expect("analyte survives ingest");
        for (x, y) in col.values.iter().zip(&other.values) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0)),
                (None, None) => {}
                _ => panic!("missingness pattern differs for {}", col.name),
            }
        }
    }
}

#[test]
fn panel_csv_round_trip_preserves_fits() {
    let (panel, _) = generate_panel(&small_spec(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p, c) = (dir.path().join("panel.csv"), dir.path().join("classes.csv"));
    panel.write_csv(&p, &c).unwrap();
    let back = ZipYearPanel::read_csv(&p, Some(&c)).unwrap();

    let fit = |panel: &ZipYearPanel| {
        let prepared = prepare_panel(panel, &FilterConfig::default()).unwrap();
        let out = run_screen(&prepared.panel, &ScreenConfig::default()).unwrap();
        out.rows.iter().map(|r| r.coef).collect::<Vec<_>>()
    };
    let (a, b) = (fit(&panel), fit(&back));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x.unwrap(), y.unwrap());
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn planted_effect_is_the_top_discovery() {
    let spec = SynthSpec {
        beta: vec![0.1],
        missing_rate: 0.0,
        ..small_spec(13)
    };
    let (panel, _) = generate_panel(&spec).unwrap();
    let prepared = prepare_panel(&panel, &FilterConfig::default()).unwrap();
    let out = run_screen(&prepared.panel, &ScreenConfig::default()).unwrap();
    let top = out
        .rows
        .iter()
        .min_by(|a, b| a.bh_p.unwrap().total_cmp(&b.bh_p.unwrap()))
        .unwrap();
    assert_eq!(top.analyte, "analyte_01");
    assert!(top.bh_p.unwrap() < 0.05);
    let first = &out.rows.iter().find(|r| r.analyte == "analyte_01").unwrap();
    assert!(first.flags.is_some());
    assert!(!matches!(first.status, Status::Failed));
    assert!(!out.attribution.is_empty());
}

#[test]
fn lagged_model_without_lags_matches_primary_fit() {
    let (panel, _) = generate_panel(&small_spec(14)).unwrap();
    let prepared = prepare_panel(&panel, &FilterConfig::default()).unwrap();
    let spec = RegressionSpec::primary();
    let opts = FitOptions::default();
    let config = DlmConfig {
        lags: vec![0],
        lead: None,
    };
    let dlm = fit_dlm(&prepared.panel, "analyte_02", &spec, &config, &opts).unwrap();
    let primary = fit_analyte(&prepared.panel, "analyte_02", &spec, &opts).unwrap();
    assert!((dlm.cumulative - primary.fit.coef[0]).abs() < 1e-10);
    assert!((dlm.cumulative_se - primary.fit.vcov[(0, 0)].sqrt()).abs() < 1e-10);
}
