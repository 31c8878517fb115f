use wwas_bench::{panel, problem, uniforms};
use wwas_core::{fit_poisson_fe, FitOptions};

#[test]
fn uniforms_are_reproducible_and_open() {
    let a = uniforms(10_000, 5);
    assert_eq!(a, uniforms(10_000, 5));
    assert_ne!(a, uniforms(10_000, 6));
    assert!(a.iter().all(|u| *u > 0.0 && *u < 1.0));
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    assert!((mean - 0.5).abs() < 0.01);
}

#[test]
fn benchmark_problem_fits() {
    let p = problem(&panel(30, 11, 2));
    assert!(p.n() > 280 && p.n() <= 330, "rows with a missing exposure are dropped");
    let fit = fit_poisson_fe(&p, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert_eq!(fit.names[0], "analyte_01");
}
