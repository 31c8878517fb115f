//! Fixtures shared by the benchmarks.

use wwas_core::synth::{generate_panel, SynthSpec};
use wwas_core::{FeProblem, RegressionSpec, ZipYearPanel};

/// Default-sized synthetic panel with one planted effect.
pub fn panel(n_zips: usize, n_years: usize, seed: u64) -> ZipYearPanel {
    let spec = SynthSpec {
        n_zips,
        n_years,
        beta: vec![0.05],
        seed,
        ..SynthSpec::default()
    };
    generate_panel(&spec).expect("synthetic panel").0
}

/// Primary-specification problem for the first analyte of `panel`.
pub fn problem(panel: &ZipYearPanel) -> FeProblem {
    let a = &panel.analytes()[0];
    RegressionSpec::primary()
        .build(panel, &[(a.name.as_str(), &a.values)])
        .expect("design builds")
        .problem
}

/// Deterministic pseudo-random values in `(0, 1)` from a 64-bit LCG.
pub fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        })
        .collect()
}
