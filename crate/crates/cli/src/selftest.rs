//! Oracle, gradient, invariant and scaling suites run by `fmamba selftest`.

use std::time::Instant;

use fmamba_core::gradcheck::GradCheckConfig;
use fmamba_core::selfcheck::{check_gradient, exact_invariants, gradient_case, scan_oracle, GRADIENT_CASES};
use fmamba_core::Result;

use crate::bench::check_scaling;

pub const ORACLE_DRAWS: usize = 100;
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Coordinates sampled per parameter tensor of the full fusion block; other blocks use the default.
pub const FMB_COORDS: usize = 8;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub fn scan_oracle_suite(seed: u64) -> Result<SuiteResult> {
    let t = Instant::now();
    let r = scan_oracle(ORACLE_DRAWS, seed)?;
    Ok(SuiteResult {
        name: "scan_oracle".into(),
        passed: r.draws >= ORACLE_DRAWS && r.max_rel_error <= ORACLE_TOLERANCE,
        detail: format!(
            "{} draws, max rel error {:.2e} (tol {ORACLE_TOLERANCE:.0e}), {:.2?}",
            r.draws,
            r.max_rel_error,
            t.elapsed()
        ),
    })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for name in GRADIENT_CASES {
        let cfg = GradCheckConfig {
            coords_per_param: if name == "fmb" { FMB_COORDS } else { GradCheckConfig::default().coords_per_param },
            seed,
            ..GradCheckConfig::default()
        };
        let case = gradient_case(name, seed).expect("listed case exists");
        let t = Instant::now();
        let r = check_gradient(&case, &cfg)?;
        let worst = r
            .worst
            .as_ref()
            .map(|w| format!(" at {}[{}]", w.param, w.index))
            .unwrap_or_default();
        out.push(SuiteResult {
            name: format!("gradient/{name}"),
            passed: r.passed() && r.checked > 0,
            detail: format!(
                "max rel error {:.2e}{worst} over {} coords (tol {:.0e}), {:.2?}",
                r.max_rel_error,
                r.checked,
                r.tolerance,
                t.elapsed()
            ),
        });
    }
    Ok(out)
}

pub fn invariant_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(exact_invariants(seed)?
        .into_iter()
        .map(|r| SuiteResult {
            name: format!("invariant/{}", r.name),
            passed: r.passed,
            detail: r.detail,
        })
        .collect())
}

pub fn scaling_suite(sizes: &[usize], seed: u64) -> Result<SuiteResult> {
    let (v, attempts) = check_scaling(sizes, seed)?;
    Ok(SuiteResult {
        name: "scaling".into(),
        passed: v.passed,
        detail: format!("{} after {attempts} attempt(s)", v.summary()),
    })
}

/// Every suite, in order; `on_result` sees each result as it completes.
pub fn run_all(sizes: &[usize], seed: u64, mut on_result: impl FnMut(&SuiteResult)) -> Result<Vec<SuiteResult>> {
    let mut all = Vec::new();
    let mut push = |r: SuiteResult, all: &mut Vec<SuiteResult>| {
        on_result(&r);
        all.push(r);
    };
    push(scan_oracle_suite(seed)?, &mut all);
    for r in gradient_suite(seed)? {
        push(r, &mut all);
    }
    for r in invariant_suite(seed)? {
        push(r, &mut all);
    }
    push(scaling_suite(sizes, seed)?, &mut all);
    Ok(all)
}
