//! Monte Carlo harness: the location model `y = x'beta + e` with `x = (1, z)`,
//! `z ~ N(0, I_d)`, `e ~ N(0, 1)` and `beta = (1, ..., 1)`.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::critical::CriticalValues;
use crate::inference::TestResult;
use crate::ingest::Dataset;
use crate::init::{Gamma0Spec, InitSpec};
use crate::pipeline::{fit, test_homogeneity, FitConfig, HomogeneityConfig, Source};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scaling::ScalingMode;
use crate::sgd::DEFAULT_EXPONENT;

/// Error distribution of the simulated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    #[default]
    Homoskedastic,
    /// `e` scaled by `exp(z_1 / 2)`, so the `z_1` slope varies across quantiles.
    Heteroskedastic,
}

/// `n` rows of the simulation model with `d` non-constant regressors (so `x` has `d + 1` entries).
pub fn generate_dgp(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    generate_dgp_with(n, d, seed, Noise::Homoskedastic)
}

pub fn generate_dgp_with(n: usize, d: usize, seed: u64, noise: Noise) -> Result<Dataset> {
    if d == 0 {
        return Err(Error::InvalidConfig("d must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut ds = Dataset::with_capacity(d + 1, n)?;
    let mut x: Vec<f64> = vec![1.0; d + 1];
    for _ in 0..n {
        let mut y = 1.0;
        for v in &mut x[1..] {
            *v = rng.sample(StandardNormal);
            y += *v;
        }
        let e: f64 = rng.sample(StandardNormal);
        y += match noise {
            Noise::Homoskedastic => e,
            Noise::Heteroskedastic => (0.5 * x[1]).exp() * e,
        };
        ds.push(&x, y)?;
    }
    Ok(ds)
}

/// Regressor names for generated data: `intercept, z1, ..., zd`.
pub fn dgp_names(d: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..=d).map(|j| format!("z{j}")))
        .collect()
}

/// True coefficient of every coordinate.
pub const TRUE_COEF: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McDesign {
    pub n: usize,
    pub d: usize,
    pub tau: f64,
    pub reps: usize,
    pub seed: u64,
    /// Zero-based target coordinate; the default is the first slope.
    pub coord: usize,
    pub level: f64,
    pub gamma0: Gamma0Spec,
    pub a: f64,
    pub init: InitSpec,
    pub noise: Noise,
}

impl McDesign {
    pub fn new(n: usize, d: usize, tau: f64, reps: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            tau,
            reps,
            seed,
            coord: 1,
            level: 0.95,
            gamma0: Gamma0Spec::Fixed(1.0),
            a: DEFAULT_EXPONENT,
            init: InitSpec::default(),
            noise: Noise::Homoskedastic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n < 2 {
            return Err(Error::InvalidConfig(format!(
                "design needs d >= 1 and n >= 2 (got n = {}, d = {})",
                self.n, self.d
            )));
        }
        if self.reps == 0 {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.coord > self.d {
            return Err(Error::InvalidConfig(format!(
                "coordinate {} out of range for d + 1 = {}",
                self.coord + 1,
                self.d + 1
            )));
        }
        Ok(())
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, rep as u64)
    }

    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            taus: vec![self.tau],
            a: self.a,
            gamma0: self.gamma0,
            init: self.init.clone(),
            seed,
            mode: ScalingMode::Diagonal,
            coords: vec![self.coord],
            level: self.level,
            hypothesis: Some(vec![TRUE_COEF]),
            selection_lambda: None,
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub covered: Option<bool>,
    pub estimate: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub ci_length: Option<f64>,
    pub error: Option<f64>,
    /// Pass plus inference, excluding data generation and initialization.
    pub time_ms: Option<f64>,
    pub init_ms: Option<f64>,
    pub failure: Option<String>,
}

/// Generate, shuffle, initialize, run and score one replication. Failures are recorded.
pub fn run_replication(design: &McDesign, rep: usize) -> RepRecord {
    let seed = design.rep_seed(rep);
    let mut rec = RepRecord {
        rep,
        seed,
        covered: None,
        estimate: None,
        ci_lower: None,
        ci_upper: None,
        ci_length: None,
        error: None,
        time_ms: None,
        init_ms: None,
        failure: None,
    };
    let run = || -> Result<_> {
        let data = generate_dgp_with(design.n, design.d, seed, design.noise)?;
        fit(
            Source::Memory(&data),
            &dgp_names(design.d),
            None,
            &design.fit_config(derive_seed(seed, 1)),
            &CriticalValues::bundled(),
        )
    };
    match run() {
        Ok(report) => {
            let e = &report.estimates[0];
            rec.covered = Some(e.ci.contains(TRUE_COEF));
            rec.estimate = Some(e.estimate);
            rec.ci_lower = Some(e.ci.lower);
            rec.ci_upper = Some(e.ci.upper);
            rec.ci_length = Some(e.ci.length());
            rec.error = Some(e.estimate - TRUE_COEF);
            rec.time_ms = Some(report.timings.pass_ms + report.timings.finalize_ms);
            rec.init_ms = Some(report.timings.init_ms);
        }
        Err(err) => rec.failure = Some(format!("{}: {err}", err.category())),
    }
    rec
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub design: McDesign,
    pub completed: usize,
    pub failed: usize,
    pub coverage: f64,
    pub mean_ci_length: f64,
    pub mean_time_ms: f64,
    pub mean_abs_error: f64,
    /// Fewer than 100 replications.
    pub low_precision: bool,
    /// More than 1% of replications failed.
    pub invalid: bool,
}

/// Summarize records; the result does not depend on their order.
pub fn summarize(design: &McDesign, records: &[RepRecord]) -> McSummary {
    let mut sorted: Vec<&RepRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.rep);
    let ok: Vec<&RepRecord> = sorted.iter().copied().filter(|r| r.failure.is_none()).collect();
    let failed = sorted.len() - ok.len();
    let mean = |f: &dyn Fn(&RepRecord) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    McSummary {
        design: design.clone(),
        completed: ok.len(),
        failed,
        coverage: mean(&|r| f64::from(u8::from(r.covered == Some(true)))),
        mean_ci_length: mean(&|r| r.ci_length.unwrap_or(f64::NAN)),
        mean_time_ms: mean(&|r| r.time_ms.unwrap_or(f64::NAN)),
        mean_abs_error: mean(&|r| r.error.map_or(f64::NAN, f64::abs)),
        low_precision: sorted.len() < 100,
        invalid: failed as f64 > 0.01 * sorted.len() as f64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McOutcome {
    pub summary: McSummary,
    pub records: Vec<RepRecord>,
}

/// Run every replication (in parallel) and summarize.
pub fn coverage_experiment(design: &McDesign) -> Result<McOutcome> {
    design.validate()?;
    let records: Vec<RepRecord> = (0..design.reps)
        .into_par_iter()
        .map(|rep| run_replication(design, rep))
        .collect();
    Ok(McOutcome {
        summary: summarize(design, &records),
        records,
    })
}

pub fn write_records_csv(path: &Path, records: &[RepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Design of a homogeneity size or power study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneityDesign {
    pub n: usize,
    pub d: usize,
    pub taus: [f64; 2],
    pub reps: usize,
    pub seed: u64,
    /// Zero-based coordinates compared across quantiles.
    pub coords: Vec<usize>,
    pub level: f64,
    pub noise: Noise,
    pub init: InitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneitySummary {
    pub design: HomogeneityDesign,
    pub completed: usize,
    pub failed: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
}

pub fn homogeneity_replication(design: &HomogeneityDesign, rep: usize, cvs: &CriticalValues) -> Result<TestResult> {
    let seed = derive_seed(design.seed, rep as u64);
    let data = generate_dgp_with(design.n, design.d, seed, design.noise)?;
    let cfg = HomogeneityConfig {
        taus: design.taus,
        a: DEFAULT_EXPONENT,
        gamma0: Gamma0Spec::Fixed(1.0),
        init: design.init.clone(),
        seed: derive_seed(seed, 1),
        coords: design.coords.clone(),
        level: design.level,
    };
    Ok(test_homogeneity(Source::Memory(&data), &dgp_names(design.d), None, &cfg, cvs)?
        .result
        .test)
}

pub fn homogeneity_experiment(design: &HomogeneityDesign, cvs: &CriticalValues) -> Result<HomogeneitySummary> {
    if design.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    let results: Vec<Result<TestResult>> = (0..design.reps)
        .into_par_iter()
        .map(|rep| homogeneity_replication(design, rep, cvs))
        .collect();
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let rejections = results.iter().filter(|r| matches!(r, Ok(t) if t.reject)).count();
    Ok(HomogeneitySummary {
        design: design.clone(),
        completed,
        failed: design.reps - completed,
        rejections,
        rejection_rate: if completed == 0 { f64::NAN } else { rejections as f64 / completed as f64 },
    })
}
