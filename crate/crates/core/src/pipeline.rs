//! End-to-end runs: shuffle, initialize, one synchronized pass, inference, report.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::critical::{CriticalValues, StatForm};
use crate::inference::homogeneity::{HomogeneityResult, HomogeneityTracker};
use crate::inference::selection::SelectionPath;
use crate::inference::{interval_with_cv, t_statistic, wald_test, CvSource, Interval, TestResult};
use crate::ingest::{shuffled_indices, Dataset, IndexedCsv};
use crate::init::{initialize, prefix_len, Gamma0Spec, InitOutcome, InitSpec, SmoothedFit};
use crate::rng::{derive_seed, PRNG_ID};
use crate::scaling::{RandomScalingMatrix, ScalingAccumulator, ScalingMode};
use crate::sgd::{LearningRate, QuantileLevel, SgdPath, DEFAULT_EXPONENT};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where rows come from.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    Memory(&'a Dataset),
    Indexed(&'a IndexedCsv),
}

impl Source<'_> {
    pub fn len(&self) -> usize {
        match self {
            Source::Memory(d) => d.len(),
            Source::Indexed(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Source::Memory(d) => d.dim(),
            Source::Indexed(c) => c.schema().dim(),
        }
    }

    fn gather(&self, rows: &[usize]) -> Result<Dataset> {
        match self {
            Source::Memory(d) => Ok(d.select(rows)),
            Source::Indexed(c) => c.load(rows),
        }
    }

    fn for_each(&self, rows: &[usize], mut f: impl FnMut(&[f64], f64) -> Result<()>) -> Result<()> {
        match self {
            Source::Memory(d) => {
                for &i in rows {
                    let (x, y) = d.row(i);
                    f(x, y)?;
                }
            }
            Source::Indexed(c) => {
                for obs in c.ordered(rows.to_vec()) {
                    let obs = obs?;
                    f(&obs.x, obs.y)?;
                }
            }
        }
        Ok(())
    }
}

/// Seed for the row permutation, derived from the run seed.
pub fn shuffle_seed(seed: u64) -> u64 {
    derive_seed(seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitConfig {
    pub taus: Vec<f64>,
    pub a: f64,
    pub gamma0: Gamma0Spec,
    pub init: InitSpec,
    pub seed: u64,
    pub mode: ScalingMode,
    /// Zero-based coordinates that get scaling entries and inference.
    pub coords: Vec<usize>,
    pub level: f64,
    /// Hypothesized values for `coords`; zero when absent.
    pub hypothesis: Option<Vec<f64>>,
    /// Threshold of the selection path diagnostic, if wanted.
    pub selection_lambda: Option<f64>,
}

impl FitConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            taus: vec![tau],
            a: DEFAULT_EXPONENT,
            gamma0: Gamma0Spec::default(),
            init: InitSpec::default(),
            seed: 0,
            mode: ScalingMode::Full,
            coords: Vec::new(),
            level: 0.95,
            hypothesis: None,
            selection_lambda: None,
        }
    }

    /// Checks that need no data: levels, learning-rate parameters, coordinates' shape.
    pub fn precheck(&self) -> Result<()> {
        precheck_common(&self.taus, self.level, self.gamma0, self.a)?;
        if let Some(h) = &self.hypothesis {
            if !self.coords.is_empty() && h.len() != self.coords.len() {
                return Err(Error::InvalidConfig(format!(
                    "{} hypothesized values for {} coordinates",
                    h.len(),
                    self.coords.len()
                )));
            }
        }
        if let Some(lambda) = self.selection_lambda {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(Error::InvalidConfig(format!("selection threshold must be positive, got {lambda}")));
            }
        }
        Ok(())
    }

    fn validate(&self, d: usize) -> Result<Vec<QuantileLevel>> {
        self.precheck()?;
        if self.taus.is_empty() {
            return Err(Error::InvalidConfig("no quantile levels given".into()));
        }
        let taus = self
            .taus
            .iter()
            .map(|&t| QuantileLevel::new(t))
            .collect::<Result<Vec<_>>>()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if let Some(&c) = self.coords.iter().find(|&&c| c >= d) {
            return Err(Error::InvalidConfig(format!(
                "coordinate {} out of range for d = {d}",
                c + 1
            )));
        }
        if let Some(h) = &self.hypothesis {
            if h.len() != self.resolved_coords(d).len() {
                return Err(Error::InvalidConfig(format!(
                    "{} hypothesized values for {} coordinates",
                    h.len(),
                    self.resolved_coords(d).len()
                )));
            }
        }
        Ok(taus)
    }

    /// Requested coordinates, or all of them when none were named.
    pub fn resolved_coords(&self, d: usize) -> Vec<usize> {
        if self.coords.is_empty() {
            (0..d).collect()
        } else {
            self.coords.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub source: Option<String>,
    pub n: usize,
    pub d: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub tau: f64,
    /// One-based coordinate.
    pub coord: usize,
    pub name: String,
    pub estimate: f64,
    pub variance: f64,
    pub hypothesis: f64,
    pub t_statistic: Option<f64>,
    pub ci: Interval,
    pub level: f64,
    pub critical_value: f64,
    pub cv_source: CvSource,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub tau: f64,
    pub mode: ScalingMode,
    /// One-based coordinates.
    pub coords: Vec<usize>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub tau: f64,
    pub kind: &'static str,
    pub coords: Vec<usize>,
    #[serde(flatten)]
    pub result: TestResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitReport {
    pub tau: f64,
    pub gamma0: f64,
    pub a: f64,
    pub sigma_hat: Option<f64>,
    pub rows_used: usize,
    pub skipped: usize,
    pub smoothed: Option<SmoothedFit>,
    pub beta0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathReport {
    pub tau: f64,
    pub n: u64,
    pub beta_bar: Vec<f64>,
    pub beta_last: Vec<f64>,
    pub selection: Option<SelectionPath>,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Timings {
    pub init_ms: f64,
    pub pass_ms: f64,
    pub finalize_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub shuffle_seed: u64,
    pub prng: &'static str,
    pub cv_cache_id: String,
    pub version: &'static str,
}

impl Provenance {
    fn new(seed: u64, cvs: &CriticalValues) -> Self {
        Self {
            seed,
            shuffle_seed: shuffle_seed(seed),
            prng: PRNG_ID,
            cv_cache_id: cvs.cache_id(),
            version: VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub config: FitConfig,
    pub data_summary: DataSummary,
    pub init: Vec<InitReport>,
    pub paths: Vec<PathReport>,
    pub estimates: Vec<Estimate>,
    pub scaling: Vec<ScalingReport>,
    pub tests: Vec<TestReport>,
    pub timings: Timings,
    pub provenance: Provenance,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn one_based(coords: &[usize]) -> Vec<usize> {
    coords.iter().map(|c| c + 1).collect()
}

/// Shuffle, initialize and run one synchronized pass for every `tau` in `config`.
pub fn fit(source: Source<'_>, names: &[String], label: Option<String>, config: &FitConfig, cvs: &CriticalValues) -> Result<FitReport> {
    let d = source.dim();
    let n = source.len();
    let taus = config.validate(d)?;
    let coords = config.resolved_coords(d);
    if n < 2 {
        return Err(Error::InsufficientObservations { n: n as u64, required: 2 });
    }
    // Check the critical value before doing any work.
    let (cv, cv_source) = cvs.two_sided(config.level)?;

    let t_init = Instant::now();
    let order = shuffled_indices(n, shuffle_seed(config.seed));
    let m = prefix_len(&config.init, config.gamma0, n);
    let prefix = source.gather(&order[..m])?;
    let mut inits = Vec::with_capacity(taus.len());
    let mut paths = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let out: InitOutcome = initialize(&config.init, config.gamma0, config.a, tau, &prefix, n)?;
        let acc = match config.mode {
            ScalingMode::Full if coords.len() == d => ScalingAccumulator::full(&out.beta0),
            ScalingMode::Full | ScalingMode::Subvector => ScalingAccumulator::subvector(&coords, &out.beta0)?,
            ScalingMode::Diagonal => ScalingAccumulator::diagonal(&coords, &out.beta0)?,
        };
        let mut path = SgdPath::new(tau, out.schedule, out.beta0.clone())?.with_accumulator(acc)?;
        if let Some(lambda) = config.selection_lambda {
            path = path.with_selection(lambda)?;
        }
        paths.push(path);
        inits.push(out);
    }
    let skip = inits.iter().map(|o| o.skip).max().unwrap_or(0);
    let init_ms = ms(t_init);

    let t_pass = Instant::now();
    source.for_each(&order[skip..], |x, y| {
        for p in paths.iter_mut() {
            p.observe(x, y)?;
        }
        Ok(())
    })?;
    let pass_ms = ms(t_pass);

    let t_fin = Instant::now();
    let hyp = config.hypothesis.clone().unwrap_or_else(|| vec![0.0; coords.len()]);
    let mut estimates = Vec::new();
    let mut scaling = Vec::new();
    let mut tests = Vec::new();
    let mut path_reports = Vec::new();
    for (tau, path) in config.taus.iter().zip(paths) {
        let res = path.finish()?;
        let v: &RandomScalingMatrix = &res.scaling[0];
        for (k, &c) in coords.iter().enumerate() {
            let var = v.variance(c).expect("coordinate is tracked");
            let ci = interval_with_cv(res.beta_bar[c], var, res.n, cv)?;
            let t = t_statistic(res.beta_bar[c], hyp[k], var, res.n).ok();
            estimates.push(Estimate {
                tau: *tau,
                coord: c + 1,
                name: names.get(c).cloned().unwrap_or_else(|| format!("x{}", c + 1)),
                estimate: res.beta_bar[c],
                variance: var,
                hypothesis: hyp[k],
                t_statistic: t,
                ci,
                level: config.level,
                critical_value: cv,
                cv_source,
            });
            if let Some(t) = t {
                tests.push(TestReport {
                    tau: *tau,
                    kind: "t",
                    coords: vec![c + 1],
                    result: TestResult::new(t.abs(), cv, config.level, 1, cv_source),
                });
            }
        }
        if coords.len() > 1 && v.mode() != ScalingMode::Diagonal {
            let mut r = DMatrix::zeros(coords.len(), d);
            for (k, &c) in coords.iter().enumerate() {
                r[(k, c)] = 1.0;
            }
            if let Ok(result) = wald_test(&r, &hyp, &res.beta_bar, v, res.n, config.level, cvs) {
                tests.push(TestReport {
                    tau: *tau,
                    kind: "wald",
                    coords: one_based(&coords),
                    result,
                });
            }
        }
        scaling.push(ScalingReport {
            tau: *tau,
            mode: v.mode(),
            coords: one_based(v.coords()),
            v: v.rows(),
        });
        path_reports.push(PathReport {
            tau: *tau,
            n: res.n,
            beta_bar: res.beta_bar.clone(),
            beta_last: res.beta_last.clone(),
            selection: res.selection.clone(),
        });
    }
    let finalize_ms = ms(t_fin);

    let init = config
        .taus
        .iter()
        .zip(inits)
        .map(|(tau, o)| InitReport {
            tau: *tau,
            gamma0: o.schedule.gamma0(),
            a: o.schedule.exponent(),
            sigma_hat: o.sigma_hat,
            rows_used: m,
            skipped: o.skip,
            smoothed: o.smoothed,
            beta0: o.beta0,
        })
        .collect();

    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        data_summary: DataSummary {
            source: label,
            n,
            d,
            names: names.to_vec(),
        },
        init,
        paths: path_reports,
        estimates,
        scaling,
        tests,
        timings: Timings {
            init_ms,
            pass_ms,
            finalize_ms,
        },
        provenance: Provenance::new(config.seed, cvs),
    })
}

fn precheck_common(taus: &[f64], level: f64, gamma0: Gamma0Spec, a: f64) -> Result<()> {
    for &t in taus {
        QuantileLevel::new(t)?;
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {level}")));
    }
    let g = match gamma0 {
        Gamma0Spec::Fixed(g) => g,
        Gamma0Spec::Auto => 1.0,
    };
    LearningRate::new(g, a)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomogeneityConfig {
    pub taus: [f64; 2],
    pub a: f64,
    pub gamma0: Gamma0Spec,
    pub init: InitSpec,
    pub seed: u64,
    /// Zero-based coordinates compared across the two quantiles.
    pub coords: Vec<usize>,
    pub level: f64,
}

impl HomogeneityConfig {
    pub fn precheck(&self) -> Result<()> {
        precheck_common(&self.taus, self.level, self.gamma0, self.a)?;
        if self.taus[0] == self.taus[1] {
            return Err(Error::InvalidConfig("homogeneity test needs two distinct quantile levels".into()));
        }
        if self.coords.is_empty() {
            return Err(Error::InvalidConfig("no coordinates to compare".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogeneityReport {
    pub schema_version: u32,
    pub config: HomogeneityConfig,
    pub data_summary: DataSummary,
    pub init: Vec<InitReport>,
    pub result: HomogeneityResult,
    pub tests: Vec<TestReport>,
    pub timings: Timings,
    pub provenance: Provenance,
}

/// Synchronized two-quantile pass and the homogeneity test.
pub fn test_homogeneity(
    source: Source<'_>,
    names: &[String],
    label: Option<String>,
    config: &HomogeneityConfig,
    cvs: &CriticalValues,
) -> Result<HomogeneityReport> {
    let d = source.dim();
    let n = source.len();
    config.precheck()?;
    let taus = [QuantileLevel::new(config.taus[0])?, QuantileLevel::new(config.taus[1])?];
    if let Some(&c) = config.coords.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidConfig(format!("coordinate {} out of range for d = {d}", c + 1)));
    }
    // Fail early if no critical value is available.
    cvs.lookup(config.level, config.coords.len(), StatForm::Wald)?;
    if n < 2 {
        return Err(Error::InsufficientObservations { n: n as u64, required: 2 });
    }

    let t_init = Instant::now();
    let order = shuffled_indices(n, shuffle_seed(config.seed));
    let m = prefix_len(&config.init, config.gamma0, n);
    let prefix = source.gather(&order[..m])?;
    let o1 = initialize(&config.init, config.gamma0, config.a, taus[0], &prefix, n)?;
    let o2 = initialize(&config.init, config.gamma0, config.a, taus[1], &prefix, n)?;
    let skip = o1.skip.max(o2.skip);
    let mut tracker = HomogeneityTracker::new(
        taus,
        [o1.schedule, o2.schedule],
        [o1.beta0.clone(), o2.beta0.clone()],
        &config.coords,
    )?;
    let init_ms = ms(t_init);

    let t_pass = Instant::now();
    source.for_each(&order[skip..], |x, y| tracker.observe(x, y))?;
    let pass_ms = ms(t_pass);

    let t_fin = Instant::now();
    let result = tracker.finish(config.level, cvs)?;
    let finalize_ms = ms(t_fin);

    let init = [(config.taus[0], o1), (config.taus[1], o2)]
        .into_iter()
        .map(|(tau, o)| InitReport {
            tau,
            gamma0: o.schedule.gamma0(),
            a: o.schedule.exponent(),
            sigma_hat: o.sigma_hat,
            rows_used: m,
            skipped: o.skip,
            smoothed: o.smoothed,
            beta0: o.beta0,
        })
        .collect();
    let tests = vec![TestReport {
        tau: config.taus[0],
        kind: "homogeneity",
        coords: one_based(&config.coords),
        result: result.test.clone(),
    }];
    Ok(HomogeneityReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        data_summary: DataSummary {
            source: label,
            n,
            d,
            names: names.to_vec(),
        },
        init,
        result,
        tests,
        timings: Timings {
            init_ms,
            pass_ms,
            finalize_ms,
        },
        provenance: Provenance::new(config.seed, cvs),
    })
}
