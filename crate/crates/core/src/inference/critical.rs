//! Critical values: the tabulated t-form quantiles and a simulated cache for everything else.
//!
//! The limit of the t statistic is `W(1) / sqrt(int_0^1 Wbar(r)^2 dr)` and that of the
//! Wald statistic is `W(1)' (int_0^1 Wbar Wbar' dr)^{-1} W(1)`, with `Wbar(r) = W(r) - r W(1)`
//! for an `ell`-dimensional standard Wiener process.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::sorted_quantile;
use crate::rng::{derive_seed, rng_from_seed};

/// Upper quantiles of the t-form limit, at probabilities [`TABLE_PROBS`].
pub const TABLE_PROBS: [f64; 4] = [0.90, 0.95, 0.975, 0.99];
pub const TABLE_VALUES: [f64; 4] = [3.875, 5.323, 6.747, 8.613];

pub const CACHE_FORMAT: &str = "# qrstream critical-value cache, format 1";
const CACHE_HEADER: &str = "form ell prob grid_steps replications seed value";
const BUNDLED: &str = include_str!("../../data/cv_cache.txt");

pub const DEFAULT_GRID: usize = 2000;
pub const DEFAULT_REPS: usize = 200_000;
pub const DEFAULT_SEED: u64 = 20_240_101;
pub const DEFAULT_T_PROBS: [f64; 5] = [0.90, 0.95, 0.975, 0.99, 0.995];
pub const DEFAULT_WALD_PROBS: [f64; 6] = [0.80, 0.90, 0.95, 0.975, 0.98, 0.99];
/// Replications per independently seeded chunk.
const CHUNK: usize = 1000;
const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StatForm {
    T,
    Wald,
}

impl StatForm {
    pub fn as_str(self) -> &'static str {
        match self {
            StatForm::T => "t",
            StatForm::Wald => "wald",
        }
    }
}

impl FromStr for StatForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(StatForm::T),
            "wald" => Ok(StatForm::Wald),
            other => Err(Error::InvalidConfig(format!("unknown statistic form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CvSource {
    Table,
    Simulated,
}

/// One simulated quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvEntry {
    pub form: StatForm,
    pub ell: usize,
    pub prob: f64,
    pub grid_steps: usize,
    pub replications: usize,
    pub seed: u64,
    pub value: f64,
}

/// Plain-text table of simulated quantiles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvCache {
    entries: Vec<CvEntry>,
}

impl CvCache {
    pub fn new(entries: Vec<CvEntry>) -> Self {
        Self { entries }
    }

    pub fn bundled() -> &'static CvCache {
        static CACHE: OnceLock<CvCache> = OnceLock::new();
        CACHE.get_or_init(|| CvCache::parse(BUNDLED).expect("bundled critical-value cache is malformed"))
    }

    pub fn entries(&self) -> &[CvEntry] {
        &self.entries
    }

    pub fn push(&mut self, entry: CvEntry) {
        self.entries.push(entry);
    }

    /// Entry for `(form, ell, prob)`; among duplicates the one with most replications.
    pub fn find(&self, form: StatForm, ell: usize, prob: f64) -> Option<&CvEntry> {
        self.entries
            .iter()
            .filter(|e| e.form == form && e.ell == ell && (e.prob - prob).abs() < PROB_EPS)
            .max_by_key(|e| e.replications)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            let row = k as u64 + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line.split_whitespace().collect::<Vec<_>>().join(" ") != CACHE_HEADER {
                    return Err(Error::Parse {
                        row,
                        column: "header".into(),
                        message: format!("expected {CACHE_HEADER:?}"),
                    });
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(Error::RaggedRow {
                    row,
                    expected: 7,
                    found: f.len(),
                });
            }
            let bad = |column: &str, message: String| Error::Parse {
                row,
                column: column.into(),
                message,
            };
            let num = |i: usize, column: &str| -> Result<f64> {
                f[i].parse::<f64>().map_err(|e| bad(column, e.to_string()))
            };
            let int = |i: usize, column: &str| -> Result<u64> {
                f[i].parse::<u64>().map_err(|e| bad(column, e.to_string()))
            };
            entries.push(CvEntry {
                form: f[0].parse().map_err(|_| bad("form", format!("unknown form {:?}", f[0])))?,
                ell: int(1, "ell")? as usize,
                prob: num(2, "prob")?,
                grid_steps: int(3, "grid_steps")? as usize,
                replications: int(4, "replications")? as usize,
                seed: int(5, "seed")?,
                value: num(6, "value")?,
            });
        }
        if !saw_header {
            return Err(Error::Parse {
                row: 0,
                column: "header".into(),
                message: "missing header line".into(),
            });
        }
        Ok(Self { entries })
    }

    /// Canonical text form; floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CACHE_FORMAT}");
        let _ = writeln!(out, "{CACHE_HEADER}");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                e.form.as_str(),
                e.ell,
                e.prob,
                e.grid_steps,
                e.replications,
                e.seed,
                e.value
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// FNV-1a hash of the canonical text.
    pub fn id(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("fnv1a:{h:016x}")
    }
}

/// Simulation settings used when a requested quantile is not cached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimSettings {
    pub grid_steps: usize,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            grid_steps: DEFAULT_GRID,
            replications: DEFAULT_REPS,
            seed: DEFAULT_SEED,
        }
    }
}

/// Critical-value provider: table first, then cache, then optional simulation.
#[derive(Debug)]
pub struct CriticalValues {
    cache: CvCache,
    simulate: Option<SimSettings>,
    memo: Mutex<Vec<CvEntry>>,
}

impl Clone for CriticalValues {
    fn clone(&self) -> Self {
        Self {
            cache: self.cache.clone(),
            simulate: self.simulate,
            memo: Mutex::new(self.memo.lock().unwrap().clone()),
        }
    }
}

impl CriticalValues {
    pub fn new(cache: CvCache) -> Self {
        Self {
            cache,
            simulate: None,
            memo: Mutex::new(Vec::new()),
        }
    }

    pub fn bundled() -> Self {
        Self::new(CvCache::bundled().clone())
    }

    pub fn with_simulation(mut self, settings: SimSettings) -> Self {
        self.simulate = Some(settings);
        self
    }

    pub fn cache(&self) -> &CvCache {
        &self.cache
    }

    pub fn cache_id(&self) -> String {
        self.cache.id()
    }

    /// Quantile at probability `prob` of the `form` limit with `ell` restrictions.
    pub fn quantile(&self, prob: f64, ell: usize, form: StatForm) -> Result<(f64, CvSource)> {
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::InvalidConfig(format!("probability must lie in (0, 1), got {prob}")));
        }
        if ell == 0 {
            return Err(Error::InvalidConfig("ell must be positive".into()));
        }
        if form == StatForm::T && ell != 1 {
            return Err(Error::CriticalValueUnavailable {
                level: prob,
                ell,
                reason: "the t form is scalar; use the Wald form for several restrictions".into(),
            });
        }
        if form == StatForm::T {
            if let Some(v) = table_value(prob) {
                return Ok((v, CvSource::Table));
            }
        }
        if let Some(e) = self.cache.find(form, ell, prob) {
            return Ok((e.value, CvSource::Simulated));
        }
        let memo_hit = self
            .memo
            .lock()
            .unwrap()
            .iter()
            .find(|e| e.form == form && e.ell == ell && (e.prob - prob).abs() < PROB_EPS)
            .map(|e| e.value);
        if let Some(v) = memo_hit {
            return Ok((v, CvSource::Simulated));
        }
        let Some(sim) = self.simulate else {
            return Err(Error::CriticalValueUnavailable {
                level: prob,
                ell,
                reason: "not in the critical-value cache and simulation is disabled".into(),
            });
        };
        let q = simulate_limit_quantiles(ell, sim.grid_steps, sim.replications, sim.seed, &[prob])?;
        let value = match form {
            StatForm::T => q.t[0],
            StatForm::Wald => q.wald[0],
        };
        self.memo.lock().unwrap().push(CvEntry {
            form,
            ell,
            prob,
            grid_steps: sim.grid_steps,
            replications: sim.replications,
            seed: sim.seed,
            value,
        });
        Ok((value, CvSource::Simulated))
    }

    /// Two-sided t critical value `cv((1 + level) / 2)`.
    pub fn two_sided(&self, level: f64) -> Result<(f64, CvSource)> {
        check_level(level)?;
        self.quantile(0.5 * (1.0 + level), 1, StatForm::T)
    }

    /// One-sided t critical value `cv(level)`.
    pub fn one_sided(&self, level: f64) -> Result<(f64, CvSource)> {
        check_level(level)?;
        self.quantile(level, 1, StatForm::T)
    }

    /// Critical value for a test at confidence `level`.
    ///
    /// The t form is two-sided. For a single Wald restriction the value is the
    /// square of the two-sided t value whenever that one is tabulated.
    pub fn lookup(&self, level: f64, ell: usize, form: StatForm) -> Result<(f64, CvSource)> {
        check_level(level)?;
        match form {
            StatForm::T => {
                if ell != 1 {
                    return self.quantile(level, ell, form);
                }
                self.two_sided(level)
            }
            StatForm::Wald => {
                if ell == 1 {
                    if let Some(v) = table_value(0.5 * (1.0 + level)) {
                        return Ok((v * v, CvSource::Table));
                    }
                }
                self.quantile(level, ell, form)
            }
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {level}")))
    }
}

fn table_value(prob: f64) -> Option<f64> {
    TABLE_PROBS
        .iter()
        .position(|p| (p - prob).abs() < PROB_EPS)
        .map(|k| TABLE_VALUES[k])
}

/// Simulated quantiles of both limit forms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitQuantiles {
    pub probs: Vec<f64>,
    /// t form, from the first Wiener component.
    pub t: Vec<f64>,
    pub wald: Vec<f64>,
}

/// Raw draws of the discretized functionals.
pub fn simulate_limit_draws(ell: usize, grid_steps: usize, replications: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if ell == 0 {
        return Err(Error::InvalidConfig("ell must be positive".into()));
    }
    if grid_steps < 2 || replications == 0 {
        return Err(Error::InvalidConfig(
            "simulation needs at least 2 grid steps and 1 replication".into(),
        ));
    }
    let chunks = replications.div_ceil(CHUNK);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let reps = CHUNK.min(replications - c * CHUNK);
            simulate_chunk(ell, grid_steps, reps, derive_seed(seed, c as u64))
        })
        .collect();
    let mut t = Vec::with_capacity(replications);
    let mut wald = Vec::with_capacity(replications);
    for part in parts {
        let (a, b) = part?;
        t.extend(a);
        wald.extend(b);
    }
    Ok((t, wald))
}

fn simulate_chunk(ell: usize, g: usize, reps: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = rng_from_seed(seed);
    let sd = 1.0 / (g as f64).sqrt();
    let mut walk = vec![0.0; ell * g];
    let mut end = vec![0.0; ell];
    let mut wbar = vec![0.0; ell];
    let mut t = Vec::with_capacity(reps);
    let mut wald = Vec::with_capacity(reps);
    for _ in 0..reps {
        for c in 0..ell {
            let mut s = 0.0;
            for w in &mut walk[c * g..(c + 1) * g] {
                let z: f64 = rng.sample(StandardNormal);
                s += sd * z;
                *w = s;
            }
            end[c] = s;
        }
        // Left-point rule on r = k/g, k = 0..g-1; the k = 0 term is zero.
        let mut m = DMatrix::<f64>::zeros(ell, ell);
        for k in 0..g - 1 {
            let r = (k + 1) as f64 / g as f64;
            for c in 0..ell {
                wbar[c] = walk[c * g + k] - r * end[c];
            }
            for p in 0..ell {
                for q in p..ell {
                    m[(p, q)] += wbar[p] * wbar[q];
                }
            }
        }
        for p in 0..ell {
            for q in p..ell {
                m[(p, q)] /= g as f64;
                m[(q, p)] = m[(p, q)];
            }
        }
        t.push(end[0] / m[(0, 0)].sqrt());
        let e = DVector::from_column_slice(&end);
        let w = match m.clone().cholesky() {
            Some(ch) => e.dot(&ch.solve(&e)),
            None => return Err(Error::Singular("simulated functional matrix".into())),
        };
        wald.push(w);
    }
    Ok((t, wald))
}

/// Monte Carlo quantiles of the limit functionals at `probs`.
///
/// The t form is symmetric, so its quantiles are read off `|t|`.
pub fn simulate_limit_quantiles(
    ell: usize,
    grid_steps: usize,
    replications: usize,
    seed: u64,
    probs: &[f64],
) -> Result<LimitQuantiles> {
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidConfig(format!("probability must lie in (0, 1), got {p}")));
    }
    let (t, mut wald) = simulate_limit_draws(ell, grid_steps, replications, seed)?;
    let mut abs_t: Vec<f64> = t.iter().map(|v| v.abs()).collect();
    abs_t.sort_by(f64::total_cmp);
    wald.sort_by(f64::total_cmp);
    let tq = probs
        .iter()
        .map(|&p| {
            if p > 0.5 {
                sorted_quantile(&abs_t, 2.0 * p - 1.0)
            } else if p < 0.5 {
                -sorted_quantile(&abs_t, 1.0 - 2.0 * p)
            } else {
                0.0
            }
        })
        .collect();
    let wq = probs.iter().map(|&p| sorted_quantile(&wald, p)).collect();
    Ok(LimitQuantiles {
        probs: probs.to_vec(),
        t: tq,
        wald: wq,
    })
}

/// Simulate a cache covering `ells`: t rows for `ell = 1`, Wald rows for every `ell`.
pub fn build_cache(
    ells: &[usize],
    t_probs: &[f64],
    wald_probs: &[f64],
    grid_steps: usize,
    replications: usize,
    seed: u64,
) -> Result<CvCache> {
    let mut cache = CvCache::default();
    for &ell in ells {
        let mut probs: Vec<f64> = wald_probs.to_vec();
        if ell == 1 {
            probs.extend_from_slice(t_probs);
        }
        let q = simulate_limit_quantiles(ell, grid_steps, replications, seed, &probs)?;
        let row = |form, prob, value| CvEntry {
            form,
            ell,
            prob,
            grid_steps,
            replications,
            seed,
            value,
        };
        if ell == 1 {
            for (k, &p) in t_probs.iter().enumerate() {
                cache.push(row(StatForm::T, p, q.t[wald_probs.len() + k]));
            }
        }
        for (k, &p) in wald_probs.iter().enumerate() {
            cache.push(row(StatForm::Wald, p, q.wald[k]));
        }
    }
    Ok(cache)
}
