//! Run configuration, seeding, caching and artifact output.
//!
//! A run is fully determined by its [`RunConfig`]; every random stream is a
//! child of the master seed, so the manifest (config hash + stream keys) is
//! enough to reproduce each emitted number.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::condsim::{HGrid, HSettings};
use crate::envmodel::{check_b2, OffspringFamily};
use crate::gfengine::{check_hbound, o_functional_grid};
use crate::limits::{
    asym_exp_min, asym_stay_low, assemble_limit_law, constant_gleft, constant_gright, default_h_grid, law_from_sweeps,
    meander_from_sweeps, scaling_from_sweeps, sweeps, theorem2_constancy, theta_from_sweeps, LeftForm, LeftReport,
    LeftSettings, LimitError, RightReport, RightSettings, Theorem2Settings,
};
use crate::renewal::{check_harmonicity, estimate_u, estimate_v, RenewalSettings, RenewalTable};
use crate::rng::{Exec, StreamKey};
use crate::stablecore::{IncrementModel, ModelSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cache entry {0} failed its checksum")]
    Checksum(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error("{0}")]
    Compute(String),
}

fn compute<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Compute(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Renewal,
    Survival,
    Constants,
    Theorem1,
    Theorem2,
    Asymptotics,
    Meander,
    CheckB2,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Renewal => "renewal",
            Experiment::Survival => "survival",
            Experiment::Constants => "constants",
            Experiment::Theorem1 => "theorem1",
            Experiment::Theorem2 => "theorem2",
            Experiment::Asymptotics => "asymptotics",
            Experiment::Meander => "meander",
            Experiment::CheckB2 => "check-b2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Paths per renewal table.
    pub renewal_paths: u64,
    /// Environments or walks per `n` (and per check point).
    pub samples: u64,
    /// Samples for `G_left` and for the `G_right` series.
    pub constant_samples: u64,
    /// `(y, P⁺, P⁻)` triples for the kernel grid.
    pub kernel_samples: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self { renewal_paths: 1_000_000, samples: 1_000_000, constant_samples: 1_000_000, kernel_samples: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truncation {
    /// Left-series and right-series cutoffs.
    pub j_max: usize,
    /// Renewal series cutoff.
    pub n_max: usize,
    /// Depth for the deep-prefix diagnostic of the left series.
    pub n_cut: f64,
    /// Horizon of the `P±` walks.
    pub m_max: usize,
    /// Extrapolate the `P±` horizons.
    pub richardson: bool,
    /// Renewal grid; defaults scale with `a_1`.
    pub step: Option<f64>,
    pub x_max: Option<f64>,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { j_max: 1024, n_max: 4096, n_cut: 10.0, m_max: 32, richardson: true, step: None, x_max: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Time fraction of the path-constancy window.
    pub theta_frac: f64,
    /// Number of equispaced `z` points on `[0, 1]`.
    pub z_points: usize,
    /// `x` grid of the meander curve.
    pub meander_xs: Vec<f64>,
    pub b2_b: u64,
    pub b2_epsilon: f64,
    /// Russian-roulette floor on survival weights.
    pub roulette: f64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            theta_frac: 0.25,
            z_points: 21,
            meander_xs: vec![0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            b2_b: 3,
            b2_epsilon: 0.1,
            roulette: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    /// Master seed; there is no wall-clock fallback.
    pub seed: Option<u64>,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub family: OffspringFamily,
    #[serde(default)]
    pub k: f64,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub params: ExperimentParams,
    #[serde(default = "default_lanes")]
    pub lanes: usize,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Cache of renewal tables and kernel grids; none when absent.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_model() -> ModelSpec {
    ModelSpec::Gaussian { sigma: 1.0 }
}

fn default_n_list() -> Vec<usize> {
    vec![128, 256, 512]
}

fn default_lanes() -> usize {
    64
}

fn default_parallel() -> bool {
    true
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        Self {
            experiment,
            seed: Some(seed),
            model: default_model(),
            family: OffspringFamily::default(),
            k: 0.0,
            n_list: default_n_list(),
            budgets: Budgets::default(),
            truncation: Truncation::default(),
            params: ExperimentParams::default(),
            lanes: default_lanes(),
            parallel: true,
            output_dir: default_output(),
            cache_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.seed.is_none() {
            return bad("seed is mandatory");
        }
        let b = &self.budgets;
        if b.renewal_paths == 0 || b.samples == 0 || b.constant_samples == 0 || b.kernel_samples == 0 {
            return bad("all budgets must be positive");
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_list must be positive and strictly increasing");
        }
        if self.lanes == 0 {
            return bad("lanes must be positive");
        }
        if !self.k.is_finite() {
            return bad("K must be finite");
        }
        let t = &self.truncation;
        if t.j_max < 2 || t.n_max == 0 || t.m_max == 0 {
            return bad("truncation parameters must be positive (j_max >= 2)");
        }
        if !(self.params.theta_frac > 0.0 && self.params.theta_frac < 0.5) {
            return bad("theta_frac must lie in (0, 1/2)");
        }
        if self.params.z_points < 2 {
            return bad("z_points must be at least 2");
        }
        self.model.build().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn exec(&self) -> Exec {
        Exec { lanes: self.lanes, parallel: self.parallel }
    }

    /// SHA-256 of everything that influences the numbers (paths and the
    /// parallel flag excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.cache_dir = None;
        c.parallel = true;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    fn renewal_settings(&self, model: &IncrementModel) -> RenewalSettings {
        let mut s = RenewalSettings::defaults(model, self.budgets.renewal_paths);
        s.n_max = self.truncation.n_max;
        if let Some(step) = self.truncation.step {
            s.step = step;
        }
        if let Some(x) = self.truncation.x_max {
            s.x_max = x;
        }
        s
    }

    fn zs(&self) -> Vec<f64> {
        let m = self.params.z_points - 1;
        (0..=m).map(|i| i as f64 / m as f64).collect()
    }
}

/// Record of one stream family consumed by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub label: String,
    /// ChaCha key (hex); lane `i` uses stream `i`.
    pub seed: String,
    pub lanes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: Experiment,
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    pub streams: Vec<StreamRecord>,
    pub cache_keys: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub experiment: Experiment,
    pub config_hash: String,
    pub criteria: Vec<CriterionVerdict>,
    /// Named numbers with standard errors and truncation diagnostics.
    pub values: serde_json::Map<String, serde_json::Value>,
}

impl Verdict {
    pub fn all_pass(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }
}

// ---------------------------------------------------------------------------
// Cache.

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    checksum: String,
    payload: String,
}

/// Content-addressed store for expensive intermediate tables.
#[derive(Clone, Debug)]
pub struct Cache {
    pub dir: PathBuf,
}

pub fn cache_key<T: Serialize>(kind: &str, parts: &T) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(parts).expect("key serializes"));
    format!("{kind}-{}", &hex::encode(h.finalize())[..24])
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn store<T: Serialize>(&self, key: &str, value: &T) -> Result<(), RunError> {
        fs::create_dir_all(&self.dir)?;
        let payload = serde_json::to_string(value)?;
        let entry = CacheEntry { checksum: hex::encode(Sha256::digest(payload.as_bytes())), payload };
        write_atomic(&self.path(key), serde_json::to_string(&entry)?.as_bytes())
    }

    /// `Ok(None)` when absent; a corrupt entry is a checksum error.
    pub fn load<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, RunError> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)?;
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|_| RunError::Checksum(key.to_string()))?;
        if hex::encode(Sha256::digest(entry.payload.as_bytes())) != entry.checksum {
            return Err(RunError::Checksum(key.to_string()));
        }
        Ok(Some(serde_json::from_str(&entry.payload)?))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// The runner.

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: IncrementModel,
    exec: Exec,
    root: StreamKey,
    out: PathBuf,
    streams: Vec<StreamRecord>,
    cache_keys: Vec<String>,
    outputs: Vec<String>,
    notices: Vec<String>,
    criteria: Vec<CriterionVerdict>,
    values: serde_json::Map<String, serde_json::Value>,
}

impl<'a> Ctx<'a> {
    fn key(&mut self, label: &str) -> StreamKey {
        let key = self.root.child(label);
        self.streams.push(StreamRecord { label: label.to_string(), seed: hex::encode(key.seed()), lanes: self.exec.lanes });
        key
    }

    fn criterion(&mut self, name: &str, pass: bool, detail: String) {
        self.criteria.push(CriterionVerdict { name: name.to_string(), pass, detail });
    }

    fn value<T: Serialize>(&mut self, name: &str, v: &T) {
        self.values.insert(name.to_string(), serde_json::to_value(v).expect("value serializes"));
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::Io(e.into_error()))?;
        write_atomic(&self.out.join(name), &bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn cached<T, F>(&mut self, kind: &str, parts: &impl Serialize, make: F) -> Result<T, RunError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&mut Self) -> Result<T, RunError>,
    {
        let key = cache_key(kind, parts);
        self.cache_keys.push(key.clone());
        let cache = self.cfg.cache_dir.as_ref().map(Cache::new);
        if let Some(c) = &cache {
            match c.load(&key) {
                Ok(Some(v)) => return Ok(v),
                Ok(None) => {}
                Err(e) => self.notices.push(format!("{e}; recomputing")),
            }
        }
        let v = make(self)?;
        if let Some(c) = &cache {
            c.store(&key, &v)?;
        }
        Ok(v)
    }

    fn tables(&mut self) -> Result<(RenewalTable, RenewalTable), RunError> {
        let settings = self.cfg.renewal_settings(&self.model);
        let parts = (&self.cfg.model, settings, self.cfg.seed(), self.exec.lanes);
        let u = self.cached("u-table", &parts, |c| {
            let key = c.key("renewal-u");
            Ok(estimate_u(&c.model, &settings, &c.exec, key))
        })?;
        let v = self.cached("v-table", &parts, |c| {
            let key = c.key("renewal-v");
            Ok(estimate_v(&c.model, &settings, &c.exec, key))
        })?;
        Ok((u, v))
    }

    fn h_settings(&self) -> HSettings {
        HSettings {
            plus_horizon: self.cfg.truncation.m_max,
            minus_horizon: self.cfg.truncation.m_max,
            samples: self.cfg.budgets.kernel_samples,
            richardson: self.cfg.truncation.richardson,
        }
    }

    fn kernel(&mut self, u: &RenewalTable, v: &RenewalTable) -> Result<HGrid, RunError> {
        let hs = self.h_settings();
        let (us, ws) = default_h_grid(self.cfg.k);
        let parts = (&self.cfg.model, self.cfg.family, &us, &ws, hs, self.cfg.renewal_settings(&self.model), self.cfg.seed(), self.exec.lanes);
        self.cached("h-grid", &parts, |c| {
            let key = c.key("kernel");
            crate::condsim::estimate_h_grid(&c.model, c.cfg.family, &us, &ws, u, v, &hs, &c.exec, key).map_err(compute)
        })
    }

    fn left_settings(&self, form: LeftForm) -> LeftSettings {
        let t = &self.cfg.truncation;
        LeftSettings {
            j_max: t.j_max,
            plus_horizon: t.m_max,
            minus_horizon: t.m_max,
            samples: self.cfg.budgets.constant_samples,
            form,
            n_cut: t.n_cut,
            richardson: t.richardson,
        }
    }

    /// Both left forms and the right constant at `K`, evaluated at `zs`.
    fn constants(&mut self, zs: &[f64]) -> Result<(LeftReport, LeftReport, RightReport, HGrid), RunError> {
        let (u, v) = self.tables()?;
        let k = self.cfg.k;
        let fam = self.cfg.family;
        let key = self.key("g-left");
        let corrected = constant_gleft(&self.model, fam, k, zs, &self.left_settings(LeftForm::EndCorrected), &u, &v, &self.exec, key)?;
        let forever = constant_gleft(&self.model, fam, k, zs, &self.left_settings(LeftForm::SurviveForever), &u, &v, &self.exec, key)?;
        let grid = self.kernel(&u, &v)?;
        let rs = RightSettings { v_max: self.cfg.truncation.j_max, samples: self.cfg.budgets.constant_samples };
        let key = self.key("g-right");
        let right = constant_gright(&self.model, fam, k, zs, &grid, &rs, &u, &self.exec, key)?;
        Ok((corrected, forever, right, grid))
    }
}

#[derive(Serialize)]
struct ScalingRow {
    n: usize,
    k: f64,
    a_n: f64,
    b_n: f64,
    estimate: f64,
    std_error: f64,
    ratio: f64,
    ratio_se: f64,
}

#[derive(Serialize)]
struct ThetaCsv {
    n: usize,
    survival: f64,
    survival_se: f64,
    stay_positive: f64,
    stay_positive_se: f64,
    ratio: f64,
    ratio_se: f64,
}

#[derive(Serialize)]
struct SplitRow {
    n: usize,
    j: usize,
    left: f64,
    middle: f64,
    right: f64,
    middle_over_b: f64,
}

#[derive(Serialize)]
struct TermRow {
    index: usize,
    value: f64,
    std_error: f64,
    partial_sum: f64,
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct CurveRow {
    series: String,
    z: f64,
    value: f64,
    std_error: f64,
}

fn term_rows(terms: &[crate::stats::Estimate], scale: f64) -> Vec<TermRow> {
    let mut acc = 0.0;
    terms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            acc += t.value * scale;
            TermRow { index: i, value: t.value * scale, std_error: t.std_error * scale, partial_sum: acc }
        })
        .collect()
}

/// Partial sums under `J`-doubling should move less at each doubling.
fn partial_sums_converge(p: &[f64]) -> bool {
    let at = |j: usize| p[j.min(p.len() - 1)];
    let j = p.len() - 1;
    if j < 8 {
        return true;
    }
    let d1 = (at(j / 2) - at(j / 4)).abs();
    let d2 = (at(j) - at(j / 2)).abs();
    d2 <= d1 * 1.05 + 1e-12
}

fn fmt_e(x: f64, se: f64) -> String {
    format!("{x:.6} ± {se:.6}")
}

fn run_renewal(c: &mut Ctx) -> Result<(), RunError> {
    let (u, v) = c.tables()?;
    let mut w = Vec::new();
    u.write_csv(&mut w).map_err(compute)?;
    write_atomic(&c.out.join("u_table.csv"), &w)?;
    let mut w = Vec::new();
    v.write_csv(&mut w).map_err(compute)?;
    write_atomic(&c.out.join("v_table.csv"), &w)?;
    c.outputs.extend(["u_table.csv".to_string(), "v_table.csv".to_string()]);
    let a1 = c.model.norming(1).a_n;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (side, table) in [("plus", &u), ("minus", &v)] {
        let key = c.key(&format!("harmonic-{side}"));
        for i in 0..10 {
            let x = a1 * (0.5 + f64::from(i));
            let x = if side == "plus" { x } else { -x };
            let h = check_harmonicity(&c.model, table, x, c.cfg.budgets.samples, &c.exec, key.child_index(i as u64)).map_err(compute)?;
            worst = worst.max(h.residual / h.combined_se);
            rows.push(NamedValue { name: format!("{side}:{x}"), value: h.residual, std_error: h.combined_se });
        }
    }
    c.csv("harmonicity.csv", &rows)?;
    c.value("u_tail", &u.tail);
    c.value("v_tail", &v.tail);
    c.criterion("harmonicity", worst < 3.0, format!("max residual/SE = {worst:.3}"));
    Ok(())
}

fn run_survival(c: &mut Ctx) -> Result<(), RunError> {
    let k = c.cfg.k;
    let key = c.key("sweep");
    let cuts = [8, 16, 32];
    let sw = sweeps(&c.model, c.cfg.family, &c.cfg.n_list, |_| vec![k], None, &[], &cuts, c.cfg.budgets.samples, &c.exec, key)?;
    let table = scaling_from_sweeps(&sw, 0)?;
    let rows: Vec<ScalingRow> = table
        .rows
        .iter()
        .zip(&sw)
        .map(|(r, s)| ScalingRow {
            n: r.n,
            k,
            a_n: s.a_n,
            b_n: s.b_n,
            estimate: r.estimate.value,
            std_error: r.estimate.std_error,
            ratio: r.ratio,
            ratio_se: r.ratio_se,
        })
        .collect();
    c.csv("survival_scaling.csv", &rows)?;
    let theta: Vec<ThetaCsv> = theta_from_sweeps(&sw)
        .iter()
        .map(|t| ThetaCsv {
            n: t.n,
            survival: t.survival.value,
            survival_se: t.survival.std_error,
            stay_positive: t.stay_positive.value,
            stay_positive_se: t.stay_positive.std_error,
            ratio: t.ratio.value,
            ratio_se: t.ratio.std_error,
        })
        .collect();
    c.csv("theta_survival.csv", &theta)?;
    let split: Vec<SplitRow> = sw
        .iter()
        .flat_map(|s| {
            s.cells[0].tau_split.iter().map(move |t| SplitRow {
                n: s.n,
                j: t.j,
                left: t.left.value,
                middle: t.middle.value,
                right: t.right.value,
                middle_over_b: t.middle.value / s.b_n,
            })
        })
        .collect();
    c.csv("tau_split.csv", &split)?;
    let last = table.rows.last().expect("nonempty");
    c.criterion("stabilized", table.stabilized, format!("last ratio {}", fmt_e(last.ratio, last.ratio_se)));
    Ok(())
}

fn run_constants(c: &mut Ctx) -> Result<(), RunError> {
    let zs = c.cfg.zs();
    let (corrected, forever, right, grid) = c.constants(&zs)?;
    c.csv("left_terms.csv", &term_rows(&corrected.terms, 1.0))?;
    c.csv("left_terms_survive_forever.csv", &term_rows(&forever.terms, 1.0))?;
    c.csv("right_terms.csv", &term_rows(&right.terms, right.prefactor.value))?;
    let mut kernel = Vec::new();
    for (iu, u) in grid.us.iter().enumerate() {
        for (iw, w) in grid.ws.iter().enumerate() {
            kernel.push(CurveRow { series: format!("u={u}"), z: *w, value: grid.values[iu][iw], std_error: grid.std_errors[iu][iw] });
        }
    }
    c.csv("kernel.csv", &kernel)?;
    let sum = corrected.total.value + right.total.value;
    let sum_se = corrected.total.std_error.hypot(right.total.std_error);
    c.csv(
        "constants.csv",
        &[
            NamedValue { name: "g_left".into(), value: corrected.total.value, std_error: corrected.total.std_error },
            NamedValue { name: "g_left_survive_forever".into(), value: forever.total.value, std_error: forever.total.std_error },
            NamedValue { name: "g_right".into(), value: right.total.value, std_error: right.total.std_error },
            NamedValue { name: "g_sum".into(), value: sum, std_error: sum_se },
        ],
    )?;
    c.value("left_tail", &corrected.tail);
    c.value("left_deep_fraction", &corrected.deep_fraction);
    c.value("right_tail", &right.tail);
    c.value("right_kernel_se", &right.kernel_se);
    c.value("kernel_extrapolated_fraction", &grid.extrapolated_fraction);
    let positive = [corrected.total, right.total].iter().all(|e| e.value > 0.0 && e.value.is_finite());
    c.criterion("positive_finite", positive, format!("G_left {} G_right {}", fmt_e(corrected.total.value, corrected.total.std_error), fmt_e(right.total.value, right.total.std_error)));
    c.criterion("left_partial_sums_converge", partial_sums_converge(&corrected.partial_sums()), format!("tail {:.6}", corrected.tail));
    Ok(())
}

fn run_theorem1(c: &mut Ctx) -> Result<(), RunError> {
    let zs = c.cfg.zs();
    let mut czs = zs.clone();
    czs.insert(zs.len() - 1, 0.999);
    let k = c.cfg.k;
    let key = c.key("sweep-law");
    let sw = sweeps(&c.model, c.cfg.family, &c.cfg.n_list, |_| vec![k], Some(0), &zs, &[], c.cfg.budgets.samples, &c.exec, key)?;
    let curves = law_from_sweeps(&sw)?;
    let (corrected, forever, right, _) = c.constants(&czs)?;
    let law = assemble_limit_law(&corrected, &right)?;
    let law_forever = assemble_limit_law(&forever, &right)?;
    let mut rows = Vec::new();
    for cv in &curves {
        for (z, v) in cv.zs.iter().zip(&cv.values) {
            rows.push(CurveRow { series: format!("n={}", cv.n), z: *z, value: v.value, std_error: v.std_error });
        }
    }
    for (name, l) in [("limit", &law), ("limit_survive_forever", &law_forever)] {
        for (z, v) in l.zs.iter().zip(&l.values) {
            rows.push(CurveRow { series: name.into(), z: *z, value: v.value, std_error: v.std_error });
        }
    }
    c.csv("law_curves.csv", &rows)?;
    let sup = match curves.as_slice() {
        [.., a, b] => a.sup_distance(b),
        _ => f64::NAN,
    };
    let i999 = czs.iter().position(|z| *z == 0.999).expect("inserted");
    let proper = law.values[i999];
    c.criterion("consecutive_sup_distance", sup < 0.02, format!("sup = {sup:.5}"));
    c.criterion("properness_at_0.999", (1.0 - proper.value).abs() < 0.02, format!("limit(0.999) = {}", fmt_e(proper.value, proper.std_error)));
    Ok(())
}

fn run_theorem2(c: &mut Ctx) -> Result<(), RunError> {
    let st = Theorem2Settings { theta_frac: c.cfg.params.theta_frac, samples: c.cfg.budgets.samples, roulette: c.cfg.params.roulette };
    let key = c.key("theorem2");
    let reps = theorem2_constancy(&c.model, c.cfg.family, c.cfg.k, &c.cfg.n_list, &st, &c.exec, key)?;
    #[derive(Serialize)]
    struct Row {
        n: usize,
        window_start: usize,
        trajectories: u64,
        ess: f64,
        median_deviation: f64,
        y0_zero_mass: f64,
        y0_q999: f64,
        y0_far_mass: f64,
    }
    let rows: Vec<Row> = reps
        .iter()
        .map(|r| Row {
            n: r.n,
            window_start: r.window_start,
            trajectories: r.trajectories,
            ess: r.effective_sample_size,
            median_deviation: r.median_deviation,
            y0_zero_mass: r.y0_zero_mass,
            y0_q999: r.y0_q999,
            y0_far_mass: r.y0_far_mass,
        })
        .collect();
    c.csv("theorem2.csv", &rows)?;
    let dec = reps.windows(2).all(|w| w[1].median_deviation < w[0].median_deviation);
    c.criterion("median_decreases", dec, rows.iter().map(|r| format!("{:.4}", r.median_deviation)).collect::<Vec<_>>().join(" > "));
    let zero = reps.iter().map(|r| r.y0_zero_mass).fold(0.0, f64::max);
    c.criterion("y0_zero_mass", zero < 1e-3, format!("max {zero:.3e}"));
    let far = reps.iter().map(|r| r.y0_far_mass).fold(0.0, f64::max);
    c.criterion("y0_far_mass", far < 2e-3, format!("max {far:.3e}"));
    Ok(())
}

fn run_asymptotics(c: &mut Ctx) -> Result<(), RunError> {
    let (u, v) = c.tables()?;
    let samples = c.cfg.budgets.samples;
    let key = c.key("stay-low");
    let stay = asym_stay_low(&c.model, &c.cfg.n_list, 1.0, &v, samples, &c.exec, key)?;
    let key = c.key("exp-min");
    let expm = asym_exp_min(&c.model, &c.cfg.n_list, &u, samples, &c.exec, key)?;
    let rows = |t: &[crate::limits::RatioRow]| -> Vec<ScalingRow> {
        t.iter()
            .map(|r| ScalingRow {
                n: r.n,
                k: f64::NAN,
                a_n: c.model.norming(r.n as u64).a_n,
                b_n: c.model.b(r.n as u64),
                estimate: r.estimate.value,
                std_error: r.estimate.std_error,
                ratio: r.ratio,
                ratio_se: r.ratio_se,
            })
            .collect()
    };
    let (stay_rows, exp_rows) = (rows(&stay.rows), rows(&expm.rows));
    c.csv("stay_low.csv", &stay_rows)?;
    c.csv("exp_min.csv", &exp_rows)?;
    let last = stay.rows.last().expect("nonempty");
    c.criterion("stay_low_stabilized", stay.stabilized, format!("last ratio {}", fmt_e(last.ratio, last.ratio_se)));
    c.criterion("stay_low_in_band", (0.85..=1.15).contains(&last.ratio), format!("{:.4}", last.ratio));
    let last = expm.rows.last().expect("nonempty");
    c.criterion("exp_min_in_band", (0.85..=1.15).contains(&last.ratio), format!("{:.4}", last.ratio));
    let cons = expm.consecutive.iter().all(|r| (r.observed - r.expected).abs() < 3.0 * r.std_error);
    c.criterion(
        "exp_min_consecutive",
        cons,
        expm.consecutive.iter().map(|r| format!("{}/{}: {:.4}±{:.4} vs {:.4}", r.n, r.next, r.observed, r.std_error, r.expected)).collect::<Vec<_>>().join("; "),
    );
    let key = c.key("hbound");
    let hb = check_hbound(&c.model, c.cfg.family, &[10, 20, 40], &[0.0, 0.5, 0.9], &[-2.0, -1.0, 0.0], samples, &c.exec, key).map_err(compute)?;
    let by_j = |j: usize| hb.cells.iter().filter(|x| x.j == j).map(|x| x.ratio).fold(0.0, f64::max);
    c.criterion("o_bound_no_growth", by_j(40) / by_j(10) < 2.0, format!("max ratio {:.4}", hb.max_ratio));
    let key = c.key("o-200");
    let o = o_functional_grid(&c.model, c.cfg.family, 200, &[0.0, 0.5], &[-1.0, 0.0], samples, &c.exec, key).map_err(compute)?;
    let grid = c.kernel(&u, &v)?;
    let mut worst: f64 = 0.0;
    let mut orows = Vec::new();
    for (iz, z) in o.zs.iter().enumerate() {
        for (iw, w) in o.ws.iter().enumerate() {
            let r = o.ratios[iz][iw];
            let (h, hse) = grid.interpolate(*z, *w);
            worst = worst.max((r.value - h).abs() / r.std_error.hypot(hse));
            orows.push(CurveRow { series: format!("O_200 w={w}"), z: *z, value: r.value, std_error: r.std_error });
            orows.push(CurveRow { series: format!("h w={w}"), z: *z, value: h, std_error: hse });
        }
    }
    c.csv("kernel_consistency.csv", &orows)?;
    c.criterion("o_matches_h", worst < 3.0, format!("max |O - h|/SE = {worst:.3}"));
    Ok(())
}

fn run_meander(c: &mut Ctx) -> Result<(), RunError> {
    let xs = c.cfg.params.meander_xs.clone();
    let key = c.key("meander");
    let model = c.model;
    let sw = sweeps(
        &model,
        c.cfg.family,
        &c.cfg.n_list,
        |n| {
            let a = model.norming(n as u64).a_n;
            xs.iter().map(|x| x * a).collect()
        },
        None,
        &[],
        &[],
        c.cfg.budgets.samples,
        &c.exec,
        key,
    )?;
    let t = meander_from_sweeps(&sw, &xs);
    let mut rows = Vec::new();
    for cv in &t.curves {
        for (x, v) in cv.xs.iter().zip(&cv.values) {
            rows.push(CurveRow { series: format!("n={}", cv.n), z: *x, value: v.value, std_error: v.std_error });
        }
    }
    c.csv("meander.csv", &rows)?;
    let last = t.distances.last().copied().unwrap_or(f64::NAN);
    c.criterion("sup_distance", last < 0.03, format!("{:?}", t.distances));
    Ok(())
}

fn run_check_b2(c: &mut Ctx) -> Result<(), RunError> {
    let key = c.key("b2");
    let p = &c.cfg.params;
    let r = check_b2(&c.model, c.cfg.family, p.b2_b, p.b2_epsilon, c.cfg.budgets.samples, &c.exec, key).map_err(compute)?;
    c.csv(
        "b2.csv",
        &[
            NamedValue { name: "moment".into(), value: r.estimate.value, std_error: r.estimate.std_error },
            NamedValue { name: "moment_half_sample".into(), value: r.half_sample.value, std_error: r.half_sample.std_error },
            NamedValue { name: "hill_index".into(), value: r.hill_index, std_error: f64::NAN },
        ],
    )?;
    c.criterion("finite", r.finite, format!("heavy tail warning: {}", r.heavy_tail_warning));
    Ok(())
}

/// Outcome of [`run`]: the verdict, the manifest and cache notices.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub manifest: RunManifest,
    pub notices: Vec<String>,
}

/// Executes one configured experiment and writes its CSV tables,
/// `verdict.json` and `manifest.json` into the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let model = cfg.model.build().map_err(compute)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let mut c = Ctx {
        cfg,
        model,
        exec: cfg.exec(),
        root: StreamKey::new(cfg.seed(), cfg.experiment.name()),
        out,
        streams: Vec::new(),
        cache_keys: Vec::new(),
        outputs: Vec::new(),
        notices: Vec::new(),
        criteria: Vec::new(),
        values: serde_json::Map::new(),
    };
    match cfg.experiment {
        Experiment::Renewal => run_renewal(&mut c)?,
        Experiment::Survival => run_survival(&mut c)?,
        Experiment::Constants => run_constants(&mut c)?,
        Experiment::Theorem1 => run_theorem1(&mut c)?,
        Experiment::Theorem2 => run_theorem2(&mut c)?,
        Experiment::Asymptotics => run_asymptotics(&mut c)?,
        Experiment::Meander => run_meander(&mut c)?,
        Experiment::CheckB2 => run_check_b2(&mut c)?,
    }
    let hash = cfg.hash();
    let verdict = Verdict { experiment: cfg.experiment, config_hash: hash.clone(), criteria: c.criteria, values: c.values };
    write_atomic(&c.out.join("verdict.json"), serde_json::to_string_pretty(&verdict)?.as_bytes())?;
    c.outputs.push("verdict.json".into());
    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed(),
        streams: c.streams,
        cache_keys: c.cache_keys,
        outputs: c.outputs,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    write_atomic(&c.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(RunOutcome { verdict, manifest, notices: c.notices })
}
