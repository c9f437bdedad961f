//! Experiment grids over one manifest and one or more embedding files.
//!
//! Every cell is a (matcher, demographic, probe condition, gallery policy)
//! tuple and is compared against the baseline cell of its matcher and
//! demographic: original probes searched against the unmodified gallery.
//!
//! Output layout:
//!
//! ```text
//! <output_dir>/run_manifest.json
//! <output_dir>/cells/<matcher>__<demographic>__<condition>__<policy>/
//!     results.csv  metrics.json  histogram.csv  partition.json
//! <output_dir>/tables/{dprime,wasserstein,fpir,recovery}.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedstore::{read_embeddings, EmbedError, EmbeddingSet};
use crate::manifest::{load_manifest, ConditionBase, Demographic, Manifest, ManifestError};
use crate::metrics::{histogram, recovery_pct, Histogram, MetricReport, ScoreLabel};
use crate::protocol::{apply_gallery_variants, bind_condition, build_partition, GalleryPolicy, Partition};
use crate::rng::derive_seed;
use crate::search::{load_results, rank_one, save_results, RankOneResult};

const RUN_MANIFEST: &str = "run_manifest.json";
const CELLS_DIR: &str = "cells";
const TABLES_DIR: &str = "tables";
const GALLERY_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Manifest { path: PathBuf, source: ManifestError },
    #[error("{}: {source}", path.display())]
    Embed { path: PathBuf, source: EmbedError },
    #[error("cell {cell}: {message}")]
    Cell { cell: String, message: String },
    #[error("{}: {message}", path.display())]
    Output { path: PathBuf, message: String },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl ExperimentError {
    /// Bad config or unreadable inputs, as opposed to a failure inside a cell.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ExperimentError::InvalidConfig(_) | ExperimentError::Manifest { .. } | ExperimentError::Embed { .. }
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherSpec {
    pub name: String,
    pub embeddings_path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 40, lo: -1.0, hi: 1.0 }
    }
}

fn default_policies() -> Vec<GalleryPolicy> {
    vec![GalleryPolicy::None]
}

/// JSON experiment description. Relative paths are resolved against the
/// directory holding the config file.
///
/// A single matcher may be given with `matcher_name` + `embeddings_path`
/// instead of a `matchers` list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest_path: PathBuf,
    #[serde(default)]
    pub matchers: Vec<MatcherSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matcher_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings_path: Option<PathBuf>,
    pub demographics: Vec<Demographic>,
    #[serde(default)]
    pub balance_to: Option<usize>,
    pub seed: u64,
    pub conditions: Vec<ConditionBase>,
    #[serde(default = "default_policies")]
    pub gallery_policies: Vec<GalleryPolicy>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub histogram: HistogramSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.manifest_path);
        resolve(&mut cfg.output_dir);
        for m in &mut cfg.matchers {
            resolve(&mut m.embeddings_path);
        }
        if let Some(p) = cfg.embeddings_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_json(&text, base)
    }

    /// The `matchers` list merged with the single-matcher shorthand.
    pub fn matcher_list(&self) -> Vec<MatcherSpec> {
        let mut out = self.matchers.clone();
        if let Some(p) = &self.embeddings_path {
            out.push(MatcherSpec {
                name: self.matcher_name.clone().unwrap_or_else(|| "matcher".to_string()),
                embeddings_path: p.clone(),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        let matchers = self.matcher_list();
        if matchers.is_empty() {
            return bad("no matchers configured".into());
        }
        if self.matcher_name.is_some() && self.embeddings_path.is_none() {
            return bad("matcher_name given without embeddings_path".into());
        }
        let mut seen = Vec::new();
        for m in &matchers {
            if !safe_name(&m.name) {
                return bad(format!("matcher name `{}` must be [A-Za-z0-9_-] without `__`", m.name));
            }
            if seen.contains(&&m.name) {
                return bad(format!("duplicate matcher name `{}`", m.name));
            }
            seen.push(&m.name);
            if !m.embeddings_path.is_file() {
                return bad(format!("embeddings file {} not found", m.embeddings_path.display()));
            }
        }
        if !self.manifest_path.is_file() {
            return bad(format!("manifest file {} not found", self.manifest_path.display()));
        }
        if self.conditions.is_empty() {
            return bad("conditions must be non-empty".into());
        }
        if self.demographics.is_empty() {
            return bad("demographics must be non-empty".into());
        }
        for d in &self.demographics {
            if !safe_name(d.as_str()) {
                return bad(format!("demographic `{}` is not usable in a directory name", d.as_str()));
            }
        }
        let h = self.histogram;
        if h.bins == 0 || !(h.lo < h.hi) || !h.lo.is_finite() || !h.hi.is_finite() {
            return bad(format!("histogram needs bins >= 1 and lo < hi, got {h:?}"));
        }
        Ok(())
    }

    /// Every cell of the run in output order. The baseline leads each
    /// (matcher, demographic) block; the original condition only runs with
    /// policy `none`.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut conditions = vec![ConditionBase::Original];
        for &c in &self.conditions {
            if !conditions.contains(&c) {
                conditions.push(c);
            }
        }
        let mut policies = vec![GalleryPolicy::None];
        for &p in &self.gallery_policies {
            if !policies.contains(&p) {
                policies.push(p);
            }
        }
        let mut demographics: Vec<&Demographic> = Vec::new();
        for d in &self.demographics {
            if !demographics.contains(&d) {
                demographics.push(d);
            }
        }
        let mut out = Vec::new();
        for m in self.matcher_list() {
            for d in &demographics {
                for &c in &conditions {
                    let ps: &[GalleryPolicy] = if c == ConditionBase::Original { &policies[..1] } else { &policies };
                    for &p in ps {
                        out.push(CellKey {
                            matcher: m.name.clone(),
                            demographic: (*d).clone(),
                            condition: c,
                            policy: p,
                        });
                    }
                }
            }
        }
        out
    }
}

fn safe_name(s: &str) -> bool {
    !s.is_empty()
        && !s.contains("__")
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub matcher: String,
    pub demographic: Demographic,
    pub condition: ConditionBase,
    pub policy: GalleryPolicy,
}

impl CellKey {
    pub fn is_baseline(&self) -> bool {
        self.condition == ConditionBase::Original && self.policy == GalleryPolicy::None
    }

    pub fn baseline(&self) -> CellKey {
        CellKey {
            condition: ConditionBase::Original,
            policy: GalleryPolicy::None,
            ..self.clone()
        }
    }

    pub fn dir_name(&self) -> String {
        format!(
            "{}__{}__{}__{}",
            self.matcher,
            self.demographic.as_str(),
            self.condition.as_str(),
            self.policy.as_str()
        )
    }

    fn group(&self) -> String {
        format!("{}_{}", self.matcher, self.demographic.as_str())
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

/// Contents of a cell's `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    #[serde(flatten)]
    pub key: CellKey,
    pub probes: usize,
    pub excluded_subjects: usize,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct CellOutput {
    pub key: CellKey,
    pub partition: Partition,
    pub results: Vec<RankOneResult>,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub cells: Vec<CellOutput>,
    pub output_dir: PathBuf,
}

impl ExperimentOutput {
    pub fn cell(&self, key: &CellKey) -> Option<&CellOutput> {
        self.cells.iter().find(|c| &c.key == key)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            cells: self
                .cells
                .iter()
                .map(|c| (c.key.dir_name(), c.report.clone()))
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct InputRecord {
    role: String,
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    seed: u64,
    gallery_seed: u64,
    balance_to: Option<usize>,
    demographics: &'a [Demographic],
    conditions: &'a [ConditionBase],
    gallery_policies: &'a [GalleryPolicy],
    histogram: HistogramSpec,
    inputs: Vec<InputRecord>,
    cells: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn file_label(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn run_cell(
    key: &CellKey,
    m: &Manifest,
    emb: &EmbeddingSet,
    cfg: &ExperimentConfig,
) -> Result<(Partition, Vec<RankOneResult>), String> {
    let p = build_partition(m, &key.demographic, cfg.seed, cfg.balance_to).map_err(|e| e.to_string())?;
    let p = bind_condition(&p, m, key.condition).map_err(|e| e.to_string())?;
    let p = apply_gallery_variants(&p, m, key.policy, derive_seed(cfg.seed, GALLERY_STREAM))
        .map_err(|e| e.to_string())?;
    let results = rank_one(emb, emb, &p).map_err(|e| e.to_string())?;
    Ok((p, results))
}

/// Runs every cell and writes the output tree under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest_path).map_err(|source| ExperimentError::Manifest {
        path: cfg.manifest_path.clone(),
        source,
    })?;
    let matchers = cfg.matcher_list();
    let embeddings: HashMap<String, EmbeddingSet> = matchers
        .iter()
        .map(|mt| {
            read_embeddings(&mt.embeddings_path)
                .map(|e| (mt.name.clone(), e))
                .map_err(|source| ExperimentError::Embed { path: mt.embeddings_path.clone(), source })
        })
        .collect::<Result<_, _>>()?;

    let keys = cfg.cells();
    let scored: Vec<Result<(Partition, Vec<RankOneResult>), String>> = keys
        .par_iter()
        .map(|k| run_cell(k, &manifest, &embeddings[&k.matcher], cfg))
        .collect();
    let mut runs: BTreeMap<CellKey, (Partition, Vec<RankOneResult>)> = BTreeMap::new();
    for (k, r) in keys.iter().zip(scored) {
        let r = r.map_err(|message| ExperimentError::Cell { cell: k.dir_name(), message })?;
        runs.insert(k.clone(), r);
    }

    let mut reports: BTreeMap<CellKey, MetricReport> = BTreeMap::new();
    for k in &keys {
        let base = &runs[&k.baseline()].1;
        let report = MetricReport::compare(base, &runs[k].1)
            .map_err(|e| ExperimentError::Cell { cell: k.dir_name(), message: e.to_string() })?;
        reports.insert(k.clone(), report);
    }
    for k in &keys {
        if k.policy == GalleryPolicy::None {
            continue;
        }
        let unmitigated = CellKey { policy: GalleryPolicy::None, ..k.clone() };
        let wu = reports[&unmitigated].wasserstein_shift;
        let wm = reports[k].wasserstein_shift;
        reports.get_mut(k).unwrap().recovery_pct = if wu > 0.0 { recovery_pct(wu, wm).ok() } else { None };
    }

    let cells: Vec<CellOutput> = keys
        .iter()
        .map(|k| {
            let (partition, results) = runs.remove(k).unwrap();
            CellOutput { key: k.clone(), partition, results, report: reports.remove(k).unwrap() }
        })
        .collect();
    let out = ExperimentOutput { cells, output_dir: cfg.output_dir.clone() };
    write_output(cfg, &matchers, &out)?;
    Ok(out)
}

fn prepare_output_dir(dir: &Path) -> Result<(), ExperimentError> {
    if dir.exists() {
        let has_entries = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if has_entries && !dir.join(RUN_MANIFEST).is_file() {
            return Err(ExperimentError::Output {
                path: dir.to_path_buf(),
                message: "exists, is not empty and holds no previous run".into(),
            });
        }
        for sub in [CELLS_DIR, TABLES_DIR] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    for sub in [CELLS_DIR, TABLES_DIR] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_output(cfg: &ExperimentConfig, matchers: &[MatcherSpec], out: &ExperimentOutput) -> Result<(), ExperimentError> {
    let dir = &cfg.output_dir;
    prepare_output_dir(dir)?;

    out.cells.par_iter().try_for_each(|c| write_cell(dir, cfg.histogram, c))?;
    write_tables(&dir.join(TABLES_DIR), out)?;

    let mut inputs = vec![InputRecord {
        role: "manifest".into(),
        file: file_label(&cfg.manifest_path),
        sha256: sha256_file(&cfg.manifest_path)?,
    }];
    for m in matchers {
        inputs.push(InputRecord {
            role: format!("embeddings:{}", m.name),
            file: file_label(&m.embeddings_path),
            sha256: sha256_file(&m.embeddings_path)?,
        });
    }
    let rm = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        gallery_seed: derive_seed(cfg.seed, GALLERY_STREAM),
        balance_to: cfg.balance_to,
        demographics: &cfg.demographics,
        conditions: &cfg.conditions,
        gallery_policies: &cfg.gallery_policies,
        histogram: cfg.histogram,
        inputs,
        cells: out.cells.iter().map(|c| c.key.dir_name()).collect(),
    };
    write_file(&dir.join(RUN_MANIFEST), pretty(&rm).as_bytes())
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn write_cell(root: &Path, hist: HistogramSpec, c: &CellOutput) -> Result<(), ExperimentError> {
    let dir = root.join(CELLS_DIR).join(c.key.dir_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cell_err = |message: String| ExperimentError::Cell { cell: c.key.dir_name(), message };

    let results_path = dir.join("results.csv");
    save_results(&c.results, &results_path).map_err(|e| cell_err(e.to_string()))?;

    // The FPIR must be recoverable from the written CSV alone.
    let reread = load_results(&results_path).map_err(|e| cell_err(e.to_string()))?;
    let negative = reread.iter().filter(|r| r.diff.is_sign_negative()).count();
    if negative != c.report.fpir_count {
        return Err(cell_err(format!(
            "results.csv has {negative} negative diffs but fpir counted {}",
            c.report.fpir_count
        )));
    }

    let metrics = CellMetrics {
        key: c.key.clone(),
        probes: c.results.len(),
        excluded_subjects: c.partition.excluded_subjects.len(),
        report: c.report.clone(),
    };
    write_file(&dir.join("metrics.json"), pretty(&metrics).as_bytes())?;

    let mut csv = String::from("label,lower,upper,count\n");
    for label in [ScoreLabel::Mated, ScoreLabel::Nonmated, ScoreLabel::Diff] {
        let values: Vec<f64> = c.results.iter().map(|r| label.extract(r)).collect();
        let h = histogram(&values, hist.bins, hist.lo, hist.hi).map_err(|e| cell_err(e.to_string()))?;
        push_histogram(&mut csv, label.as_str(), &h);
    }
    write_file(&dir.join("histogram.csv"), csv.as_bytes())?;

    let mut partition = c.partition.to_json();
    partition.push('\n');
    write_file(&dir.join("partition.json"), partition.as_bytes())
}

fn push_histogram(out: &mut String, label: &str, h: &Histogram) {
    let lo = h.edges[0];
    let hi = h.edges[h.edges.len() - 1];
    out.push_str(&format!("{label},-inf,{lo:.6},{}\n", h.below));
    for (i, n) in h.counts.iter().enumerate() {
        out.push_str(&format!("{label},{:.6},{:.6},{n}\n", h.edges[i], h.edges[i + 1]));
    }
    out.push_str(&format!("{label},{hi:.6},inf,{}\n", h.above));
}

/// Wide tables: one row per (condition, policy), one column group per
/// (matcher, demographic).
fn write_tables(dir: &Path, out: &ExperimentOutput) -> Result<(), ExperimentError> {
    let mut groups: Vec<String> = Vec::new();
    let mut rows: Vec<(ConditionBase, GalleryPolicy)> = Vec::new();
    let mut by_cell: HashMap<(String, ConditionBase, GalleryPolicy), &MetricReport> = HashMap::new();
    for c in &out.cells {
        let g = c.key.group();
        if !groups.contains(&g) {
            groups.push(g.clone());
        }
        let row = (c.key.condition, c.key.policy);
        if !rows.contains(&row) {
            rows.push(row);
        }
        by_cell.insert((g, c.key.condition, c.key.policy), &c.report);
    }

    let table = |cols: &[&str], rows: &[(ConditionBase, GalleryPolicy)], cell: &dyn Fn(&MetricReport) -> Vec<String>| {
        let mut s = String::from("condition,policy");
        for g in &groups {
            for col in cols {
                s.push_str(&format!(",{g}_{col}"));
            }
        }
        s.push('\n');
        for &(cond, pol) in rows {
            s.push_str(&format!("{},{}", cond.as_str(), pol.as_str()));
            for g in &groups {
                match by_cell.get(&(g.clone(), cond, pol)) {
                    Some(r) => {
                        for v in cell(r) {
                            s.push(',');
                            s.push_str(&v);
                        }
                    }
                    None => s.push_str(&",".repeat(cols.len())),
                }
            }
            s.push('\n');
        }
        s
    };

    let dprime = table(&["mated", "nonmated"], &rows, &|r| {
        vec![format!("{:.4}", r.dprime_mated), format!("{:.4}", r.dprime_nonmated)]
    });
    let wass = table(&["shift"], &rows, &|r| vec![format!("{:.6}", r.wasserstein_shift)]);
    let fpir = table(&["fpir_pct"], &rows, &|r| vec![format!("{:.3}", r.fpir * 100.0)]);
    let mitigated: Vec<_> = rows.iter().copied().filter(|(_, p)| *p != GalleryPolicy::None).collect();
    let recovery = table(&["shift", "recovery_pct"], &mitigated, &|r| {
        vec![
            format!("{:.6}", r.wasserstein_shift),
            r.recovery_pct.map(|v| format!("{v:.2}")).unwrap_or_default(),
        ]
    });

    write_file(&dir.join("dprime.csv"), dprime.as_bytes())?;
    write_file(&dir.join("wasserstein.csv"), wass.as_bytes())?;
    write_file(&dir.join("fpir.csv"), fpir.as_bytes())?;
    write_file(&dir.join("recovery.csv"), recovery.as_bytes())
}

/// Per-cell metric reports of a finished run, keyed by cell directory name.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub cells: BTreeMap<String, MetricReport>,
}

/// Reads the `metrics.json` of every cell under `dir/cells`.
pub fn load_output(dir: impl AsRef<Path>) -> Result<RunSummary, ExperimentError> {
    let cells_dir = dir.as_ref().join(CELLS_DIR);
    let mut cells = BTreeMap::new();
    for entry in fs::read_dir(&cells_dir).map_err(io_err(&cells_dir))? {
        let entry = entry.map_err(io_err(&cells_dir))?;
        if !entry.path().is_dir() {
            continue;
        }
        let path = entry.path().join("metrics.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: CellMetrics = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Output { path: path.clone(), message: e.to_string() })?;
        cells.insert(entry.file_name().to_string_lossy().into_owned(), m.report);
    }
    Ok(RunSummary { cells })
}

/// Signed change `b - a` of one cell's metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellDelta {
    pub cell: String,
    pub fpir: f64,
    pub dprime_mated: f64,
    pub dprime_nonmated: f64,
    pub wasserstein_shift: f64,
}

impl CellDelta {
    pub fn max_abs(&self) -> f64 {
        [self.fpir, self.dprime_mated, self.dprime_nonmated, self.wasserstein_shift]
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn diff_runs(a: &RunSummary, b: &RunSummary) -> Result<Vec<CellDelta>, ExperimentError> {
    let only_a: Vec<&str> = a.cells.keys().filter(|k| !b.cells.contains_key(*k)).map(|s| s.as_str()).collect();
    let only_b: Vec<&str> = b.cells.keys().filter(|k| !a.cells.contains_key(*k)).map(|s| s.as_str()).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(ExperimentError::GridMismatch(format!(
            "only in first: [{}]; only in second: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    Ok(a.cells
        .iter()
        .map(|(cell, ra)| {
            let rb = &b.cells[cell];
            CellDelta {
                cell: cell.clone(),
                fpir: rb.fpir - ra.fpir,
                dprime_mated: rb.dprime_mated - ra.dprime_mated,
                dprime_nonmated: rb.dprime_nonmated - ra.dprime_nonmated,
                wasserstein_shift: rb.wasserstein_shift - ra.wasserstein_shift,
            }
        })
        .collect())
}
