//! Benchmark manifests, execution, the centerpoint metric, and reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::OutcomeRow;
use crate::engine::{
    localize, CandidateReport, CandidateTile, EngineConfig, LocalizationResult, QueryImage, QueryMetadata,
    RejectReason, RunMode, Status,
};
use crate::features::{MatchError, Matcher};
use crate::geo::{footprint_contains, Footprint, GeoPoint, TileGeom};
use crate::raster::{Image, Neighbor};

pub const MAX_CANDIDATES: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {field}: {message}")]
    Manifest {
        path: String,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Matcher(#[from] MatchError),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCandidate {
    pub rank: u8,
    pub image_path: PathBuf,
    /// Corners TL, TR, BR, BL as `{lat, lon}`.
    pub footprint: Footprint,
    /// Neighbor tiles keyed `NW`..`SE`; absent keys are filled black.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub neighbors: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_positive: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestQuery {
    pub id: String,
    pub image_path: PathBuf,
    pub centerpoint: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal_length_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_cover_pct: Option<f64>,
    pub candidates: Vec<ManifestCandidate>,
}

impl ManifestQuery {
    pub fn metadata(&self) -> QueryMetadata {
        QueryMetadata {
            focal_length_mm: self.focal_length_mm,
            tilt_deg: self.tilt_deg,
            cloud_cover_pct: self.cloud_cover_pct,
            centerpoint: Some(self.centerpoint),
        }
    }

    /// `None` when no candidate carries a label.
    pub fn localizable(&self) -> Option<bool> {
        let labels: Vec<bool> = self.candidates.iter().filter_map(|c| c.is_positive).collect();
        (!labels.is_empty()).then(|| labels.iter().any(|&p| p))
    }
}

/// Query list with paths relative to `base_dir` (the manifest's directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub queries: Vec<ManifestQuery>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Whether any candidate in the manifest carries an `is_positive` label.
    pub fn is_labeled(&self) -> bool {
        self.queries.iter().any(|q| q.localizable().is_some())
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self, path: &Path) -> Result<(), BenchError> {
        let err = |field: String, message: String| BenchError::Manifest {
            path: path.display().to_string(),
            field,
            message,
        };
        let mut ids = HashSet::new();
        for (qi, q) in self.queries.iter().enumerate() {
            let f = |name: &str| format!("queries[{qi}].{name}");
            if q.id.is_empty() {
                return Err(err(f("id"), "empty id".into()));
            }
            if !ids.insert(q.id.as_str()) {
                return Err(err(f("id"), format!("duplicate query id {:?}", q.id)));
            }
            q.centerpoint
                .validate()
                .map_err(|e| err(f("centerpoint"), e.to_string()))?;
            for (name, v) in [
                ("focal_length_mm", q.focal_length_mm),
                ("tilt_deg", q.tilt_deg),
                ("cloud_cover_pct", q.cloud_cover_pct),
            ] {
                if v.is_some_and(|x| !x.is_finite() || x < 0.0) {
                    return Err(err(f(name), "must be a non-negative number".into()));
                }
            }
            self.check_file(&q.image_path).map_err(|m| err(f("image_path"), m))?;
            if q.candidates.len() > MAX_CANDIDATES {
                return Err(err(
                    f("candidates"),
                    format!("{} candidates, at most {MAX_CANDIDATES} allowed", q.candidates.len()),
                ));
            }
            for (ci, c) in q.candidates.iter().enumerate() {
                let g = |name: &str| format!("queries[{qi}].candidates[{ci}].{name}");
                if ci > 0 && c.rank <= q.candidates[ci - 1].rank {
                    return Err(err(g("rank"), format!("rank {} not unique and ascending", c.rank)));
                }
                TileGeom::new(c.footprint, 1, 1).map_err(|e| err(g("footprint"), e.to_string()))?;
                self.check_file(&c.image_path).map_err(|m| err(g("image_path"), m))?;
                for (key, p) in &c.neighbors {
                    if Neighbor::from_name(key).is_none() {
                        return Err(err(g("neighbors"), format!("unknown neighbor key {key:?}")));
                    }
                    self.check_file(p).map_err(|m| err(g(&format!("neighbors.{key}")), m))?;
                }
            }
        }
        Ok(())
    }

    fn check_file(&self, p: &Path) -> Result<(), String> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(format!("file not found: {}", full.display()))
        }
    }

    /// Decodes a candidate and its neighbors.
    pub fn load_candidate(&self, c: &ManifestCandidate) -> Result<CandidateTile, String> {
        let image = Image::load(&self.resolve(&c.image_path)).map_err(|e| e.to_string())?;
        let geom = TileGeom::new(c.footprint, image.width(), image.height()).map_err(|e| e.to_string())?;
        let mut neighbors: [Option<Image>; 8] = Default::default();
        for (key, p) in &c.neighbors {
            let n = Neighbor::from_name(key).ok_or_else(|| format!("unknown neighbor {key}"))?;
            neighbors[n.index()] = Some(Image::load(&self.resolve(p)).map_err(|e| e.to_string())?);
        }
        Ok(CandidateTile {
            image,
            geom,
            neighbors,
            rank: c.rank,
        })
    }
}

/// Parses and validates a manifest; errors name the path and field.
pub fn load_manifest(path: &Path) -> Result<Manifest, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| BenchError::Manifest {
        path: path.display().to_string(),
        field: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(path)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryScore {
    Correct,
    Incorrect,
    NoPrediction,
}

/// The centerpoint metric: a localized footprint must contain the center.
pub fn score_query(result: &LocalizationResult, centerpoint: GeoPoint) -> QueryScore {
    match (&result.status, &result.footprint) {
        (Status::Localized, Some(f)) => match footprint_contains(f, centerpoint) {
            Ok(true) => QueryScore::Correct,
            _ => QueryScore::Incorrect,
        },
        _ => QueryScore::NoPrediction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub score: QueryScore,
    pub localizable: Option<bool>,
    pub centerpoint: GeoPoint,
    pub focal_length_mm: Option<f64>,
    pub tilt_deg: Option<f64>,
    pub cloud_cover_pct: Option<f64>,
    pub result: LocalizationResult,
}

impl QueryRecord {
    pub fn new(q: &ManifestQuery, result: LocalizationResult) -> Self {
        QueryRecord {
            id: q.id.clone(),
            score: score_query(&result, q.centerpoint),
            localizable: q.localizable(),
            centerpoint: q.centerpoint,
            focal_length_mm: q.focal_length_mm,
            tilt_deg: q.tilt_deg,
            cloud_cover_pct: q.cloud_cover_pct,
            result,
        }
    }
}

/// One metadata split of the report table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Focal,
    Tilt,
    Cloud,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Focal, Dimension::Tilt, Dimension::Cloud];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Focal => "focal_length_mm",
            Dimension::Tilt => "tilt_deg",
            Dimension::Cloud => "cloud_cover_pct",
        }
    }

    pub fn bins(self) -> &'static [&'static str] {
        match self {
            Dimension::Focal => &["f<=200", "200<f<=400", "400<f<=800", "f>800"],
            Dimension::Tilt => &["tilt<40", "tilt>=40"],
            Dimension::Cloud => &["cloud<40", "cloud>=40"],
        }
    }

    fn value(self, r: &QueryRecord) -> Option<f64> {
        match self {
            Dimension::Focal => r.focal_length_mm,
            Dimension::Tilt => r.tilt_deg,
            Dimension::Cloud => r.cloud_cover_pct,
        }
    }

    /// Bin index; upper bounds inclusive for focal length, 40 belongs to
    /// the upper bin for tilt and cloud cover.
    pub fn bin(self, v: f64) -> usize {
        match self {
            Dimension::Focal if v <= 200.0 => 0,
            Dimension::Focal if v <= 400.0 => 1,
            Dimension::Focal if v <= 800.0 => 2,
            Dimension::Focal => 3,
            _ if v < 40.0 => 0,
            _ => 1,
        }
    }
}

/// One column of the report: "All" or a metadata bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStat {
    pub name: String,
    pub queries: usize,
    pub correct: usize,
    /// Localizable queries when labels exist, otherwise all queries.
    pub denominator: usize,
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub matcher: String,
    pub image_side: u32,
    pub max_keypoints: usize,
    pub mode: RunMode,
    pub t_inl: Option<usize>,
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub no_prediction: usize,
    pub localizable_count: Option<usize>,
    pub percent_of_localizable: Option<f64>,
    /// Correct share of emitted predictions.
    pub precision: Option<f64>,
    pub columns: Vec<ColumnStat>,
    /// Query ids lacking each metadata field.
    pub excluded: BTreeMap<String, Vec<String>>,
    pub mean_wall_time_s: f64,
    pub queries: Vec<QueryRecord>,
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl BenchReport {
    /// Aggregates per-query records (kept in the given order).
    pub fn assemble(cfg: &EngineConfig, mode: RunMode, queries: Vec<QueryRecord>) -> Self {
        let labeled = queries.iter().any(|q| q.localizable.is_some());
        let count = |s: QueryScore| queries.iter().filter(|q| q.score == s).count();
        let (correct, incorrect) = (count(QueryScore::Correct), count(QueryScore::Incorrect));
        let localizable_count = labeled.then(|| queries.iter().filter(|q| q.localizable == Some(true)).count());

        let column = |name: &str, members: &[&QueryRecord]| {
            let correct = members.iter().filter(|q| q.score == QueryScore::Correct).count();
            let denominator = if labeled {
                members.iter().filter(|q| q.localizable == Some(true)).count()
            } else {
                members.len()
            };
            ColumnStat {
                name: name.to_string(),
                queries: members.len(),
                correct,
                denominator,
                percent: percent(correct, denominator),
            }
        };
        let all: Vec<&QueryRecord> = queries.iter().collect();
        let mut columns = vec![column("All", &all)];
        let mut excluded = BTreeMap::new();
        for d in Dimension::ALL {
            let mut bins: Vec<Vec<&QueryRecord>> = vec![Vec::new(); d.bins().len()];
            let mut missing = Vec::new();
            for q in &queries {
                match d.value(q) {
                    Some(v) => bins[d.bin(v)].push(q),
                    None => missing.push(q.id.clone()),
                }
            }
            for (name, members) in d.bins().iter().zip(&bins) {
                columns.push(column(name, members));
            }
            if !missing.is_empty() {
                excluded.insert(d.name().to_string(), missing);
            }
        }
        let n = queries.len();
        let mean_wall_time_s = if n == 0 {
            0.0
        } else {
            queries.iter().map(|q| q.result.wall_time_s).sum::<f64>() / n as f64
        };
        BenchReport {
            matcher: cfg.matcher.clone(),
            image_side: cfg.matcher_cfg.image_side,
            max_keypoints: cfg.matcher_cfg.max_keypoints,
            mode,
            t_inl: cfg.inlier_threshold,
            total: n,
            correct,
            incorrect,
            no_prediction: count(QueryScore::NoPrediction),
            localizable_count,
            percent_of_localizable: localizable_count.and_then(|l| percent(correct, l)),
            precision: percent(correct, correct + incorrect),
            columns,
            excluded,
            mean_wall_time_s,
            queries,
        }
    }

    /// Copy with every wall-time field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.mean_wall_time_s = 0.0;
        for q in &mut r.queries {
            q.result.wall_time_s = 0.0;
            q.result.candidates.iter_mut().for_each(|c| c.wall_time_s = 0.0);
        }
        r
    }

    /// Labeled outcomes of every candidate that survived all stopping
    /// criteria; true positive = its footprint contains the centerpoint.
    pub fn outcome_rows(&self) -> Vec<OutcomeRow> {
        let mut rows = Vec::new();
        for q in &self.queries {
            for c in q.result.candidates.iter().filter(|c| c.completed()) {
                let f = c.footprint.expect("completed candidates carry a footprint");
                rows.push(OutcomeRow {
                    query_id: q.id.clone(),
                    candidate_rank: c.rank,
                    inlier_count: c.inlier_count as u64,
                    is_true_positive: footprint_contains(&f, q.centerpoint).unwrap_or(false),
                });
            }
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

const TRAILER: [&str; 2] = ["time_s", "T_inl"];

fn header(r: &BenchReport) -> Vec<String> {
    let mut h = vec!["matcher".to_string()];
    if r.columns.is_empty() {
        h.push("All".into());
        for d in Dimension::ALL {
            h.extend(d.bins().iter().map(|s| s.to_string()));
        }
    } else {
        h.extend(r.columns.iter().map(|c| c.name.clone()));
    }
    h.extend(TRAILER.iter().map(|s| s.to_string()));
    h
}

fn data_row(r: &BenchReport) -> Vec<String> {
    let mut row = vec![r.matcher.clone()];
    row.extend(
        r.columns
            .iter()
            .map(|c| c.percent.map_or("n/a".to_string(), |p| format!("{p:.1}"))),
    );
    row.push(format!("{:.2}", r.mean_wall_time_s));
    row.push(r.t_inl.map_or("-".to_string(), |t| t.to_string()));
    row
}

/// Renders a report. Column order: matcher, All, focal bins, tilt bins,
/// cloud bins, mean seconds per query, threshold. An empty run renders the
/// header only.
pub fn emit_report(r: &BenchReport, format: ReportFormat) -> String {
    let head = header(r);
    let rows: Vec<Vec<String>> = if r.total == 0 { Vec::new() } else { vec![data_row(r)] };
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serializes") + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(&head).expect("in-memory write");
            for row in &rows {
                w.write_record(row).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
        ReportFormat::Table => {
            let widths: Vec<usize> = (0..head.len())
                .map(|i| {
                    std::iter::once(&head)
                        .chain(&rows)
                        .map(|r| r[i].chars().count())
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |cells: &[String]| {
                let mut s = String::new();
                for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
                    if i > 0 {
                        s.push_str("  ");
                    }
                    if i == 0 {
                        let _ = write!(s, "{c:<w$}");
                    } else {
                        let _ = write!(s, "{c:>w$}");
                    }
                }
                s.trim_end().to_string() + "\n"
            };
            let mut out = line(&head);
            for row in &rows {
                out.push_str(&line(row));
            }
            if r.total > 0 {
                let loc = r.localizable_count.map_or("n/a".into(), |l| l.to_string());
                let _ = writeln!(
                    out,
                    "queries {}  correct {}  incorrect {}  no-prediction {}  localizable {}",
                    r.total, r.correct, r.incorrect, r.no_prediction, loc
                );
                for (dim, ids) in &r.excluded {
                    let _ = writeln!(out, "excluded from {dim}: {} queries missing the field", ids.len());
                }
            }
            out
        }
    }
}

/// Placeholder result for a query that could not be processed.
fn failed_result(q: &ManifestQuery, seed: u64, detail: String) -> LocalizationResult {
    LocalizationResult {
        query_id: q.id.clone(),
        status: Status::NoCandidateAccepted,
        footprint: None,
        inlier_count: 0,
        accepted_rank: None,
        candidates: vec![CandidateReport {
            rank: q.candidates.first().map_or(0, |c| c.rank),
            iterations_run: 0,
            inlier_count: 0,
            reject_reason: Some(RejectReason::EstimationFailure),
            footprint: None,
            homography: None,
            detail: Some(detail),
            wall_time_s: 0.0,
        }],
        seed,
        wall_time_s: 0.0,
    }
}

/// Processes one manifest query. Failures become an `EstimationFailure`
/// record instead of aborting the run.
pub fn run_query(
    matcher: &mut dyn Matcher,
    manifest: &Manifest,
    q: &ManifestQuery,
    cfg: &EngineConfig,
    mode: RunMode,
    seed: u64,
) -> QueryRecord {
    let loaded = Image::load(&manifest.resolve(&q.image_path))
        .map_err(|e| e.to_string())
        .and_then(|img| {
            let cands = q
                .candidates
                .iter()
                .map(|c| manifest.load_candidate(c))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((img, cands))
        });
    let result = match loaded {
        Err(e) => failed_result(q, seed, e),
        Ok((_, cands)) if cands.is_empty() => failed_result(q, seed, "no candidates".into()),
        Ok((image, cands)) => {
            let query = QueryImage {
                id: q.id.clone(),
                image,
                metadata: q.metadata(),
            };
            localize(matcher, &query, &cands, cfg, mode, seed).unwrap_or_else(|e| failed_result(q, seed, e.to_string()))
        }
    };
    QueryRecord::new(q, result)
}

pub type MatcherFactory<'a> = dyn Fn() -> Result<Box<dyn Matcher + Send>, MatchError> + Sync + 'a;

/// Runs every query on `workers` threads, each owning one matcher, and
/// assembles the report in manifest order.
pub fn run_benchmark(
    manifest: &Manifest,
    cfg: &EngineConfig,
    mode: RunMode,
    seed: u64,
    workers: usize,
    factory: &MatcherFactory<'_>,
) -> Result<BenchReport, BenchError> {
    if workers == 0 {
        return Err(BenchError::Config("workers must be at least 1".into()));
    }
    cfg.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<QueryRecord>>> = Mutex::new(vec![None; manifest.queries.len()]);
    let workers = workers.min(manifest.queries.len().max(1));
    std::thread::scope(|s| -> Result<(), BenchError> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| -> Result<(), BenchError> {
                    let mut matcher = factory()?;
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(q) = manifest.queries.get(i) else { break };
                        let rec = run_query(matcher.as_mut(), manifest, q, cfg, mode, seed);
                        out.lock().expect("no worker panics while holding the lock")[i] = Some(rec);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("benchmark worker panicked")?;
        }
        Ok(())
    })?;
    let records = out
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every query processed"))
        .collect();
    Ok(BenchReport::assemble(cfg, mode, records))
}
