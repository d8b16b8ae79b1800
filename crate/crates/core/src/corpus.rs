//! Patch manifest: ingestion of patch images, report texts and tumour/TIL
//! score labels, plus seeded and recorded train/test splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ScoreLabel {
    Low,
    High,
}

impl ScoreLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Self::Low),
            "high" => Some(Self::High),
            _ => None,
        }
    }

    pub fn tumour_clause(self) -> &'static str {
        match self {
            Self::Low => "Low tumour;",
            Self::High => "High tumour;",
        }
    }

    pub fn til_clause(self) -> &'static str {
        match self {
            Self::Low => "Low TIL;",
            Self::High => "High TIL;",
        }
    }
}

impl fmt::Display for ScoreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Low => "Low",
            Self::High => "High",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image patch with its caption components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    /// Relative to the manifest's directory.
    pub image_path: PathBuf,
    pub case_id: String,
    pub report_text: String,
    pub tumor_label: ScoreLabel,
    pub til_label: ScoreLabel,
    pub split: Option<Split>,
    pub caption: Option<String>,
}

/// Appends the tumour and TIL clauses to a summary.
pub fn compose_caption(summary: &str, tumor: ScoreLabel, til: ScoreLabel) -> Result<String> {
    if summary.trim().is_empty() {
        return Err(Error::InvalidArgument("caption summary is empty".into()));
    }
    Ok(format!(
        "{summary} {} {}",
        tumor.tumour_clause(),
        til.til_clause()
    ))
}

/// Inverse of [`compose_caption`].
pub fn parse_caption(caption: &str) -> Option<(&str, ScoreLabel, ScoreLabel)> {
    let mut rest = caption;
    let mut til = None;
    for label in [ScoreLabel::Low, ScoreLabel::High] {
        if let Some(r) = rest.strip_suffix(label.til_clause()) {
            til = Some(label);
            rest = r.strip_suffix(' ')?;
            break;
        }
    }
    let til = til?;
    for label in [ScoreLabel::Low, ScoreLabel::High] {
        if let Some(r) = rest.strip_suffix(label.tumour_clause()) {
            let summary = r.strip_suffix(' ')?;
            return (!summary.trim().is_empty()).then_some((summary, label, til));
        }
    }
    None
}

/// Records sorted by `patch_id`, with image paths relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<PatchRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, mut records: Vec<PatchRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        let dups: Vec<&str> = records
            .windows(2)
            .filter(|w| w[0].patch_id == w[1].patch_id)
            .map(|w| w[0].patch_id.as_str())
            .collect();
        if !dups.is_empty() {
            return Err(Error::Manifest(format!("duplicate patch_id(s): {}", dups.join(", "))));
        }
        Ok(Self {
            root: root.into(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &PatchRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Distinct case ids in sorted order.
    pub fn case_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.case_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Writes line-delimited JSON. Image paths are rebased onto the
    /// directory the manifest file lands in.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = parent_dir(path);
        fs::create_dir_all(&dir).at(&dir)?;
        let tmp = path.with_extension("jsonl.tmp");
        {
            let file = fs::File::create(&tmp).at(&tmp)?;
            let mut w = BufWriter::new(file);
            for r in &self.records {
                let mut r = r.clone();
                r.image_path = relative_path(&self.root.join(&r.image_path), &dir)?;
                serde_json::to_writer(&mut w, &r)?;
                w.write_all(b"\n").at(&tmp)?;
            }
            w.flush().at(&tmp)?;
        }
        fs::rename(&tmp, path).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).at(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.at(path)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PatchRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            records.push(rec);
        }
        Self::new(parent_dir(path), records)
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().at(path)?.join(path)
    };
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other.as_os_str()),
        }
    }
    Ok(out)
}

/// `target` expressed relative to directory `base`.
pub fn relative_path(target: &Path, base: &Path) -> Result<PathBuf> {
    let target = absolute(target)?;
    let base = absolute(base)?;
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    Ok(out)
}

/// One row of the score table: patch-level labels and the owning case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub patch_id: String,
    pub case_id: String,
    pub tumor: String,
    pub til: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub case_id: String,
    pub report_text: String,
}

/// Reads a CSV with header `case_id,report_text`.
pub fn read_reports(path: &Path) -> Result<HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<ReportRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.insert(row.case_id, row.report_text);
    }
    Ok(out)
}

/// Reads a CSV with header `patch_id,case_id,tumor,til`.
pub fn read_scores(path: &Path) -> Result<HashMap<String, ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.insert(row.patch_id.clone(), row);
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

pub fn write_reports(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans `image_dir` for PNG patches and joins each with its score row and
/// its case's report. `patch_size` is checked against every image.
pub fn build_manifest(
    image_dir: &Path,
    reports: &HashMap<String, String>,
    scores: &HashMap<String, ScoreRow>,
    manifest_dir: &Path,
    patch_size: u32,
) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_images(image_dir, &mut files)?;
    files.sort();

    let mut by_id: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in files {
        let id = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Manifest(format!("non-UTF-8 file name {}", f.display())))?
            .to_owned();
        by_id.entry(id).or_default().push(f);
    }
    let dups: Vec<String> = by_id
        .iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(k, v)| format!("{k} ({} files)", v.len()))
        .collect();
    if !dups.is_empty() {
        return Err(Error::Manifest(format!("duplicate patch_id(s): {}", dups.join(", "))));
    }

    let mut missing_score = Vec::new();
    let mut missing_report = Vec::new();
    let mut bad_label = Vec::new();
    for id in by_id.keys() {
        match scores.get(id) {
            None => missing_score.push(id.clone()),
            Some(row) => {
                if !reports.contains_key(&row.case_id) {
                    missing_report.push(id.clone());
                }
                if ScoreLabel::parse(&row.tumor).is_none() || ScoreLabel::parse(&row.til).is_none() {
                    bad_label.push(id.clone());
                }
            }
        }
    }
    let mut problems = Vec::new();
    if !missing_score.is_empty() {
        problems.push(format!("no score row for patch(es): {}", missing_score.join(", ")));
    }
    if !missing_report.is_empty() {
        problems.push(format!("no report for patch(es): {}", missing_report.join(", ")));
    }
    if !bad_label.is_empty() {
        problems.push(format!("unparseable Low/High label for patch(es): {}", bad_label.join(", ")));
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems.join("; ")));
    }

    let entries: Vec<(String, PathBuf)> = by_id
        .into_iter()
        .map(|(id, mut v)| (id, v.pop().expect("one file")))
        .collect();
    entries
        .par_iter()
        .map(|(_, path)| check_image(path, patch_size))
        .collect::<Result<Vec<()>>>()?;

    let mut records = Vec::with_capacity(entries.len());
    for (id, path) in entries {
        let score = &scores[&id];
        records.push(PatchRecord {
            image_path: relative_path(&path, manifest_dir)?,
            case_id: score.case_id.clone(),
            report_text: reports[&score.case_id].clone(),
            tumor_label: ScoreLabel::parse(&score.tumor).expect("validated"),
            til_label: ScoreLabel::parse(&score.til).expect("validated"),
            split: None,
            caption: None,
            patch_id: id,
        });
    }
    Manifest::new(manifest_dir, records)
}

fn check_image(path: &Path, patch_size: u32) -> Result<()> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if w != patch_size || h != patch_size {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected {patch_size}x{patch_size} patch, found {w}x{h}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    ByCase,
    ByPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub test_fraction: f64,
    #[serde(default)]
    pub grouping: Grouping,
}

/// Split sidecar: the spec plus the resulting group → split assignment.
/// Keys are case ids under `by_case` and patch ids under `by_patch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub test_fraction: f64,
    pub grouping: Grouping,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitFile {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec {
            seed: self.seed,
            test_fraction: self.test_fraction,
            grouping: self.grouping,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(path, bytes).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Writes the recorded assignment onto a manifest.
    pub fn apply(&self, manifest: &mut Manifest) -> Result<()> {
        for r in &mut manifest.records {
            let key = group_key(r, self.grouping);
            let split = self.assignments.get(key).ok_or_else(|| {
                Error::Manifest(format!("split sidecar has no entry for group {key}"))
            })?;
            r.split = Some(*split);
        }
        Ok(())
    }
}

fn group_key(r: &PatchRecord, grouping: Grouping) -> &str {
    match grouping {
        Grouping::ByCase => &r.case_id,
        Grouping::ByPatch => &r.patch_id,
    }
}

/// Seeded shuffle of the sorted group keys; the first
/// `round(test_fraction × groups)` groups (at least one, and leaving at least
/// one for training) become the test split.
pub fn assign_splits(manifest: &mut Manifest, spec: &SplitSpec) -> Result<SplitFile> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let groups: BTreeSet<&str> = manifest
        .records
        .iter()
        .map(|r| group_key(r, spec.grouping))
        .collect();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} group(s); need at least 2",
            groups.len()
        )));
    }
    let mut order: Vec<&str> = groups.into_iter().collect();
    let mut rng = crate::rng::stream(spec.seed, "split", 0);
    order.shuffle(&mut rng);
    let n_test = ((spec.test_fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let assignments: BTreeMap<String, Split> = order
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let s = if i < n_test { Split::Test } else { Split::Train };
            (k.to_string(), s)
        })
        .collect();
    let file = SplitFile {
        seed: spec.seed,
        test_fraction: spec.test_fraction,
        grouping: spec.grouping,
        assignments,
    };
    file.apply(manifest)?;
    Ok(file)
}
