//! Exhaustive rank-one search over an enrolled gallery.
//!
//! For every probe the best mated score (same subject) and best non-mated
//! score (any other subject) are taken over the full gallery. Equal scores
//! resolve to the lexicographically smallest gallery image id. Scores are
//! the f32 values produced by [`crate::embedstore::cosine`] and are
//! compared as stored.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{cosine, dot_unchecked, EmbeddingSet};
use crate::protocol::Partition;

const PROBE_BLOCK: usize = 8;
const GALLERY_BLOCK: usize = 256;

pub const RESULTS_HEADER: [&str; 9] = [
    "probe_id",
    "subject_id",
    "mated_score",
    "mated_id",
    "nonmated_score",
    "nonmated_id",
    "nonmated_subject",
    "diff",
    "is_fpi",
];

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no embedding for image `{0}`")]
    MissingEmbedding(String),
    #[error("probe subject `{0}` has no gallery images")]
    SubjectAbsent(String),
    #[error("no non-mated candidates for probe `{0}`")]
    NoNonMated(String),
    #[error("probe dim {probe} != gallery dim {gallery}")]
    DimMismatch { probe: usize, gallery: usize },
    #[error("results io: {0}")]
    Io(#[from] std::io::Error),
    #[error("results line {line}: {message}")]
    Parse { line: u64, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOneResult {
    pub probe_id: String,
    pub subject_id: String,
    pub mated_score: f32,
    pub mated_gallery_id: String,
    pub nonmated_score: f32,
    pub nonmated_gallery_id: String,
    pub nonmated_subject_id: String,
    /// `mated_score - nonmated_score` in f32.
    pub diff: f32,
    /// Non-mated strictly beats mated.
    pub is_fpi: bool,
}

impl RankOneResult {
    fn from_parts(
        probe_id: &str,
        subject_id: &str,
        mated: (f32, &str),
        nonmated: (f32, &str, &str),
    ) -> Self {
        Self {
            probe_id: probe_id.to_string(),
            subject_id: subject_id.to_string(),
            mated_score: mated.0,
            mated_gallery_id: mated.1.to_string(),
            nonmated_score: nonmated.0,
            nonmated_gallery_id: nonmated.1.to_string(),
            nonmated_subject_id: nonmated.2.to_string(),
            diff: mated.0 - nonmated.0,
            is_fpi: nonmated.0 > mated.0,
        }
    }
}

/// True when candidate (score, id) outranks the incumbent.
#[inline]
fn beats(score: f32, id: &str, best_score: f32, best_id: &str) -> bool {
    score > best_score || (score == best_score && id < best_id)
}

struct Gallery<'a> {
    dim: usize,
    rows: Vec<f32>,
    ids: Vec<&'a str>,
    subjects: Vec<u32>,
    subject_names: Vec<&'a str>,
    subject_index: HashMap<&'a str, u32>,
}

fn pack_gallery<'a>(set: &EmbeddingSet, p: &'a Partition) -> Result<Gallery<'a>, SearchError> {
    let dim = set.dim();
    let mut rows = Vec::with_capacity(p.gallery.len() * dim);
    let mut ids = Vec::with_capacity(p.gallery.len());
    let mut subjects = Vec::with_capacity(p.gallery.len());
    let mut subject_names = Vec::new();
    let mut subject_index = HashMap::new();
    for g in &p.gallery {
        let row = set
            .row(&g.image_id)
            .ok_or_else(|| SearchError::MissingEmbedding(g.image_id.clone()))?;
        rows.extend_from_slice(row);
        ids.push(g.image_id.as_str());
        let next = subject_names.len() as u32;
        let s = *subject_index.entry(g.subject_id.as_str()).or_insert_with(|| {
            subject_names.push(g.subject_id.as_str());
            next
        });
        subjects.push(s);
    }
    Ok(Gallery {
        dim,
        rows,
        ids,
        subjects,
        subject_names,
        subject_index,
    })
}

#[derive(Clone, Copy)]
struct Best {
    score: f32,
    row: usize,
}

struct ProbeState<'a> {
    probe_id: &'a str,
    subject_id: &'a str,
    subject: u32,
    row: &'a [f32],
    mated: Option<Best>,
    nonmated: Option<Best>,
}

/// Blocked, parallel rank-one search.
pub fn rank_one(
    probes: &EmbeddingSet,
    gallery: &EmbeddingSet,
    p: &Partition,
) -> Result<Vec<RankOneResult>, SearchError> {
    if probes.dim() != gallery.dim() {
        return Err(SearchError::DimMismatch {
            probe: probes.dim(),
            gallery: gallery.dim(),
        });
    }
    let g = pack_gallery(gallery, p)?;

    let mut states = Vec::with_capacity(p.probes.len());
    for e in &p.probes {
        let row = probes
            .row(&e.image_id)
            .ok_or_else(|| SearchError::MissingEmbedding(e.image_id.clone()))?;
        let subject = *g
            .subject_index
            .get(e.subject_id.as_str())
            .ok_or_else(|| SearchError::SubjectAbsent(e.subject_id.clone()))?;
        states.push(ProbeState {
            probe_id: &e.image_id,
            subject_id: &e.subject_id,
            subject,
            row,
            mated: None,
            nonmated: None,
        });
    }

    states
        .par_chunks_mut(PROBE_BLOCK)
        .for_each(|chunk| scan_block(&g, chunk));

    let mut out = states
        .into_iter()
        .map(|s| {
            let m = s.mated.expect("probe subject present in gallery");
            let n = s
                .nonmated
                .ok_or_else(|| SearchError::NoNonMated(s.probe_id.to_string()))?;
            Ok(RankOneResult::from_parts(
                s.probe_id,
                s.subject_id,
                (m.score, g.ids[m.row]),
                (n.score, g.ids[n.row], g.subject_names[g.subjects[n.row] as usize]),
            ))
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    out.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(out)
}

fn scan_block(g: &Gallery<'_>, chunk: &mut [ProbeState<'_>]) {
    let n = g.ids.len();
    for start in (0..n).step_by(GALLERY_BLOCK) {
        let end = (start + GALLERY_BLOCK).min(n);
        for st in chunk.iter_mut() {
            for j in start..end {
                let row = &g.rows[j * g.dim..(j + 1) * g.dim];
                let score = dot_unchecked(st.row, row);
                let slot = if g.subjects[j] == st.subject {
                    &mut st.mated
                } else {
                    &mut st.nonmated
                };
                match slot {
                    Some(b) if !beats(score, g.ids[j], b.score, g.ids[b.row]) => {}
                    _ => *slot = Some(Best { score, row: j }),
                }
            }
        }
    }
}

/// Reference implementation: score every (probe, gallery) pair with
/// [`cosine`], collect candidates, take maxima. Used to check [`rank_one`].
pub fn rank_one_oracle(
    probes: &EmbeddingSet,
    gallery: &EmbeddingSet,
    p: &Partition,
) -> Result<Vec<RankOneResult>, SearchError> {
    if probes.dim() != gallery.dim() {
        return Err(SearchError::DimMismatch {
            probe: probes.dim(),
            gallery: gallery.dim(),
        });
    }
    let mut out = Vec::with_capacity(p.probes.len());
    for probe in &p.probes {
        let q = probes
            .row(&probe.image_id)
            .ok_or_else(|| SearchError::MissingEmbedding(probe.image_id.clone()))?;
        let mut mated: Vec<(f32, &str)> = Vec::new();
        let mut nonmated: Vec<(f32, &str, &str)> = Vec::new();
        for entry in &p.gallery {
            let r = gallery
                .row(&entry.image_id)
                .ok_or_else(|| SearchError::MissingEmbedding(entry.image_id.clone()))?;
            let score = cosine(q, r).map_err(|_| SearchError::DimMismatch {
                probe: q.len(),
                gallery: r.len(),
            })?;
            if entry.subject_id == probe.subject_id {
                mated.push((score, &entry.image_id));
            } else {
                nonmated.push((score, &entry.image_id, &entry.subject_id));
            }
        }
        let order = |a: (f32, &str), b: (f32, &str)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.1.cmp(a.1))
        };
        let m = mated
            .into_iter()
            .max_by(|a, b| order(*a, *b))
            .ok_or_else(|| SearchError::SubjectAbsent(probe.subject_id.clone()))?;
        let n = nonmated
            .into_iter()
            .max_by(|a, b| order((a.0, a.1), (b.0, b.1)))
            .ok_or_else(|| SearchError::NoNonMated(probe.image_id.clone()))?;
        out.push(RankOneResult::from_parts(&probe.image_id, &probe.subject_id, m, n));
    }
    out.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(out)
}

pub fn write_results<W: Write>(results: &[RankOneResult], writer: W) -> Result<(), SearchError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| SearchError::Io(e.into());
    w.write_record(RESULTS_HEADER).map_err(io)?;
    for r in results {
        w.write_record([
            r.probe_id.clone(),
            r.subject_id.clone(),
            format!("{:.6}", r.mated_score),
            r.mated_gallery_id.clone(),
            format!("{:.6}", r.nonmated_score),
            r.nonmated_gallery_id.clone(),
            r.nonmated_subject_id.clone(),
            format!("{:.6}", r.diff),
            r.is_fpi.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<RankOneResult>, SearchError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| SearchError::Parse { line: 1, message: e.to_string() })?;
    if header.iter().ne(RESULTS_HEADER.iter().copied()) {
        return Err(SearchError::Parse {
            line: 1,
            message: format!("expected header `{}`", RESULTS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| SearchError::Parse { line: 0, message: e.to_string() })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| SearchError::Parse { line, message };
        if row.len() != RESULTS_HEADER.len() {
            return Err(err(format!("expected {} fields", RESULTS_HEADER.len())));
        }
        let num = |i: usize| {
            row[i]
                .parse::<f32>()
                .map_err(|_| err(format!("bad number `{}` in {}", &row[i], RESULTS_HEADER[i])))
        };
        out.push(RankOneResult {
            probe_id: row[0].to_string(),
            subject_id: row[1].to_string(),
            mated_score: num(2)?,
            mated_gallery_id: row[3].to_string(),
            nonmated_score: num(4)?,
            nonmated_gallery_id: row[5].to_string(),
            nonmated_subject_id: row[6].to_string(),
            diff: num(7)?,
            is_fpi: row[8]
                .parse()
                .map_err(|_| err(format!("bad boolean `{}`", &row[8])))?,
        });
    }
    Ok(out)
}

pub fn save_results(results: &[RankOneResult], path: impl AsRef<Path>) -> Result<(), SearchError> {
    write_results(results, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RankOneResult>, SearchError> {
    read_results(std::io::BufReader::new(std::fs::File::open(path)?))
}
