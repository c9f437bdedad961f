//! Dataset data model: images, identities, sessions, demographics and
//! condition variants, plus the manifest CSV reader/writer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_HEADER: [&str; 9] = [
    "image_id",
    "subject_id",
    "session_id",
    "capture_order",
    "demographic",
    "condition",
    "params",
    "variant_of",
    "source_path",
];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("duplicate image_id `{0}`")]
    DuplicateImage(String),
    #[error("dangling variant: `{image_id}` is a variant of absent `{target}`")]
    DanglingVariant { image_id: String, target: String },
    #[error("variant `{image_id}` does not match its original `{target}`: {reason}")]
    VariantMismatch {
        image_id: String,
        target: String,
        reason: String,
    },
    #[error("malformed condition params for `{image_id}`: {reason}")]
    BadParams { image_id: String, reason: String },
    #[error(
        "duplicate capture: subject `{subject}` session `{session}` order {order} condition {condition}"
    )]
    DuplicateCapture {
        subject: String,
        session: String,
        order: i64,
        condition: ConditionBase,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Demographic {
    /// Caucasian female.
    CF,
    /// Caucasian male.
    CM,
    Other(String),
}

impl Demographic {
    pub fn as_str(&self) -> &str {
        match self {
            Demographic::CF => "CF",
            Demographic::CM => "CM",
            Demographic::Other(s) => s,
        }
    }
}

impl From<&str> for Demographic {
    fn from(s: &str) -> Self {
        match s {
            "CF" => Demographic::CF,
            "CM" => Demographic::CM,
            other => Demographic::Other(other.to_string()),
        }
    }
}

impl From<String> for Demographic {
    fn from(s: String) -> Self {
        Demographic::from(s.as_str())
    }
}

impl From<Demographic> for String {
    fn from(d: Demographic) -> Self {
        d.as_str().to_string()
    }
}

impl fmt::Display for Demographic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionBase {
    Original,
    Sunglasses,
    Blur,
    Lowres,
    SunglassesBlur,
    SunglassesLowres,
}

impl ConditionBase {
    pub const ALL: [ConditionBase; 6] = [
        ConditionBase::Original,
        ConditionBase::Sunglasses,
        ConditionBase::Blur,
        ConditionBase::Lowres,
        ConditionBase::SunglassesBlur,
        ConditionBase::SunglassesLowres,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionBase::Original => "original",
            ConditionBase::Sunglasses => "sunglasses",
            ConditionBase::Blur => "blur",
            ConditionBase::Lowres => "lowres",
            ConditionBase::SunglassesBlur => "sunglasses_blur",
            ConditionBase::SunglassesLowres => "sunglasses_lowres",
        }
    }

    pub fn has_blur(self) -> bool {
        matches!(self, ConditionBase::Blur | ConditionBase::SunglassesBlur)
    }

    pub fn has_lowres(self) -> bool {
        matches!(self, ConditionBase::Lowres | ConditionBase::SunglassesLowres)
    }

    pub fn has_sunglasses(self) -> bool {
        matches!(
            self,
            ConditionBase::Sunglasses | ConditionBase::SunglassesBlur | ConditionBase::SunglassesLowres
        )
    }
}

impl fmt::Display for ConditionBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionBase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditionBase::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown condition `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTag {
    pub base: ConditionBase,
    pub params: BTreeMap<String, f64>,
    pub variant_of: Option<String>,
}

impl ConditionTag {
    pub fn original() -> Self {
        Self {
            base: ConditionBase::Original,
            params: BTreeMap::new(),
            variant_of: None,
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        self.params.get("sigma").copied()
    }

    pub fn side(&self) -> Option<u32> {
        self.params.get("side").map(|&s| s as u32)
    }

    /// Checks the per-family parameter requirements.
    pub fn validate_params(&self) -> Result<(), String> {
        if self.base.has_blur() {
            match self.sigma() {
                Some(s) if s > 0.0 && s.is_finite() => {}
                Some(s) => return Err(format!("sigma must be > 0, got {s}")),
                None => return Err(format!("{} requires `sigma`", self.base)),
            }
        }
        if self.base.has_lowres() {
            match self.params.get("side") {
                Some(&s) if s >= 1.0 && s.fract() == 0.0 && s <= u32::MAX as f64 => {}
                Some(s) => return Err(format!("side must be an integer >= 1, got {s}")),
                None => return Err(format!("{} requires `side`", self.base)),
            }
        }
        Ok(())
    }

    /// `key=value` pairs joined by `;`, keys in sorted order.
    pub fn params_string(&self) -> String {
        self.params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn parse_params(s: &str) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    if s.trim().is_empty() {
        return Ok(out);
    }
    for pair in s.split(';') {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("empty key in `{pair}`"));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format!("non-numeric value in `{pair}`"))?;
        if !v.is_finite() {
            return Err(format!("non-finite value in `{pair}`"));
        }
        if out.insert(k.to_string(), v).is_some() {
            return Err(format!("repeated key `{k}`"));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub subject_id: String,
    pub session_id: String,
    /// Larger is more recent.
    pub capture_order: i64,
    pub demographic: Demographic,
    pub condition: ConditionTag,
    pub source_path: Option<String>,
}

impl ImageRecord {
    pub fn is_original(&self) -> bool {
        self.condition.base == ConditionBase::Original
    }
}

/// A validated, immutable set of image records.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub schema_version: u32,
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
    variants: HashMap<(String, ConditionBase), usize>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.schema_version == other.schema_version && self.records == other.records
    }
}

impl Manifest {
    /// Validates every invariant and builds the lookup indices.
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, ManifestError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.image_id.clone(), i).is_some() {
                return Err(ManifestError::DuplicateImage(r.image_id.clone()));
            }
        }

        let mut captures = HashSet::with_capacity(records.len());
        let mut variants = HashMap::new();
        for r in &records {
            r.condition
                .validate_params()
                .map_err(|reason| ManifestError::BadParams {
                    image_id: r.image_id.clone(),
                    reason,
                })?;
            let key = (
                r.subject_id.as_str(),
                r.session_id.as_str(),
                r.capture_order,
                r.condition.base,
            );
            if !captures.insert(key) {
                return Err(ManifestError::DuplicateCapture {
                    subject: r.subject_id.clone(),
                    session: r.session_id.clone(),
                    order: r.capture_order,
                    condition: r.condition.base,
                });
            }

            let Some(target) = &r.condition.variant_of else {
                continue;
            };
            let mismatch = |reason: &str| ManifestError::VariantMismatch {
                image_id: r.image_id.clone(),
                target: target.clone(),
                reason: reason.to_string(),
            };
            if r.is_original() {
                return Err(mismatch("an original record cannot be a variant"));
            }
            let Some(&ti) = by_id.get(target) else {
                return Err(ManifestError::DanglingVariant {
                    image_id: r.image_id.clone(),
                    target: target.clone(),
                });
            };
            let t = &records[ti];
            if !t.is_original() {
                return Err(mismatch("target is not an original"));
            }
            if t.subject_id != r.subject_id {
                return Err(mismatch("subject differs"));
            }
            if t.session_id != r.session_id {
                return Err(mismatch("session differs"));
            }
            if t.capture_order != r.capture_order {
                return Err(mismatch("capture_order differs"));
            }
            variants.insert((target.clone(), r.condition.base), by_id[&r.image_id]);
        }

        Ok(Self {
            schema_version: SCHEMA_VERSION,
            records,
            by_id,
            variants,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.by_id.get(image_id).map(|&i| &self.records[i])
    }

    /// The original record an image derives from (itself for originals).
    pub fn origin_of<'a>(&'a self, image_id: &'a str) -> Option<&'a ImageRecord> {
        let r = self.get(image_id)?;
        match &r.condition.variant_of {
            Some(t) => self.get(t),
            None => Some(r),
        }
    }

    /// The variant of `original_id` with the given condition, if linked.
    pub fn variant(&self, original_id: &str, base: ConditionBase) -> Option<&ImageRecord> {
        if base == ConditionBase::Original {
            return self.get(original_id).filter(|r| r.is_original());
        }
        self.variants
            .get(&(original_id.to_string(), base))
            .map(|&i| &self.records[i])
    }

    pub fn variant_count(&self) -> usize {
        self.variants.len()
    }

    pub fn demographics(&self) -> Vec<Demographic> {
        let mut d: Vec<_> = self
            .records
            .iter()
            .map(|r| r.demographic.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        d.sort();
        d
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
        if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
            return Err(ManifestError::Header {
                expected: MANIFEST_HEADER.join(","),
                found: header.iter().collect::<Vec<_>>().join(","),
            });
        }

        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| csv_error(e, 0))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            records.push(parse_row(&row, line)?);
        }
        Self::new(records)
    }

    /// Canonical serialization: header, then one row per record in order.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<(), ManifestError> {
        let mut w = csv::WriterBuilder::new().from_writer(writer);
        let io = |e: csv::Error| ManifestError::Io(e.into());
        w.write_record(MANIFEST_HEADER).map_err(io)?;
        for r in &self.records {
            let order = r.capture_order.to_string();
            let params = r.condition.params_string();
            w.write_record([
                r.image_id.as_str(),
                r.subject_id.as_str(),
                r.session_id.as_str(),
                order.as_str(),
                r.demographic.as_str(),
                r.condition.base.as_str(),
                params.as_str(),
                r.condition.variant_of.as_deref().unwrap_or(""),
                r.source_path.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> ManifestError {
    let line = e
        .position()
        .map(|p| p.line())
        .unwrap_or(fallback_line);
    ManifestError::Parse {
        line,
        message: e.to_string(),
    }
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<ImageRecord, ManifestError> {
    let parse_err = |message: String| ManifestError::Parse { line, message };
    if row.len() != MANIFEST_HEADER.len() {
        return Err(parse_err(format!(
            "expected {} fields, found {}",
            MANIFEST_HEADER.len(),
            row.len()
        )));
    }
    let field = |i: usize| row.get(i).unwrap_or("");
    let non_empty = |i: usize| {
        let v = field(i);
        if v.is_empty() {
            Err(parse_err(format!("empty `{}`", MANIFEST_HEADER[i])))
        } else {
            Ok(v.to_string())
        }
    };
    let optional = |i: usize| Some(field(i).to_string()).filter(|s| !s.is_empty());

    let image_id = non_empty(0)?;
    let capture_order = field(3)
        .parse::<i64>()
        .map_err(|_| parse_err(format!("capture_order `{}` is not an integer", field(3))))?;
    let base = field(5).parse::<ConditionBase>().map_err(parse_err)?;
    let params = parse_params(field(6)).map_err(|reason| ManifestError::BadParams {
        image_id: image_id.clone(),
        reason: format!("line {line}: {reason}"),
    })?;

    Ok(ImageRecord {
        subject_id: non_empty(1)?,
        session_id: non_empty(2)?,
        capture_order,
        demographic: Demographic::from(non_empty(4)?),
        condition: ConditionTag {
            base,
            params,
            variant_of: optional(7),
        },
        source_path: optional(8),
        image_id,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let f = std::fs::File::open(path)?;
    Manifest::from_reader(std::io::BufReader::new(f))
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    let f = std::fs::File::create(path)?;
    m.to_writer(std::io::BufWriter::new(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicCounts {
    pub subjects: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub subjects: usize,
    pub images: usize,
    pub originals: usize,
    pub variants: usize,
    /// Original images per subject; variants are not counted.
    pub images_per_subject_mean: f64,
    pub per_demographic: BTreeMap<String, DemographicCounts>,
}

impl ManifestStats {
    pub fn mean_display(&self) -> String {
        format!("{:.2}", self.images_per_subject_mean)
    }
}

pub fn manifest_stats(m: &Manifest) -> ManifestStats {
    let mut subjects: BTreeMap<&str, &Demographic> = BTreeMap::new();
    let mut per_demographic: BTreeMap<String, DemographicCounts> = BTreeMap::new();
    let mut originals = 0;
    for r in m.records() {
        subjects.entry(&r.subject_id).or_insert(&r.demographic);
        per_demographic
            .entry(r.demographic.to_string())
            .or_insert(DemographicCounts { subjects: 0, images: 0 })
            .images += 1;
        if r.is_original() {
            originals += 1;
        }
    }
    for d in subjects.values() {
        per_demographic.get_mut(d.as_str()).unwrap().subjects += 1;
    }
    let mean = if subjects.is_empty() {
        0.0
    } else {
        originals as f64 / subjects.len() as f64
    };
    ManifestStats {
        subjects: subjects.len(),
        images: m.len(),
        originals,
        variants: m.len() - originals,
        images_per_subject_mean: mean,
        per_demographic,
    }
}
