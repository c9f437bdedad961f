//! Synthetic embedding cohorts for exercising the pipeline without face
//! images or models.
//!
//! Each identity has a mean direction drawn uniformly on the unit sphere.
//! Original images are `normalize(mean + noise / kappa)` where `noise` has
//! unit expected norm. A degraded variant of image `v` under condition `c`
//! is
//!
//! ```text
//! normalize((1 - delta_c) * v + delta_c * (u_c + w * a_{c,id} + noise / kappa))
//! ```
//!
//! where `u_c` is a unit direction shared by every identity and `a_{c,id}` a
//! unit direction fixed per identity and condition: the part of an occluded
//! face that still looks like its owner. Combined conditions apply the
//! sunglasses variant first and then the blur or low-resolution step.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{EmbedError, EmbeddingSet};
use crate::manifest::{ConditionBase, ConditionTag, Demographic, ImageRecord, Manifest, ManifestError};
use crate::rng::{derive_seed, SeededRng};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagesPerIdentity {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl ImagesPerIdentity {
    fn bounds(self) -> (usize, usize) {
        match self {
            ImagesPerIdentity::Fixed(n) => (n, n),
            ImagesPerIdentity::Range { min, max } => (min, max),
        }
    }
}

fn default_identity_weight() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    4.6
}

fn default_side() -> u32 {
    37
}

fn default_conditions() -> Vec<ConditionBase> {
    ConditionBase::ALL[1..].to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub identities: usize,
    pub images_per_identity: ImagesPerIdentity,
    pub dim: usize,
    /// Larger values give tighter identity clusters; infinity disables
    /// jitter entirely.
    pub intra_class_concentration: f64,
    /// Mixing weight of the sunglasses occlusion.
    pub degradation_shift: f64,
    /// Mixing weight of blur; defaults to `degradation_shift`.
    #[serde(default)]
    pub blur_shift: Option<f64>,
    /// Mixing weight of resolution loss; defaults to `degradation_shift`.
    #[serde(default)]
    pub lowres_shift: Option<f64>,
    /// Weight of the identity-specific part of an occluded appearance.
    #[serde(default = "default_identity_weight")]
    pub occluded_identity_weight: f64,
    pub seed: u64,
    /// Identities per demographic label; defaults to all `CF`.
    #[serde(default)]
    pub demographic_split: BTreeMap<String, usize>,
    /// Variant conditions to emit for every original image.
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ConditionBase>,
    /// Recorded as the `sigma` param of blur-family variants.
    #[serde(default = "default_sigma")]
    pub blur_sigma: f64,
    /// Recorded as the `side` param of lowres-family variants.
    #[serde(default = "default_side")]
    pub lowres_side: u32,
}

impl CohortSpec {
    pub fn new(identities: usize, images: usize, dim: usize, kappa: f64, delta: f64, seed: u64) -> Self {
        Self {
            identities,
            images_per_identity: ImagesPerIdentity::Fixed(images),
            dim,
            intra_class_concentration: kappa,
            degradation_shift: delta,
            blur_shift: None,
            lowres_shift: None,
            occluded_identity_weight: default_identity_weight(),
            seed,
            demographic_split: BTreeMap::new(),
            conditions: default_conditions(),
            blur_sigma: default_sigma(),
            lowres_side: default_side(),
        }
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.identities < 2 {
            return bad(format!("identities must be >= 2, got {}", self.identities));
        }
        if self.dim < 8 {
            return bad(format!("dim must be >= 8, got {}", self.dim));
        }
        let (lo, hi) = self.images_per_identity.bounds();
        if lo < 2 || lo > hi {
            return bad(format!("images_per_identity must satisfy 2 <= min <= max, got {lo}..{hi}"));
        }
        if !(self.intra_class_concentration > 0.0) {
            return bad("intra_class_concentration must be > 0".into());
        }
        for (name, d) in [
            ("degradation_shift", Some(self.degradation_shift)),
            ("blur_shift", self.blur_shift),
            ("lowres_shift", self.lowres_shift),
        ] {
            if let Some(d) = d {
                if !(0.0..=1.0).contains(&d) {
                    return bad(format!("{name} must be in [0, 1], got {d}"));
                }
            }
        }
        if !(self.occluded_identity_weight >= 0.0) || !self.occluded_identity_weight.is_finite() {
            return bad("occluded_identity_weight must be finite and >= 0".into());
        }
        if !self.demographic_split.is_empty() {
            let total: usize = self.demographic_split.values().sum();
            if total != self.identities {
                return bad(format!(
                    "demographic_split sums to {total}, expected {}",
                    self.identities
                ));
            }
        }
        if self.conditions.contains(&ConditionBase::Original) {
            return bad("`original` is not a variant condition".into());
        }
        if !(self.blur_sigma > 0.0) || self.lowres_side == 0 {
            return bad("blur_sigma must be > 0 and lowres_side >= 1".into());
        }
        Ok(())
    }

    fn shift(&self, c: ConditionBase) -> f64 {
        match c {
            ConditionBase::Sunglasses => self.degradation_shift,
            ConditionBase::Blur => self.blur_shift.unwrap_or(self.degradation_shift),
            ConditionBase::Lowres => self.lowres_shift.unwrap_or(self.degradation_shift),
            _ => unreachable!("composite or original condition"),
        }
    }

    fn jitter_scale(&self) -> f64 {
        if self.intra_class_concentration.is_infinite() {
            0.0
        } else {
            1.0 / (self.intra_class_concentration * (self.dim as f64).sqrt())
        }
    }

    fn demographics(&self) -> Vec<Demographic> {
        if self.demographic_split.is_empty() {
            return vec![Demographic::CF; self.identities];
        }
        self.demographic_split
            .iter()
            .flat_map(|(label, &n)| std::iter::repeat_n(Demographic::from(label.as_str()), n))
            .collect()
    }
}

fn condition_stream(c: ConditionBase) -> u64 {
    ConditionBase::ALL.iter().position(|&x| x == c).unwrap() as u64
}

fn gaussian(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng.as_rng())).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn unit_direction(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    normalized(gaussian(rng, dim))
}

/// Shared occlusion direction for a primitive condition.
fn shared_direction(seed: u64, c: ConditionBase, dim: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(derive_seed(derive_seed(seed, u64::MAX), condition_stream(c)));
    unit_direction(&mut rng, dim)
}

struct Occlusion<'a> {
    delta: f64,
    shared: &'a [f64],
    identity: &'a [f64],
    identity_weight: f64,
    jitter: f64,
}

impl Occlusion<'_> {
    fn apply(&self, v: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        if self.delta == 0.0 {
            return v.to_vec();
        }
        let noise = gaussian(rng, v.len());
        let mixed = (0..v.len())
            .map(|k| {
                let occluder =
                    self.shared[k] + self.identity_weight * self.identity[k] + self.jitter * noise[k];
                (1.0 - self.delta) * v[k] + self.delta * occluder
            })
            .collect();
        normalized(mixed)
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

struct IdentityOut {
    records: Vec<ImageRecord>,
    rows: Vec<(String, Vec<f32>)>,
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<(Manifest, EmbeddingSet), SimulateError> {
    spec.validate()?;
    let dim = spec.dim;
    let primitives = [ConditionBase::Sunglasses, ConditionBase::Blur, ConditionBase::Lowres];
    let shared: BTreeMap<ConditionBase, Vec<f64>> = primitives
        .iter()
        .map(|&c| (c, shared_direction(spec.seed, c, dim)))
        .collect();
    let demographics = spec.demographics();
    let (lo, hi) = spec.images_per_identity.bounds();
    let jitter = spec.jitter_scale();

    let per_identity: Vec<IdentityOut> = (0..spec.identities)
        .into_par_iter()
        .map(|i| {
            let id_seed = derive_seed(spec.seed, i as u64);
            let mut rng = SeededRng::new(id_seed);
            let mean = unit_direction(&mut rng, dim);
            let count = lo + rng.below((hi - lo + 1) as u64) as usize;
            let appearance: BTreeMap<ConditionBase, Vec<f64>> = primitives
                .iter()
                .map(|&c| (c, unit_direction(&mut rng, dim)))
                .collect();
            let occlusion = |c: ConditionBase| Occlusion {
                delta: spec.shift(c),
                shared: &shared[&c],
                identity: &appearance[&c],
                identity_weight: spec.occluded_identity_weight,
                jitter,
            };

            let subject = format!("id{i:05}");
            let mut out = IdentityOut {
                records: Vec::new(),
                rows: Vec::new(),
            };
            for k in 0..count {
                let img_seed = derive_seed(id_seed, k as u64);
                let mut img_rng = SeededRng::new(img_seed);
                let noise = gaussian(&mut img_rng, dim);
                let v = normalized((0..dim).map(|d| mean[d] + jitter * noise[d]).collect());

                let image_id = format!("{subject}_{k:02}");
                let original = ImageRecord {
                    image_id: image_id.clone(),
                    subject_id: subject.clone(),
                    session_id: format!("s{k:02}"),
                    capture_order: k as i64 + 1,
                    demographic: demographics[i].clone(),
                    condition: ConditionTag::original(),
                    source_path: None,
                };

                let stream = |c: ConditionBase, step: u64| {
                    SeededRng::new(derive_seed(img_seed, 16 * (condition_stream(c) + 1) + step))
                };
                let sunglasses = occlusion(ConditionBase::Sunglasses)
                    .apply(&v, &mut stream(ConditionBase::Sunglasses, 0));
                let mut variants = Vec::with_capacity(spec.conditions.len());
                for &c in &spec.conditions {
                    let vec = match c {
                        ConditionBase::Sunglasses => sunglasses.clone(),
                        ConditionBase::Blur | ConditionBase::Lowres => {
                            occlusion(c).apply(&v, &mut stream(c, 0))
                        }
                        ConditionBase::SunglassesBlur => occlusion(ConditionBase::Blur)
                            .apply(&sunglasses, &mut stream(c, 1)),
                        ConditionBase::SunglassesLowres => occlusion(ConditionBase::Lowres)
                            .apply(&sunglasses, &mut stream(c, 1)),
                        ConditionBase::Original => unreachable!("rejected by validate"),
                    };
                    let mut params = BTreeMap::new();
                    if c.has_blur() {
                        params.insert("sigma".to_string(), spec.blur_sigma);
                    }
                    if c.has_lowres() {
                        params.insert("side".to_string(), spec.lowres_side as f64);
                    }
                    let record = ImageRecord {
                        image_id: format!("{image_id}__{c}"),
                        condition: ConditionTag {
                            base: c,
                            params,
                            variant_of: Some(image_id.clone()),
                        },
                        ..original.clone()
                    };
                    variants.push((record, vec));
                }
                out.rows.push((image_id, to_f32(&v)));
                out.records.push(original);
                for (record, vec) in variants {
                    out.rows.push((record.image_id.clone(), to_f32(&vec)));
                    out.records.push(record);
                }
            }
            out
        })
        .collect();

    let mut records = Vec::new();
    let mut ids = Vec::new();
    let mut matrix = Vec::new();
    for part in per_identity {
        records.extend(part.records);
        for (id, row) in part.rows {
            ids.push(id);
            matrix.extend(row);
        }
    }
    let manifest = Manifest::new(records)?;
    let embeddings = EmbeddingSet::new(dim, ids, matrix)?;
    Ok((manifest, embeddings))
}
