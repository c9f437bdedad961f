//! Closed-set probe/gallery partitioning.
//!
//! Each subject contributes its most recent original capture as the probe
//! and its older originals from other sessions as enrolled gallery images.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{ConditionBase, Demographic, ImageRecord, Manifest};
use crate::rng::SeededRng;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("demographic `{0}` absent from manifest")]
    DemographicAbsent(Demographic),
    #[error("balance_to {requested} exceeds {available} eligible identities")]
    BalanceTooLarge { requested: usize, available: usize },
    #[error("probes lacking a `{condition}` variant for subjects: {}", subjects.join(", "))]
    MissingProbeVariant {
        condition: ConditionBase,
        subjects: Vec<String>,
    },
    #[error("gallery images lacking a sunglasses variant: {}", images.join(", "))]
    MissingGalleryVariant { images: Vec<String> },
    #[error("unknown image `{0}` in partition")]
    UnknownImage(String),
    #[error("partition invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryPolicy {
    None,
    OnePerIdentity,
    All,
}

impl GalleryPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            GalleryPolicy::None => "none",
            GalleryPolicy::OnePerIdentity => "one_per_identity",
            GalleryPolicy::All => "all",
        }
    }
}

impl fmt::Display for GalleryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GalleryPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GalleryPolicy::None),
            "one_per_identity" => Ok(GalleryPolicy::OnePerIdentity),
            "all" => Ok(GalleryPolicy::All),
            _ => Err(format!("unknown gallery policy `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub subject_id: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceSpec {
    pub demographic: Demographic,
    pub target_identity_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// One entry per subject, sorted by subject id.
    pub probes: Vec<Entry>,
    /// Sorted by (subject id, original image id).
    pub gallery: Vec<Entry>,
    pub seed: u64,
    pub balance_spec: Option<BalanceSpec>,
    pub condition_binding: ConditionBase,
    pub gallery_variant_policy: GalleryPolicy,
    /// Subjects dropped because same-session exclusion left them no gallery.
    pub excluded_subjects: Vec<String>,
}

impl Partition {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }

    pub fn subject_count(&self) -> usize {
        self.probes.len()
    }

    /// Checks probe/gallery disjointness, same-session exclusion and one
    /// probe per subject against the manifest.
    pub fn validate(&self, m: &Manifest) -> Result<(), ProtocolError> {
        let lookup = |id: &str| m.get(id).ok_or_else(|| ProtocolError::UnknownImage(id.to_string()));
        let mut probe_sessions: HashMap<&str, &str> = HashMap::new();
        for p in &self.probes {
            let r = lookup(&p.image_id)?;
            if r.subject_id != p.subject_id {
                return Err(ProtocolError::Invariant(format!(
                    "probe `{}` belongs to `{}` not `{}`",
                    p.image_id, r.subject_id, p.subject_id
                )));
            }
            if probe_sessions.insert(&p.subject_id, &r.session_id).is_some() {
                return Err(ProtocolError::Invariant(format!(
                    "subject `{}` has more than one probe",
                    p.subject_id
                )));
            }
        }
        let probe_ids: HashSet<&str> = self.probes.iter().map(|p| p.image_id.as_str()).collect();
        for g in &self.gallery {
            let r = lookup(&g.image_id)?;
            if probe_ids.contains(g.image_id.as_str()) {
                return Err(ProtocolError::Invariant(format!(
                    "`{}` is both probe and gallery",
                    g.image_id
                )));
            }
            if r.subject_id != g.subject_id {
                return Err(ProtocolError::Invariant(format!(
                    "gallery `{}` belongs to `{}` not `{}`",
                    g.image_id, r.subject_id, g.subject_id
                )));
            }
            if probe_sessions.get(g.subject_id.as_str()) == Some(&r.session_id.as_str()) {
                return Err(ProtocolError::Invariant(format!(
                    "gallery `{}` shares its subject's probe session",
                    g.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Probe selection key: greatest (capture_order, session_id, image_id).
fn probe_key(r: &ImageRecord) -> (i64, &str, &str) {
    (r.capture_order, r.session_id.as_str(), r.image_id.as_str())
}

pub fn build_partition(
    m: &Manifest,
    demographic: &Demographic,
    seed: u64,
    balance_to: Option<usize>,
) -> Result<Partition, ProtocolError> {
    let mut subjects: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in m.records() {
        if &r.demographic == demographic && r.is_original() {
            subjects.entry(&r.subject_id).or_default().push(r);
        }
    }
    if subjects.is_empty() {
        return Err(ProtocolError::DemographicAbsent(demographic.clone()));
    }

    let mut eligible: Vec<(Entry, Vec<Entry>)> = Vec::with_capacity(subjects.len());
    let mut excluded_subjects = Vec::new();
    for (subject, records) in subjects {
        let probe = *records.iter().max_by(|a, b| probe_key(a).cmp(&probe_key(b))).unwrap();
        let mut gallery: Vec<Entry> = records
            .iter()
            .filter(|r| r.image_id != probe.image_id && r.session_id != probe.session_id)
            .map(|r| Entry {
                subject_id: subject.to_string(),
                image_id: r.image_id.clone(),
            })
            .collect();
        if gallery.is_empty() {
            excluded_subjects.push(subject.to_string());
            continue;
        }
        gallery.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let probe = Entry {
            subject_id: subject.to_string(),
            image_id: probe.image_id.clone(),
        };
        eligible.push((probe, gallery));
    }

    let balance_spec = match balance_to {
        Some(target) => {
            if target > eligible.len() {
                return Err(ProtocolError::BalanceTooLarge {
                    requested: target,
                    available: eligible.len(),
                });
            }
            let mut picked = SeededRng::new(seed).sample_indices(eligible.len(), target);
            picked.sort_unstable();
            let mut keep = vec![false; eligible.len()];
            for i in picked {
                keep[i] = true;
            }
            let mut flags = keep.into_iter();
            eligible.retain(|_| flags.next().unwrap());
            Some(BalanceSpec {
                demographic: demographic.clone(),
                target_identity_count: target,
            })
        }
        None => None,
    };

    let mut probes = Vec::with_capacity(eligible.len());
    let mut gallery = Vec::new();
    for (p, g) in eligible {
        probes.push(p);
        gallery.extend(g);
    }
    Ok(Partition {
        probes,
        gallery,
        seed,
        balance_spec,
        condition_binding: ConditionBase::Original,
        gallery_variant_policy: GalleryPolicy::None,
        excluded_subjects,
    })
}

/// Swaps every probe for its variant under `base`, keeping the gallery.
pub fn bind_condition(
    p: &Partition,
    m: &Manifest,
    base: ConditionBase,
) -> Result<Partition, ProtocolError> {
    let mut out = p.clone();
    let mut missing = Vec::new();
    for probe in &mut out.probes {
        let origin = m
            .origin_of(&probe.image_id)
            .ok_or_else(|| ProtocolError::UnknownImage(probe.image_id.clone()))?;
        match m.variant(&origin.image_id, base) {
            Some(v) => probe.image_id = v.image_id.clone(),
            None => missing.push(probe.subject_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(ProtocolError::MissingProbeVariant {
            condition: base,
            subjects: missing,
        });
    }
    out.condition_binding = base;
    Ok(out)
}

/// Substitutes sunglasses variants into the gallery according to `policy`.
///
/// `OnePerIdentity` walks subjects in sorted order and picks one gallery
/// image per subject uniformly with a generator seeded by `seed`.
pub fn apply_gallery_variants(
    p: &Partition,
    m: &Manifest,
    policy: GalleryPolicy,
    seed: u64,
) -> Result<Partition, ProtocolError> {
    let mut out = p.clone();
    out.gallery_variant_policy = policy;

    let selected: Vec<usize> = match policy {
        GalleryPolicy::None => Vec::new(),
        GalleryPolicy::All => (0..out.gallery.len()).collect(),
        GalleryPolicy::OnePerIdentity => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, g) in out.gallery.iter().enumerate() {
                by_subject.entry(&g.subject_id).or_default().push(i);
            }
            let mut rng = SeededRng::new(seed);
            by_subject
                .values()
                .map(|idx| idx[rng.below(idx.len() as u64) as usize])
                .collect()
        }
    };

    let mut missing = Vec::new();
    let mut replacements = Vec::with_capacity(selected.len());
    for i in selected {
        let id = &out.gallery[i].image_id;
        let origin = m
            .origin_of(id)
            .ok_or_else(|| ProtocolError::UnknownImage(id.clone()))?;
        match m.variant(&origin.image_id, ConditionBase::Sunglasses) {
            Some(v) => replacements.push((i, v.image_id.clone())),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(ProtocolError::MissingGalleryVariant { images: missing });
    }
    for (i, id) in replacements {
        out.gallery[i].image_id = id;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "image_id,subject_id,session_id,capture_order,demographic,condition,params,variant_of,source_path\n";

    fn manifest(body: &str) -> Manifest {
        Manifest::from_reader(format!("{HEADER}{body}").as_bytes()).unwrap()
    }

    #[test]
    fn most_recent_is_probe() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\na3,a,s3,3,CF,original,,,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert_eq!(p.probes[0].image_id, "a3");
        let g: Vec<_> = p.gallery.iter().map(|e| e.image_id.as_str()).collect();
        assert_eq!(g, ["a1", "a2"]);
        p.validate(&m).unwrap();
    }

    #[test]
    fn same_session_only_gallery_excludes_subject() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n\
             b1,b,s9,1,CF,original,,,\nb2,b,s9,2,CF,original,,,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert_eq!(p.excluded_subjects, ["b"]);
        assert_eq!(p.probes.len(), 1);
        assert!(p.gallery.iter().all(|g| g.subject_id == "a"));
    }

    #[test]
    fn same_session_images_dropped_from_gallery() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\na3,a,s2,3,CF,original,,,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert_eq!(p.probes[0].image_id, "a3");
        assert_eq!(p.gallery.len(), 1);
        assert_eq!(p.gallery[0].image_id, "a1");
    }

    #[test]
    fn capture_order_tie_breaks_on_session_then_id() {
        let m = manifest("a1,a,s1,5,CF,original,,,\na2,a,s2,5,CF,original,,,\n");
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert_eq!(p.probes[0].image_id, "a2");
    }

    #[test]
    fn demographic_absent() {
        let m = manifest("a1,a,s1,1,CF,original,,,\n");
        assert!(matches!(
            build_partition(&m, &Demographic::CM, 0, None),
            Err(ProtocolError::DemographicAbsent(_))
        ));
    }

    #[test]
    fn balance_too_large() {
        let m = manifest("a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n");
        assert!(matches!(
            build_partition(&m, &Demographic::CF, 0, Some(2)),
            Err(ProtocolError::BalanceTooLarge { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn bind_original_is_identity_and_missing_variant_named() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n\
             a2b,a,s2,2,CF,sunglasses_blur,sigma=4.6,a2,\n\
             b1,b,s1,1,CF,original,,,\nb2,b,s2,2,CF,original,,,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert_eq!(bind_condition(&p, &m, ConditionBase::Original).unwrap(), p);
        match bind_condition(&p, &m, ConditionBase::SunglassesBlur) {
            Err(ProtocolError::MissingProbeVariant { subjects, .. }) => assert_eq!(subjects, ["b"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rebinding_goes_through_the_original() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n\
             a2s,a,s2,2,CF,sunglasses,,a2,\na2l,a,s2,2,CF,lowres,side=37,a2,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        let s = bind_condition(&p, &m, ConditionBase::Sunglasses).unwrap();
        assert_eq!(s.probes[0].image_id, "a2s");
        let l = bind_condition(&s, &m, ConditionBase::Lowres).unwrap();
        assert_eq!(l.probes[0].image_id, "a2l");
        assert_eq!(l.gallery, p.gallery);
        l.validate(&m).unwrap();
    }

    #[test]
    fn one_per_identity_single_image_is_replaced() {
        let m = manifest(
            "a1,a,s1,1,CF,original,,,\na1s,a,s1,1,CF,sunglasses,,a1,\na2,a,s2,2,CF,original,,,\n",
        );
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        let q = apply_gallery_variants(&p, &m, GalleryPolicy::OnePerIdentity, 9).unwrap();
        assert_eq!(q.gallery[0].image_id, "a1s");
        assert_eq!(q.gallery_variant_policy, GalleryPolicy::OnePerIdentity);
    }

    #[test]
    fn gallery_variant_missing() {
        let m = manifest("a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n");
        let p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        assert!(matches!(
            apply_gallery_variants(&p, &m, GalleryPolicy::All, 0),
            Err(ProtocolError::MissingGalleryVariant { .. })
        ));
        assert_eq!(apply_gallery_variants(&p, &m, GalleryPolicy::None, 0).unwrap().gallery, p.gallery);
    }

    #[test]
    fn validate_catches_overlap() {
        let m = manifest("a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n");
        let mut p = build_partition(&m, &Demographic::CF, 0, None).unwrap();
        p.gallery.push(p.probes[0].clone());
        assert!(matches!(p.validate(&m), Err(ProtocolError::Invariant(_))));
    }

    #[test]
    fn json_roundtrip() {
        let m = manifest("a1,a,s1,1,CF,original,,,\na2,a,s2,2,CF,original,,,\n");
        let p = build_partition(&m, &Demographic::CF, 42, Some(1)).unwrap();
        let back: Partition = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(back, p);
    }
}
