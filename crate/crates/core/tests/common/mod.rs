#![allow(dead_code)]

use std::fmt::Write;

use idbench::embedstore::EmbeddingSet;
use idbench::manifest::{Manifest, MANIFEST_HEADER};
use idbench::rng::SeededRng;
use rand_distr::{Distribution, StandardNormal};

/// Manifest text for subjects given as (demographic, image count). Each
/// image gets its own session; with `sunglasses` every original also gets
/// a sunglasses variant.
pub fn manifest_text(subjects: &[(&str, usize)], sunglasses: bool) -> String {
    let mut s = MANIFEST_HEADER.join(",");
    s.push('\n');
    for (i, (demo, n)) in subjects.iter().enumerate() {
        for k in 0..*n {
            let id = format!("p{i:05}_{k:02}");
            writeln!(s, "{id},p{i:05},s{k:02},{},{demo},original,,,", k + 1).unwrap();
            if sunglasses {
                writeln!(s, "{id}__sg,p{i:05},s{k:02},{},{demo},sunglasses,,{id},", k + 1).unwrap();
            }
        }
    }
    s
}

pub fn manifest(subjects: &[(&str, usize)], sunglasses: bool) -> Manifest {
    Manifest::from_reader(manifest_text(subjects, sunglasses).as_bytes()).unwrap()
}

/// 575 CF and 687 CM subjects carrying 15,088 originals in total, each
/// with a sunglasses variant.
pub fn nd_shaped() -> Manifest {
    let mut subjects = Vec::new();
    let total = 575 + 687;
    // 1206 subjects with 12 images and 56 with 11 give 15,088 originals.
    for i in 0..total {
        let demo = if i < 575 { "CF" } else { "CM" };
        subjects.push((demo, if i % 22 == 0 && i / 22 < 56 { 11 } else { 12 }));
    }
    manifest(&subjects, true)
}

/// Random closed-set instance: `ids` subjects with 2..=`max_images`
/// originals each, sometimes sharing sessions, and embeddings of which
/// roughly one in eight duplicates an earlier row to force score ties.
pub fn random_instance(seed: u64, ids: usize, max_images: usize, dim: usize) -> (Manifest, EmbeddingSet) {
    let mut rng = SeededRng::new(seed);
    let mut s = MANIFEST_HEADER.join(",");
    s.push('\n');
    let mut image_ids = Vec::new();
    for i in 0..ids {
        let n = 2 + rng.below(max_images as u64 - 1) as usize;
        for k in 0..n {
            let session = if rng.below(5) == 0 && k > 0 { k - 1 } else { k };
            let id = format!("r{i:04}_{k:02}");
            writeln!(s, "{id},r{i:04},s{session:02},{},CF,original,,,", k + 1).unwrap();
            image_ids.push(id);
        }
    }
    let m = Manifest::from_reader(s.as_bytes()).unwrap();

    let mut matrix: Vec<f32> = Vec::with_capacity(image_ids.len() * dim);
    for row in 0..image_ids.len() {
        if row > 0 && rng.below(8) == 0 {
            let src = rng.below(row as u64) as usize;
            let copy = matrix[src * dim..(src + 1) * dim].to_vec();
            matrix.extend(copy);
        } else {
            let mut r = rng.as_rng();
            for _ in 0..dim {
                let v: f64 = StandardNormal.sample(&mut r);
                matrix.push(v as f32);
            }
        }
    }
    let e = EmbeddingSet::new(dim, image_ids, matrix).unwrap();
    (m, e)
}

pub mod sim {
    use idbench::embedstore::EmbeddingSet;
    use idbench::manifest::{ConditionBase, Demographic, Manifest};
    use idbench::metrics::MetricReport;
    use idbench::protocol::{apply_gallery_variants, bind_condition, build_partition, GalleryPolicy};
    use idbench::search::{rank_one, RankOneResult};
    use idbench::simulate::{generate_cohort, CohortSpec, ImagesPerIdentity};

    pub struct Cohort {
        pub seed: u64,
        pub manifest: Manifest,
        pub embeddings: EmbeddingSet,
        pub baseline: Vec<RankOneResult>,
    }

    pub fn spec(identities: usize, dim: usize, delta: f64, seed: u64) -> CohortSpec {
        let mut s = CohortSpec::new(identities, 8, dim, 1.0, delta, seed);
        s.images_per_identity = ImagesPerIdentity::Range { min: 4, max: 12 };
        s
    }

    impl Cohort {
        pub fn new(spec: &CohortSpec) -> Self {
            let (manifest, embeddings) = generate_cohort(spec).unwrap();
            let p = build_partition(&manifest, &Demographic::CF, spec.seed, None).unwrap();
            let baseline = rank_one(&embeddings, &embeddings, &p).unwrap();
            Self { seed: spec.seed, manifest, embeddings, baseline }
        }

        pub fn results(&self, c: ConditionBase, policy: GalleryPolicy) -> Vec<RankOneResult> {
            let m = &self.manifest;
            let p = build_partition(m, &Demographic::CF, self.seed, None).unwrap();
            let p = bind_condition(&p, m, c).unwrap();
            let p = apply_gallery_variants(&p, m, policy, self.seed).unwrap();
            rank_one(&self.embeddings, &self.embeddings, &p).unwrap()
        }

        pub fn report(&self, c: ConditionBase, policy: GalleryPolicy) -> MetricReport {
            MetricReport::compare(&self.baseline, &self.results(c, policy)).unwrap()
        }

        pub fn shift(&self, c: ConditionBase, policy: GalleryPolicy) -> f64 {
            self.report(c, policy).wasserstein_shift
        }
    }
}
