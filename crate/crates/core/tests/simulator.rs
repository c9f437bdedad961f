mod common;

use common::sim::{spec, Cohort};
use idbench::manifest::{ConditionBase, Demographic};
use idbench::metrics::fpir;
use idbench::protocol::{build_partition, GalleryPolicy};
use idbench::search::rank_one;
use idbench::simulate::{generate_cohort, CohortSpec};

#[test]
fn no_jitter_no_shift_is_perfect() {
    let s = CohortSpec::new(20, 4, 16, f64::INFINITY, 0.0, 8);
    let (m, e) = generate_cohort(&s).unwrap();
    let p = build_partition(&m, &Demographic::CF, 8, None).unwrap();
    let r = rank_one(&e, &e, &p).unwrap();
    let worst = r.iter().map(|x| (x.mated_score - 1.0).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-6);
    assert_eq!(fpir(&r).false_positives, 0);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn shift_grows_with_delta() {
    for seed in 0..3u64 {
        let mut last: Option<(f64, f64, usize)> = None;
        for delta in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let c = Cohort::new(&spec(200, 64, delta, seed));
            let r = c.results(ConditionBase::Sunglasses, GalleryPolicy::None);
            let med = median(r.iter().map(|x| x.mated_score as f64).collect());
            let w = c.shift(ConditionBase::Sunglasses, GalleryPolicy::None);
            let f = fpir(&r).false_positives;
            if let Some((pm, pw, pf)) = last {
                assert!(med < pm, "seed {seed} delta {delta}: median {med} !< {pm}");
                assert!(w > pw, "seed {seed} delta {delta}: shift {w} !> {pw}");
                assert!(f >= pf, "seed {seed} delta {delta}: fpi {f} < {pf}");
            }
            last = Some((med, w, f));
        }
    }
}

#[test]
fn gallery_mitigation_over_delta_range() {
    for delta in [0.1, 0.3, 0.45, 0.6] {
        let c = Cohort::new(&spec(200, 64, delta, 4));
        let none = c.shift(ConditionBase::Sunglasses, GalleryPolicy::None);
        let all = c.shift(ConditionBase::Sunglasses, GalleryPolicy::All);
        assert!(all < none, "delta {delta}: all {all} !< none {none}");
    }
}
