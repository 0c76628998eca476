mod common;

use std::collections::HashSet;

use common::{entry, random_box, rng};
use proptest::prelude::*;
use rand::Rng;

use scenario_core::dataset::{
    class_stats, fraction_count, load_manifest, merge_manifests, sample_fraction, save_manifest, Annotation, BBox,
    DatasetError, DatasetManifest,
};

fn manifest(prefix: &str, n: usize, seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let classes = ["yellow", "blue", "orange"];
    let mut m = DatasetManifest::new(classes.iter().map(|s| s.to_string()).collect());
    for i in 0..n {
        let anns = (0..r.random_range(0..4)).map(|_| Annotation::new(classes[r.random_range(0..3)], random_box(&mut r))).collect();
        m.images.push(entry(&format!("{prefix}{i:04}"), &[], anns));
    }
    m
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest("a", 25, 1);
    m.images[3].image.annotations.push({
        let mut a = Annotation::new("blue", BBox::new(0.0, 0.0, 1.0, 1.0));
        a.recognizable = false;
        a
    });
    m.images.push(entry("mut", &["dark", "fog"], vec![]));
    m.master_seed = Some(99);
    let path = dir.path().join("m.json");
    save_manifest(&m, &path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.fingerprint(), m.fingerprint());
}

#[test]
fn invalid_boxes_are_rejected_with_reasons() {
    let mut m = manifest("a", 2, 2);
    m.images[0].image.annotations = vec![Annotation::new("blue", BBox::new(0.8, 0.1, 0.3, 0.1))];
    m.images[1].image.annotations = vec![Annotation::new("purple", BBox::new(0.1, 0.1, 0.1, 0.1))];
    match m.validate() {
        Err(DatasetError::Validation(v)) => {
            assert!(v.iter().any(|s| s.contains("x+w > 1")), "{v:?}");
            assert!(v.iter().any(|s| s.contains("purple")), "{v:?}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fraction_counts() {
    assert_eq!(fraction_count(0.3, 1000), 300);
    assert_eq!(fraction_count(0.1, 1000), 100);
    assert_eq!(fraction_count(0.29, 100), 29);
    assert_eq!(fraction_count(0.5, 7), 3);
}

#[test]
fn merge_adds_class_stats_and_rejects_collisions() {
    let a = manifest("a", 30, 3);
    let b = manifest("b", 20, 4);
    let merged = merge_manifests(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(merged.len(), 50);
    assert_eq!(class_stats(&merged), class_stats(&a) + class_stats(&b));
    assert!(matches!(merge_manifests(&[a.clone(), a]), Err(DatasetError::IdCollision(_))));
    assert!(matches!(merge_manifests(&[]), Err(DatasetError::EmptyMerge)));
}

#[test]
fn sample_rejects_bad_fractions() {
    let m = manifest("a", 5, 5);
    assert!(matches!(sample_fraction(&m, 0.0, 1), Err(DatasetError::InvalidFraction(_))));
    assert!(matches!(sample_fraction(&m, 1.5, 1), Err(DatasetError::InvalidFraction(_))));
    assert!(matches!(sample_fraction(&m, 0.1, 1), Err(DatasetError::FractionTooSmall { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_is_a_deterministic_subset(n in 1usize..200, f in 0.01f64..=1.0, seed in any::<u64>()) {
        let m = manifest("s", n, seed ^ 5);
        let want = fraction_count(f, n);
        match sample_fraction(&m, f, seed) {
            Ok(s) => {
                prop_assert_eq!(s.len(), want);
                let ids: HashSet<&str> = s.ids().collect();
                prop_assert_eq!(ids.len(), want);
                prop_assert!(s.images.iter().all(|e| m.get(&e.image.id) == Some(e)));
                prop_assert_eq!(&s, &sample_fraction(&m, f, seed).unwrap());
            }
            Err(DatasetError::FractionTooSmall { .. }) => prop_assert_eq!(want, 0),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn sampling_ignores_input_order(n in 2usize..80, seed in any::<u64>()) {
        let m = manifest("s", n, 1);
        let mut shuffled = m.clone();
        shuffled.images.reverse();
        let a: HashSet<String> = sample_fraction(&m, 0.5, seed).unwrap().ids().map(String::from).collect();
        let b: HashSet<String> = sample_fraction(&shuffled, 0.5, seed).unwrap().ids().map(String::from).collect();
        prop_assert_eq!(a, b);
    }
}
