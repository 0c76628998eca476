mod common;

use std::collections::HashSet;

use common::entry;

use scenario_core::datamorph::{DatamorphismSpec, Operator, PixelImage};
use scenario_core::dataset::{Annotation, BBox, DatasetManifest};
use scenario_core::treatment::{emit_treatment, plan_treatment, sweep, MixtureSpec, SweepSpec};

fn train(n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new(vec!["yellow".into(), "blue".into(), "orange".into()]);
    for i in 0..n {
        m.images.push(entry(&format!("t{i:04}"), &[], vec![Annotation::new("blue", BBox::new(0.2, 0.2, 0.4, 0.5))]));
    }
    m
}

fn mixture(p: f64, r: f64, seed: u64) -> MixtureSpec {
    MixtureSpec {
        synthetic_fraction: p,
        rehearsal_fraction: r,
        target: vec![DatamorphismSpec::new(Operator::OrangeCone)],
        master_seed: seed,
        disjoint: false,
    }
}

#[test]
fn thirty_plus_ten_percent_of_a_thousand() {
    let plan = plan_treatment(&train(1000), &mixture(0.30, 0.10, 42), "M0").unwrap();
    assert_eq!(plan.synthetic.len(), 300);
    assert_eq!(plan.rehearsal.len(), 100);
    assert_eq!(plan.counts.total, 400);
    let distinct: HashSet<&str> = plan.synthetic.iter().map(|e| e.source_id.as_str()).collect();
    assert_eq!(distinct.len(), 300);
}

#[test]
fn plans_are_deterministic_and_seeded() {
    let t = train(500);
    let a = plan_treatment(&t, &mixture(0.2, 0.1, 1), "M0").unwrap();
    assert_eq!(a, plan_treatment(&t, &mixture(0.2, 0.1, 1), "M0").unwrap());
    assert_ne!(a.rehearsal, plan_treatment(&t, &mixture(0.2, 0.1, 2), "M0").unwrap().rehearsal);
}

#[test]
fn sweep_shares_rehearsal() {
    let s = SweepSpec {
        synthetic_fractions: SweepSpec::DEFAULT_FRACTIONS.to_vec(),
        rehearsal_fraction: 0.1,
        target: vec![DatamorphismSpec::new(Operator::OrangeCone)],
        master_seed: 9,
        disjoint: false,
    };
    let plans = sweep(&train(1000), &s, "M0").unwrap();
    assert_eq!(plans.len(), 5);
    for (plan, p) in plans.iter().zip([100, 200, 300, 400, 500]) {
        assert_eq!(plan.synthetic.len(), p);
        assert_eq!(plan.rehearsal, plans[0].rehearsal);
    }
}

#[test]
fn disjoint_keeps_sources_out_of_rehearsal() {
    let mut spec = mixture(0.5, 0.3, 5);
    spec.disjoint = true;
    let plan = plan_treatment(&train(100), &spec, "M0").unwrap();
    let reh: HashSet<&str> = plan.rehearsal.iter().map(String::as_str).collect();
    assert!(plan.synthetic.iter().all(|e| !reh.contains(e.source_id.as_str())));
}

#[test]
fn emitted_set_matches_plan_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let tdir = dir.path().join("train");
    let t = train(20);
    for (i, e) in t.images.iter().enumerate() {
        let mut img = PixelImage::filled(20, 16, [100, 100, (i * 10) as u8]);
        for y in 4..12 {
            for x in 5..13 {
                img.set(x, y, [20, 60, 230]);
            }
        }
        img.save_png(&tdir.join(&e.image.path)).unwrap();
    }
    let mut outputs = Vec::new();
    for run in 0..2 {
        let mut plan = plan_treatment(&t, &mixture(0.3, 0.1, 3), "M0").unwrap();
        let out = dir.path().join(format!("out{run}"));
        let m = emit_treatment(&mut plan, &t, &tdir, &out).unwrap();
        assert_eq!(m.len(), 6 + 2);
        assert_eq!(m.images.iter().filter(|e| e.provenance.chain == ["orangecone"]).count(), 6);
        for id in &plan.rehearsal {
            let src = std::fs::read(tdir.join(&t.get(id).unwrap().image.path)).unwrap();
            let copy = std::fs::read(out.join(&m.get(id).unwrap().image.path)).unwrap();
            assert_eq!(src, copy);
        }
        let bytes: Vec<Vec<u8>> =
            m.images.iter().map(|e| std::fs::read(out.join(&e.image.path)).unwrap()).collect();
        outputs.push((m, bytes));
    }
    assert_eq!(outputs[0], outputs[1]);
}
