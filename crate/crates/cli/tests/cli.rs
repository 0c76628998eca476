use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenario_core::dataset::load_manifest;
use scenario_core::evaluate::{ComparisonReport, DiagnosisReport, ScenarioReport, Verdict};
use scenario_core::modelrun::load_run;
use scenario_core::treatment::TreatmentPlan;
use scenario_core::triage::{Tag, TriageEntry, TriageFile};

fn scenario(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenario")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scenario(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Toy seeds plus their first-order mutants over two operators.
fn workspace(images: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let n = images.to_string();
    ok(dir.path(), &["toy", "--out", "seeds", "--images", &n, "--seed", "11"]);
    ok(dir.path(), &["mutate", "--in", "seeds/manifest.json", "--out", "test", "--operators", "fog,speed", "--seed", "3"]);
    dir
}

/// Every file under `root` with its bytes, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = scenario(dir.path(), &["eval", "--run", "runs/x"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("--in"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_subcommand_and_bad_values_exit_two_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&scenario(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&scenario(dir.path(), &["coverage", "--in", "x.json", "--criterion", "kth:x"])), 2);
    assert_eq!(code(&scenario(dir.path(), &["mutate", "--in", "x", "--out", "y", "--operators", "snow"])), 2);
    let help = scenario(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["mutate", "coverage", "run", "ingest", "eval", "diagnose", "plan", "compare", "serve", "report"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = scenario(dir.path(), &["coverage", "--in", "missing.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.json"));
}

#[test]
fn coverage_exit_status_follows_satisfaction() {
    let ws = workspace(3);
    let d = ws.path();
    let full = ok(d, &["coverage", "--in", "test/manifest.json", "--operators", "fog,speed"]);
    assert!(full.contains("satisfied: true"), "{full}");
    assert!(full.contains("ratio: 1.000000"), "{full}");

    let out = scenario(d, &["coverage", "--in", "seeds/manifest.json", "--operators", "fog,speed"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("satisfied: false"), "{text}");
    assert!(text.contains("missing: 6"), "{text}");

    let json = scenario(d, &["coverage", "--in", "test/manifest.json", "--operators", "fog,speed", "--criterion", "kth:3", "--json"]);
    assert_eq!(code(&json), 1);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["required"], 12);
    assert_eq!(v["present"], 9);
}

#[test]
fn mutate_with_a_fixed_seed_reproduces_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["toy", "--out", "seeds", "--images", "4", "--seed", "1"]);
    for out in ["a", "b"] {
        let text = ok(d, &["mutate", "--in", "seeds/manifest.json", "--out", out, "--seed", "7", "--criterion", "kth:2"]);
        assert!(text.starts_with("seed: 7\n"), "{text}");
    }
    let (a, b) = (tree(&d.join("a")), tree(&d.join("b")));
    assert_eq!(a.len(), 4 * 8 + 1);
    assert_eq!(a, b);

    ok(d, &["mutate", "--in", "seeds/manifest.json", "--out", "c", "--seed", "8", "--criterion", "kth:2"]);
    assert_ne!(a, tree(&d.join("c")));
}

#[test]
fn workspace_config_supplies_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("scenario.toml"), "[defaults]\nseed = 1234\n\n[operators.fog]\nf = 0.5\n").unwrap();
    let text = ok(d, &["toy", "--out", "seeds", "--images", "2"]);
    assert!(text.starts_with("seed: 1234\n"), "{text}");
    let text = ok(d, &["mutate", "--in", "seeds/manifest.json", "--out", "m", "--operators", "fog"]);
    assert!(text.starts_with("seed: 1234\n"), "{text}");

    let out = scenario(d, &["mutate", "--in", "seeds/manifest.json", "--out", "m2", "--set", "fog.f=3"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let out = scenario(d, &["mutate", "--in", "seeds/manifest.json", "--out", "m2", "--set", "fog-f"]);
    assert_eq!(code(&out), 2);

    fs::write(d.join("bad.toml"), "[defaults]\nsede = 1\n").unwrap();
    let out = scenario(d, &["--config", "bad.toml", "morph", "list"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn morph_list_and_apply() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let list = ok(d, &["morph", "list"]);
    for name in ["bright", "dark", "flare", "fog", "rain", "speed", "water", "orangecone"] {
        assert!(list.contains(name), "{list}");
    }
    ok(d, &["toy", "--out", "seeds", "--images", "1", "--seed", "2"]);
    let img = "seeds/images/toy_0000.png";
    for out in ["x.png", "y.png"] {
        let text = ok(d, &["morph", "apply", "--ops", "rain,fog", "--in", img, "--out", out, "--seed", "5"]);
        assert!(text.starts_with("seed: 5\n"));
    }
    assert_eq!(fs::read(d.join("x.png")).unwrap(), fs::read(d.join("y.png")).unwrap());
    assert_ne!(fs::read(d.join("x.png")).unwrap(), fs::read(d.join(img)).unwrap());
}

#[test]
fn run_through_an_external_command_and_ingest_files() {
    let ws = workspace(3);
    let d = ws.path();
    let exe = env!("CARGO_BIN_EXE_scenario");
    let cmd = format!("'{exe}' stub-detect --variant aware --image {{image}} --out {{out}}");
    ok(d, &["run", "--cmd", &cmd, "--in", "test/manifest.json", "--model-id", "M1", "--out", "runs/M1", "--jobs", "3"]);
    ok(d, &["stub-detect", "--variant", "aware", "--in", "test/manifest.json", "--model", "M1x", "--out", "runs/M1x"]);
    let via_cmd = load_run(&d.join("runs/M1/run.json")).unwrap();
    let in_proc = load_run(&d.join("runs/M1x/run.json")).unwrap();
    assert_eq!(via_cmd.predictions, in_proc.predictions);
    assert!(via_cmd.metadata.command.is_some());

    ok(d, &["ingest", "--pred", "runs/M1", "--in", "test/manifest.json", "--model-id", "M1i", "--out", "runs/M1i"]);
    let ingested = load_run(&d.join("runs/M1i/run.json")).unwrap();
    assert_eq!(ingested.predictions, via_cmd.predictions);

    let victim = fs::read_dir(d.join("runs/M1"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "pred"))
        .unwrap();
    let stem = victim.file_stem().unwrap().to_str().unwrap().to_string();
    fs::remove_file(&victim).unwrap();
    let out = scenario(d, &["ingest", "--pred", "runs/M1", "--in", "test/manifest.json", "--model-id", "M1i"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains(&format!("no predictions for {stem}")), "{}", stderr(&out));
}

#[test]
fn failing_model_command_names_the_image() {
    let ws = workspace(2);
    let d = ws.path();
    let cmd = "case {image} in *toy_0001.png) echo boom >&2; exit 1;; *) : > {out};; esac";
    let out = scenario(d, &["run", "--cmd", cmd, "--in", "seeds/manifest.json", "--model", "bad", "--out", "runs/bad"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("toy_0001") && err.contains("boom"), "{err}");

    let out = scenario(d, &["run", "--cmd", "true", "--in", "seeds/manifest.json", "--model", "bad", "--out", "runs/bad"]);
    assert_eq!(code(&out), 1, "template without placeholders");
}

#[test]
fn eval_report_and_rerender() {
    let ws = workspace(6);
    let d = ws.path();
    ok(d, &["stub-detect", "--in", "test/manifest.json", "--model", "M0", "--out", "runs/M0"]);
    ok(d, &["eval", "--run", "runs/M0", "--in", "test/manifest.json", "--out", "reports/m0.json"]);
    let report = ScenarioReport::load(&d.join("reports/m0.json")).unwrap();
    assert_eq!(report.groups.len(), 3);
    assert_eq!(report.model_id, "M0");

    let stdout = ok(d, &["eval", "--run", "runs/M0/run.json", "--in", "test/manifest.json"]);
    let again: ScenarioReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(again, report);

    ok(d, &["report", "--in", "reports/m0.json", "--out", "reports/m0.html"]);
    let html = fs::read_to_string(d.join("reports/m0.html")).unwrap();
    assert_eq!(html.matches("class=\"bar scenario-bar\"").count(), 3);
    assert_eq!(html.matches("class=\"bar class-bar\"").count(), 3);
    ok(d, &["report", "--in", "reports/m0.json", "--out", "reports/copy.json"]);
    assert_eq!(ScenarioReport::load(&d.join("reports/copy.json")).unwrap(), report);

    let out = scenario(d, &["eval", "--run", "runs/M0", "--in", "seeds/manifest.json"]);
    assert_eq!(code(&out), 1, "run bound to another manifest");
    let out = scenario(d, &["eval", "--run", "runs/M0", "--in", "test/manifest.json", "--out", "r.pdf", "--format", "pdf"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn diagnose_echoes_seed_and_reads_triage() {
    let ws = workspace(12);
    let d = ws.path();
    ok(d, &["stub-detect", "--in", "test/manifest.json", "--model", "M0", "--out", "runs/M0"]);
    let args = ["diagnose", "--run", "runs/M0", "--in", "test/manifest.json", "--suspects", "class:orange,fog", "--bootstrap", "300"];
    let a = ok(d, &[&args[..], &["--seed", "9", "--out", "reports/diag.json"]].concat());
    assert!(a.starts_with("seed: 9\n"), "{a}");
    let b = ok(d, &[&args[..], &["--seed", "9"]].concat());
    assert_eq!(a.lines().take(4).collect::<Vec<_>>(), b.lines().take(4).collect::<Vec<_>>());
    let report: DiagnosisReport = serde_json::from_str(&fs::read_to_string(d.join("reports/diag.json")).unwrap()).unwrap();
    assert_eq!(report.config.seed, 9);
    assert_eq!(report.entries[0].verdict, Verdict::Confirmed);

    let mut triage = TriageFile::default();
    triage.add(TriageEntry::new("toy_0002", None, Tag::SuspectClass("orange".into())));
    triage.save_atomic(&d.join("triage/triage.json")).unwrap();
    let text = ok(d, &["diagnose", "--run", "runs/M0", "--in", "test/manifest.json", "--suspects", "from-triage"]);
    assert!(text.starts_with("seed: 7\n"), "{text}");
    assert!(text.contains("class:orange"), "{text}");
    assert!(!text.contains("scenario:fog"), "{text}");

    let out = scenario(d, &["diagnose", "--run", "runs/M0", "--in", "test/manifest.json", "--suspects", "class:purple"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn plan_single_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["toy", "--out", "train", "--images", "20", "--seed", "4"]);
    let text = ok(d, &["plan", "--train", "train/manifest.json", "--target", "orangecone", "--p", "0.30", "--r", "0.10", "--base", "M1", "--seed", "99", "--out", "plan"]);
    assert!(text.starts_with("seed: 99\n"), "{text}");
    let m = load_manifest(&d.join("plan/manifest.json")).unwrap();
    assert_eq!(m.len(), 6 + 2);
    let plan: TreatmentPlan = serde_json::from_str(&fs::read_to_string(d.join("plan/plan.json")).unwrap()).unwrap();
    assert_eq!(plan.base_model_id, "M1");
    assert_eq!((plan.counts.synthetic, plan.counts.rehearsal), (6, 2));

    ok(d, &["plan", "sweep", "--in", "train/manifest.json", "--target", "orangecone", "--seed", "99", "--out", "sweep"]);
    let plans: Vec<TreatmentPlan> = serde_json::from_str(&fs::read_to_string(d.join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(plans.iter().map(|p| p.counts.synthetic).collect::<Vec<_>>(), [2, 4, 6, 8, 10]);
    assert!(plans.iter().all(|p| p.rehearsal == plans[0].rehearsal));
    for p in &plans {
        assert!(d.join("sweep").join(&p.label).join("manifest.json").is_file());
    }

    let dry = ok(d, &["plan", "sweep", "--p", "0.1,0.2", "--in", "train/manifest.json", "--target", "fog,dark", "--dry-run"]);
    assert!(dry.contains("M-sweep-p10") && dry.contains("M-sweep-p20"), "{dry}");
    assert_eq!(code(&scenario(d, &["plan", "--p", "0.1:0.5:0.1", "--in", "train/manifest.json", "--target", "fog", "--dry-run"])), 2);
    assert_eq!(code(&scenario(d, &["plan", "--in", "train/manifest.json", "--target", "fog"])), 2);
    assert_eq!(code(&scenario(d, &["plan", "--p", "0.01", "--in", "train/manifest.json", "--target", "fog", "--dry-run"])), 1);
}

#[test]
fn compare_renders_regressions() {
    let ws = workspace(12);
    let d = ws.path();
    ok(d, &["stub-detect", "--variant", "aware", "--in", "test/manifest.json", "--model", "A", "--out", "runs/A"]);
    ok(d, &["stub-detect", "--variant", "aware", "--degrade", "speed", "--in", "test/manifest.json", "--model", "B", "--out", "runs/B"]);
    ok(d, &["eval", "--run", "runs/A", "--in", "test/manifest.json", "--out", "reports/a.json"]);
    ok(d, &["eval", "--run", "runs/B", "--in", "test/manifest.json", "--out", "reports/b.json"]);
    let text = ok(d, &["compare", "--a", "reports/a.json", "--b", "reports/b.json", "--epsilon", "1.0", "--out", "reports/cmp.json"]);
    assert!(text.contains("forgetting flags: 1"), "{text}");
    let cmp = ComparisonReport::load(&d.join("reports/cmp.json")).unwrap();
    assert_eq!(cmp.forgetting_flags, ["speed"]);
    ok(d, &["report", "--in", "reports/cmp.json", "--out", "reports/cmp.html"]);
    let html = fs::read_to_string(d.join("reports/cmp.html")).unwrap();
    assert!(html.contains("id=\"regressions\""));
    assert_eq!(html.matches("class=\"forgetting-flag\"").count(), 1);

    let text = ok(d, &["compare", "--a", "reports/a.json", "--b", "reports/b.json", "--treated", "speed"]);
    assert!(text.contains("forgetting flags: 0"), "{text}");
}

#[test]
fn stub_detect_needs_one_mode() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&scenario(dir.path(), &["stub-detect", "--out", "x"])), 2);
    assert_eq!(code(&scenario(dir.path(), &["stub-detect", "--image", "a.png", "--in", "m.json", "--out", "x"])), 2);
}
