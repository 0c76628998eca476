use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use scenario_core::config::WorkspaceConfig;
use scenario_core::coverage::{materialize_plan, measure_coverage, plan_mutants, CoverageReport};
use scenario_core::datamorph::{
    compose_chain, derive_case_seed, Operator, PixelImage, DatamorphChain, DatamorphismSpec, BLUE_CLASS,
};
use scenario_core::dataset::{load_manifest, manifest_dir, Annotation, BBox, DatasetManifest};
use scenario_core::evaluate::{
    compare, diagnose, evaluate_report, parse_suspects, ComparisonReport, DiagnosisConfig, DiagnosisReport,
    ScenarioReport, Verdict,
};
use scenario_core::modelrun::{
    format_predictions, ingest_predictions, load_run, run_model, save_run, ModelRunManifest, RunnerConfig,
    STRUCTURED_PREDICTIONS,
};
use scenario_core::report::{emit_report, AnyReport, ReportFormat};
use scenario_core::toy::{degrade_scenario, generate_toy_corpus, stub_run, StubDetector, ToyCorpusConfig};
use scenario_core::treatment::{emit_treatment, parse_range, plan_treatment, sweep, MixtureSpec, SweepSpec};
use scenario_core::triage::{apply_triage, TriageFile};
use scenario_core::Layout;

use crate::{
    Cli, CliError, Command, CompareArgs, CoverageArgs, DiagnoseArgs, EvalArgs, IngestArgs, MorphApplyArgs,
    MorphCommand, MutateArgs, PlanArgs, PlanMode, ReportArgs, RunArgs, ServeArgs, StubDetectArgs, StubVariant,
    ToyArgs, EXIT_DOMAIN, EXIT_OK,
};

/// `println!` that stops quietly when stdout is closed.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

/// Name of the run manifest inside a run directory.
pub const RUN_FILE: &str = "run.json";
/// Keyword accepted by `diagnose --suspects`.
pub const FROM_TRIAGE: &str = "from-triage";

struct Ctx {
    cfg: WorkspaceConfig,
    layout: Layout,
}

fn context(cli: &Cli) -> Result<Ctx, CliError> {
    let cfg = match &cli.config {
        Some(path) => WorkspaceConfig::load(path)?,
        None => WorkspaceConfig::load_or_default(&cli.workspace)?,
    };
    let layout = cfg.layout(&cli.workspace);
    Ok(Ctx { cfg, layout })
}

pub fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let mut ctx = context(cli)?;
    match &cli.command {
        Command::Mutate(a) => mutate(&mut ctx, a),
        Command::Coverage(a) => coverage(&ctx, a),
        Command::Run(a) => run(a),
        Command::Ingest(a) => ingest(a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Diagnose(a) => diagnose_cmd(&ctx, a),
        Command::Plan(a) => plan(&mut ctx, a),
        Command::Compare(a) => compare_cmd(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
        Command::Report(a) => report(a),
        Command::Morph(MorphCommand::List) => morph_list(),
        Command::Morph(MorphCommand::Apply(a)) => morph_apply(&mut ctx, a),
        Command::Toy(a) => toy(&ctx, a),
        Command::StubDetect(a) => stub_detect(a),
    }
}

/// Folds `op.param=value` overrides into the workspace configuration.
fn apply_sets(cfg: &mut WorkspaceConfig, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let bad = || CliError::Usage(format!("--set expects OP.PARAM=VALUE, got {s:?}"));
        let (key, value) = s.split_once('=').ok_or_else(bad)?;
        let (op, param) = key.split_once('.').ok_or_else(bad)?;
        let op: Operator = op.trim().parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        cfg.operators.entry(op.name().to_string()).or_default().insert(param.trim().to_string(), value);
    }
    cfg.validate()?;
    Ok(())
}

fn specs(cfg: &WorkspaceConfig, ops: &[Operator]) -> Result<Vec<DatamorphismSpec>, CliError> {
    ops.iter().map(|&op| Ok(cfg.spec(op)?)).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Accepts a run directory or the run manifest itself.
pub fn resolve_run_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RUN_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_run_checked(path: &Path, m: &DatasetManifest) -> Result<ModelRunManifest, CliError> {
    let run = load_run(&resolve_run_path(path))?;
    run.validate_against(m)?;
    Ok(run)
}

fn output_format(format: Option<&str>, out: Option<&Path>) -> Result<ReportFormat, CliError> {
    match (format, out) {
        (Some(f), _) => Ok(f.parse()?),
        (None, Some(p)) => Ok(ReportFormat::from_path(p)),
        (None, None) => Ok(ReportFormat::Json),
    }
}

fn write_report(report: AnyReport<'_>, out: Option<&Path>, format: Option<&str>) -> Result<(), CliError> {
    let format = output_format(format, out)?;
    match out {
        Some(path) => {
            emit_report(report, format, path)?;
            say!("wrote {}", path.display());
        }
        None => say!("{}", report.render(format)),
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn mutate(ctx: &mut Ctx, a: &MutateArgs) -> Result<i32, CliError> {
    apply_sets(&mut ctx.cfg, &a.set)?;
    let seeds = load_manifest(&a.input)?;
    let ops = a.operators.clone().unwrap_or_else(|| Operator::SCENARIOS.to_vec());
    let specs = specs(&ctx.cfg, &ops)?;
    let seed = a.seed.unwrap_or(ctx.cfg.defaults.seed);
    say!("seed: {seed}");
    let plan = plan_mutants(&seeds, &specs, a.criterion)?;
    let made = materialize_plan(&plan, &seeds, &manifest_dir(&a.input), seed, &a.out)?;
    say!(
        "criterion {}: {} test cases ({} seeds) written to {}",
        a.criterion,
        made.len(),
        seeds.len(),
        a.out.join("manifest.json").display()
    );
    Ok(EXIT_OK)
}

/// Plain-text rendering of a coverage report.
pub fn coverage_text(r: &CoverageReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "criterion: {}", r.criterion);
    let _ = writeln!(s, "operators: {}", r.operator_set.join(","));
    let _ = writeln!(s, "required: {}", r.required);
    let _ = writeln!(s, "present: {}", r.present);
    let _ = writeln!(s, "ratio: {:.6}", r.ratio);
    let _ = writeln!(s, "satisfied: {}", r.satisfied);
    let _ = writeln!(s, "missing: {}", r.missing.len());
    for m in &r.missing {
        let chain = if m.chain.is_empty() { "(seed)".to_string() } else { m.chain.join("+") };
        let _ = writeln!(s, "  - {} {}", m.seed_id, chain);
    }
    s
}

fn coverage(ctx: &Ctx, a: &CoverageArgs) -> Result<i32, CliError> {
    let m = load_manifest(&a.input)?;
    let ops = a.operators.clone().unwrap_or_else(|| Operator::SCENARIOS.to_vec());
    let report = measure_coverage(&m, &specs(&ctx.cfg, &ops)?, a.criterion)?;
    if a.json {
        say!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        say_raw!("{}", coverage_text(&report));
    }
    Ok(if report.satisfied { EXIT_OK } else { EXIT_DOMAIN })
}

fn run(a: &RunArgs) -> Result<i32, CliError> {
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    if !(a.timeout > 0.0 && a.timeout.is_finite()) {
        return Err(CliError::Usage("--timeout must be a positive number of seconds".into()));
    }
    let m = load_manifest(&a.input)?;
    let mut cfg = RunnerConfig::new(a.command.clone(), Duration::from_secs_f64(a.timeout))?;
    cfg.batch = a.batch;
    let mut run = run_model(&cfg, &m, &manifest_dir(&a.input), &a.model_id, &a.out, a.jobs)?;
    run.dataset.path = Some(a.input.display().to_string());
    let path = a.out.join(RUN_FILE);
    save_run(&run, &path)?;
    say!("{} predictions from {} written to {}", run.predictions.len(), a.model_id, path.display());
    Ok(EXIT_OK)
}

fn ingest(a: &IngestArgs) -> Result<i32, CliError> {
    let m = load_manifest(&a.input)?;
    let dir = if a.preds.is_file() && a.preds.file_name().is_some_and(|n| n == STRUCTURED_PREDICTIONS) {
        a.preds.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        a.preds.clone()
    };
    let mut run = ingest_predictions(&dir, &m, &a.model_id)?;
    run.dataset.path = Some(a.input.display().to_string());
    for w in &run.metadata.warnings {
        eprintln!("warning: {w}");
    }
    let path = a.out.as_deref().unwrap_or(&dir).join(RUN_FILE);
    save_run(&run, &path)?;
    say!("{} predictions from {} written to {}", run.predictions.len(), a.model_id, path.display());
    Ok(EXIT_OK)
}

fn with_triage(m: DatasetManifest, triage: Option<&Path>) -> Result<DatasetManifest, CliError> {
    match triage {
        Some(path) => Ok(apply_triage(&m, &TriageFile::load(path)?)?),
        None => Ok(m),
    }
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<i32, CliError> {
    let m = with_triage(load_manifest(&a.input)?, a.triage.as_deref())?;
    let run = load_run_checked(&a.run, &m)?;
    let mut cfg = ctx.cfg.diagnosis();
    if let Some(t) = a.iou {
        cfg.iou_threshold = t;
    }
    let report = evaluate_report(&run, &m, &cfg)?;
    write_report(AnyReport::Scenario(&report), a.out.as_deref(), a.format.as_deref())?;
    Ok(EXIT_OK)
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text summary of a diagnosis.
pub fn diagnosis_text(r: &DiagnosisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "reference: {:.2} ({})", r.reference, r.reference_source);
    for e in &r.entries {
        let verdict = match e.verdict {
            Verdict::Confirmed => "confirmed",
            Verdict::NotConfirmed => "not confirmed",
        };
        let _ = writeln!(
            s,
            "{}: map {} ci [{:.2}, {:.2}] {}",
            e.suspect,
            fmt_pct(e.map),
            e.ci_low,
            e.ci_high,
            verdict
        );
    }
    s
}

fn diagnose_cmd(ctx: &Ctx, a: &DiagnoseArgs) -> Result<i32, CliError> {
    let mut m = load_manifest(&a.input)?;
    let suspects = if a.suspects.trim() == FROM_TRIAGE {
        let path = a.triage.clone().unwrap_or_else(|| ctx.layout.triage_file());
        let triage = TriageFile::load(&path)?;
        m = apply_triage(&m, &triage)?;
        triage.suspects()
    } else {
        if let Some(path) = &a.triage {
            m = with_triage(m, Some(path))?;
        }
        parse_suspects(&a.suspects)?
    };
    if suspects.is_empty() {
        return Err(CliError::Domain("no suspects to diagnose".into()));
    }
    let run = load_run_checked(&a.run, &m)?;
    let mut cfg: DiagnosisConfig = ctx.cfg.diagnosis();
    if let Some(v) = a.delta {
        cfg.delta = v;
    }
    if let Some(v) = a.bootstrap {
        cfg.bootstrap = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.confidence {
        cfg.confidence = v;
    }
    if let Some(v) = a.iou {
        cfg.iou_threshold = v;
    }
    cfg.target = a.target;
    say!("seed: {}", cfg.seed);
    let report = diagnose(&run, &m, &suspects, &cfg)?;
    say_raw!("{}", diagnosis_text(&report));
    if let Some(out) = &a.out {
        write_report(AnyReport::Diagnosis(&report), Some(out), a.format.as_deref())?;
    }
    Ok(EXIT_OK)
}

fn synthetic_fractions(a: &PlanArgs) -> Result<Vec<f64>, CliError> {
    let bad = |s: &str| CliError::Usage(format!("--p expects a fraction, a comma list or start:end:step, got {s:?}"));
    match (a.mode, a.synthetic.as_deref()) {
        (None, None) => Ok(vec![0.30]),
        (Some(PlanMode::Sweep), None) => Ok(SweepSpec::DEFAULT_FRACTIONS.to_vec()),
        (_, Some(s)) if s.contains(':') => {
            if a.mode.is_none() {
                return Err(CliError::Usage("a --p range needs `plan sweep`".into()));
            }
            Ok(parse_range(s)?)
        }
        (mode, Some(s)) => {
            let values: Vec<f64> =
                s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad(s))).collect::<Result<_, _>>()?;
            if mode.is_none() && values.len() != 1 {
                return Err(CliError::Usage("several --p values need `plan sweep`".into()));
            }
            Ok(values)
        }
    }
}

fn plan(ctx: &mut Ctx, a: &PlanArgs) -> Result<i32, CliError> {
    apply_sets(&mut ctx.cfg, &a.set)?;
    let fractions = synthetic_fractions(a)?;
    let train = load_manifest(&a.input)?;
    let train_dir = manifest_dir(&a.input);
    let target = specs(&ctx.cfg, &a.target)?;
    let seed = a.seed.unwrap_or(ctx.cfg.defaults.seed);
    say!("seed: {seed}");

    let mut plans = match a.mode {
        None => {
            let spec = MixtureSpec {
                synthetic_fraction: fractions[0],
                rehearsal_fraction: a.rehearsal,
                target,
                master_seed: seed,
                disjoint: a.disjoint,
            };
            vec![plan_treatment(&train, &spec, &a.base_model)?]
        }
        Some(PlanMode::Sweep) => {
            let s = SweepSpec {
                synthetic_fractions: fractions,
                rehearsal_fraction: a.rehearsal,
                target,
                master_seed: seed,
                disjoint: a.disjoint,
            };
            sweep(&train, &s, &a.base_model)?
        }
    };

    for p in &plans {
        say!(
            "{}: {} synthetic from {} sources + {} rehearsal = {} images",
            p.label, p.counts.synthetic, p.counts.sources, p.counts.rehearsal, p.counts.total
        );
    }
    if a.dry_run {
        say!("{}", serde_json::to_string_pretty(&plans).expect("plans serialize"));
        return Ok(EXIT_OK);
    }
    let out = a.out.as_ref().expect("clap requires --out without --dry-run");
    match a.mode {
        None => {
            emit_treatment(&mut plans[0], &train, &train_dir, out)?;
            say!("wrote {}", out.join("manifest.json").display());
        }
        Some(PlanMode::Sweep) => {
            for p in &mut plans {
                let dir = out.join(&p.label);
                emit_treatment(p, &train, &train_dir, &dir)?;
                say!("wrote {}", dir.join("manifest.json").display());
            }
            write_json(&plans, &out.join("sweep.json"))?;
        }
    }
    Ok(EXIT_OK)
}

/// Plain-text summary of a comparison.
pub fn comparison_text(r: &ComparisonReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "overall: {} -> {}", fmt_pct(r.overall.a), fmt_pct(r.overall.b));
    for g in &r.groups {
        let _ = writeln!(s, "{}: {} -> {} (delta {})", g.name, fmt_pct(g.a), fmt_pct(g.b), fmt_pct(g.delta));
    }
    for c in &r.classes {
        let _ = writeln!(s, "class:{}: {} -> {} (delta {})", c.name, fmt_pct(c.a), fmt_pct(c.b), fmt_pct(c.delta));
    }
    let _ = writeln!(s, "forgetting flags: {}", r.forgetting_flags.len());
    for f in &r.forgetting_flags {
        let _ = writeln!(s, "  - {f}");
    }
    s
}

fn compare_cmd(ctx: &Ctx, a: &CompareArgs) -> Result<i32, CliError> {
    let ra = ScenarioReport::load(&a.a)?;
    let rb = ScenarioReport::load(&a.b)?;
    let treated = parse_suspects(&a.treated)?;
    let eps = a.epsilon.unwrap_or(ctx.cfg.defaults.epsilon);
    let report = compare(&ra, &rb, &treated, eps)?;
    say_raw!("{}", comparison_text(&report));
    if let Some(out) = &a.out {
        write_report(AnyReport::Comparison(&report), Some(out), a.format.as_deref())?;
    }
    Ok(EXIT_OK)
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<i32, CliError> {
    let tau = ctx.cfg.defaults.iou;
    crate::server::serve_blocking(ctx.layout.clone(), a.ui.clone(), &a.host, a.port, tau)?;
    Ok(EXIT_OK)
}

fn report(a: &ReportArgs) -> Result<i32, CliError> {
    let text = fs::read_to_string(&a.input).map_err(io_err(&a.input))?;
    let parse_err = |e: serde_json::Error| CliError::Domain(format!("cannot parse {}: {e}", a.input.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let out = Some(a.out.as_path());
    let format = a.format.as_deref();
    match kind.as_str() {
        "scenario-report" => {
            let r: ScenarioReport = serde_json::from_value(value).map_err(parse_err)?;
            write_report(AnyReport::Scenario(&r), out, format)?;
        }
        "diagnosis-report" => {
            let r: DiagnosisReport = serde_json::from_value(value).map_err(parse_err)?;
            write_report(AnyReport::Diagnosis(&r), out, format)?;
        }
        "comparison-report" => {
            let r: ComparisonReport = serde_json::from_value(value).map_err(parse_err)?;
            write_report(AnyReport::Comparison(&r), out, format)?;
        }
        other => return Err(CliError::Domain(format!("{}: unknown report kind {other:?}", a.input.display()))),
    }
    Ok(EXIT_OK)
}

fn morph_list() -> Result<i32, CliError> {
    for op in Operator::ALL {
        let kind = if op.is_stochastic() { "seeded" } else { "deterministic" };
        say!("{} ({kind}): {}", op.name(), op.description());
        for p in op.params() {
            let int = if p.integer { ", integer" } else { "" };
            say!("    {} = {} [{}, {}{int}]", p.name, p.default, p.min, p.max);
        }
    }
    Ok(EXIT_OK)
}

fn morph_apply(ctx: &mut Ctx, a: &MorphApplyArgs) -> Result<i32, CliError> {
    apply_sets(&mut ctx.cfg, &a.set)?;
    let chain = DatamorphChain::new(specs(&ctx.cfg, &a.ops)?)?;
    let image = PixelImage::load(&a.input)?;
    // a bare image carries no labels, so orangecone treats the frame as one blue box
    let anns = vec![Annotation::new(BLUE_CLASS, BBox::new(0.0, 0.0, 1.0, 1.0))];
    let seed = a.seed.unwrap_or(ctx.cfg.defaults.seed);
    say!("seed: {seed}");
    let id = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let case_seed = derive_case_seed(seed, id, chain.ops());
    let rec = compose_chain(&chain, id, &image, &anns, case_seed)?;
    rec.image.save_png(&a.out)?;
    say!("{} -> {}", chain.names().join("+"), a.out.display());
    Ok(EXIT_OK)
}

fn toy(ctx: &Ctx, a: &ToyArgs) -> Result<i32, CliError> {
    if a.images == 0 {
        return Err(CliError::Usage("--images must be at least 1".into()));
    }
    let seed = a.seed.unwrap_or(ctx.cfg.defaults.seed);
    say!("seed: {seed}");
    let cfg = ToyCorpusConfig { images: a.images, seed, ..ToyCorpusConfig::default() };
    let m = generate_toy_corpus(&cfg, &a.out)?;
    say!("{} images written to {}", m.len(), a.out.join("manifest.json").display());
    Ok(EXIT_OK)
}

fn stub_detect(a: &StubDetectArgs) -> Result<i32, CliError> {
    let detector = match a.variant {
        StubVariant::Blind => StubDetector::orange_blind(),
        StubVariant::Aware => StubDetector::orange_aware(),
    };
    match (&a.image, &a.input) {
        (Some(image), None) => {
            let dets = detector.detect_file(image)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            fs::write(&a.out, format_predictions(&dets)).map_err(io_err(&a.out))?;
        }
        (None, Some(input)) => {
            let m = load_manifest(input)?;
            let model_id = a.model_id.as_deref().expect("clap requires --model with --in");
            let mut run = stub_run(&detector, &m, &manifest_dir(input), model_id)?;
            if let Some(scenario) = &a.degrade {
                run = degrade_scenario(&run, &m, scenario, model_id);
            }
            run.dataset.path = Some(input.display().to_string());
            let path = a.out.join(RUN_FILE);
            save_run(&run, &path)?;
            say!("{} predictions from {model_id} written to {}", run.predictions.len(), path.display());
        }
        _ => return Err(CliError::Usage("stub-detect needs exactly one of --image or --in".into())),
    }
    Ok(EXIT_OK)
}
