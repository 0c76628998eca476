//! Rendering of reports to disk as JSON or as a static HTML page.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::evaluate::{ComparisonReport, DeltaEntry, DiagnosisReport, ScenarioReport, Verdict};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown report format {0:?} (expected json or html)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Html,
}

impl ReportFormat {
    /// Picks the format from a file extension, defaulting to JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("html") || e.eq_ignore_ascii_case("htm") => ReportFormat::Html,
            _ => ReportFormat::Json,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "html" | "htm" => Ok(ReportFormat::Html),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

/// Any report the tool can emit.
#[derive(Debug, Clone, Copy)]
pub enum AnyReport<'a> {
    Scenario(&'a ScenarioReport),
    Diagnosis(&'a DiagnosisReport),
    Comparison(&'a ComparisonReport),
}

impl AnyReport<'_> {
    pub fn to_json(&self) -> String {
        fn pretty<T: Serialize>(v: &T) -> String {
            serde_json::to_string_pretty(v).expect("report serializes") + "\n"
        }
        match self {
            AnyReport::Scenario(r) => pretty(r),
            AnyReport::Diagnosis(r) => pretty(r),
            AnyReport::Comparison(r) => pretty(r),
        }
    }

    pub fn to_html(&self) -> String {
        match self {
            AnyReport::Scenario(r) => scenario_html(r),
            AnyReport::Diagnosis(r) => diagnosis_html(r),
            AnyReport::Comparison(r) => comparison_html(r),
        }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Html => self.to_html(),
        }
    }
}

pub fn emit_report(report: AnyReport<'_>, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    let io = |source| ReportError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, report.render(format)).map_err(io)
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn fmt_delta(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.2}"))
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin-bottom:1.5em}td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}\
th:first-child,td:first-child{text-align:left}.chart{margin-bottom:1.5em}\
.row{display:flex;align-items:center;margin:2px 0}.label{width:12em;font-size:90%}\
.track{width:420px;background:#eee;height:14px}.bar{height:14px;background:#4a7bd0}\
.class-bar{background:#d08a4a}.delta-bar.neg{background:#c44}.delta-bar.pos{background:#4a4}\
.value{margin-left:6px;font-size:85%}.regressions{border:2px solid #c44;padding:0.5em 1em}";

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{}</style>\n</head>\n<body>\n{}</body>\n</html>\n",
        escape_html(title),
        STYLE,
        body
    )
}

/// One horizontal bar; `value` is in points on a 0..100 scale.
fn bar(out: &mut String, class: &str, label: &str, value: Option<f64>, text: &str) {
    let width = value.unwrap_or(0.0).clamp(0.0, 100.0);
    let _ = writeln!(
        out,
        "<div class=\"row\"><span class=\"label\">{}</span><div class=\"track\"><div class=\"{}\" data-name=\"{}\" style=\"width:{:.2}%\"></div></div><span class=\"value\">{}</span></div>",
        escape_html(label),
        class,
        escape_html(label),
        width,
        escape_html(text)
    );
}

fn json_script(out: &mut String, id: &str, value: &impl Serialize) {
    let json = serde_json::to_string(value).expect("serializes").replace("</", "<\\/");
    let _ = writeln!(out, "<script type=\"application/json\" id=\"{id}\">{json}</script>");
}

fn scenario_html(r: &ScenarioReport) -> String {
    let mut b = String::new();
    let _ = writeln!(b, "<h1>Scenario report: {}</h1>", escape_html(&r.model_id));
    let _ = writeln!(
        b,
        "<p>Dataset {} &middot; IoU threshold {} &middot; precision {} &middot; recall {} &middot; mAP {}</p>",
        escape_html(&r.dataset_fingerprint),
        r.iou_threshold,
        fmt_pct(r.overall.precision),
        fmt_pct(r.overall.recall),
        fmt_pct(r.overall.map)
    );

    b.push_str("<h2>mAP per scenario</h2>\n<div class=\"chart\" id=\"scenario-chart\">\n");
    for g in &r.groups {
        bar(&mut b, "bar scenario-bar", &g.name, g.map, &fmt_pct(g.map));
    }
    b.push_str("</div>\n<h2>AP per class</h2>\n<div class=\"chart\" id=\"class-chart\">\n");
    for c in &r.per_class {
        bar(&mut b, "bar class-bar", &c.class, c.ap, &fmt_pct(c.ap));
    }
    b.push_str("</div>\n");

    b.push_str("<h2>Per-scenario, per-class AP</h2>\n<table>\n<tr><th>scenario</th><th>images</th>");
    for c in &r.class_set {
        let _ = write!(b, "<th>{}</th>", escape_html(c));
    }
    b.push_str("<th>mAP</th></tr>\n");
    for g in &r.groups {
        let _ = write!(b, "<tr><td>{}</td><td>{}</td>", escape_html(&g.name), g.image_count);
        for c in &g.classes {
            let _ = write!(b, "<td>{}</td>", fmt_pct(c.ap));
        }
        let _ = writeln!(b, "<td>{}</td></tr>", fmt_pct(g.map));
    }
    b.push_str("</table>\n");

    let _ = writeln!(b, "<h2>Failing cases ({})</h2>\n<table>", r.failing_cases.len());
    b.push_str("<tr><th>image</th><th>scenario</th><th>false positives</th><th>misses</th></tr>\n");
    for f in &r.failing_cases {
        let _ = writeln!(
            b,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            escape_html(&f.image_id),
            escape_html(&f.scenario),
            f.false_positives,
            f.misses
        );
    }
    b.push_str("</table>\n");
    json_script(&mut b, "failing-cases", &r.failing_cases);
    page(&format!("Scenario report {}", r.model_id), &b)
}

fn diagnosis_html(r: &DiagnosisReport) -> String {
    let mut b = String::new();
    let _ = writeln!(b, "<h1>Diagnosis: {}</h1>", escape_html(&r.model_id));
    let _ = writeln!(
        b,
        "<p>Reference mAP {:.2} ({}) &middot; delta {} &middot; {} bootstrap replicates &middot; confidence {} &middot; seed {}</p>",
        r.reference,
        escape_html(&r.reference_source),
        r.config.delta,
        r.config.bootstrap,
        r.config.confidence,
        r.config.seed
    );
    b.push_str("<div class=\"chart\" id=\"suspect-chart\">\n");
    for e in &r.entries {
        bar(&mut b, "bar suspect-bar", &e.suspect.to_string(), e.map, &fmt_pct(e.map));
    }
    b.push_str("</div>\n<table>\n<tr><th>suspect</th><th>estimate</th><th>CI low</th><th>CI high</th><th>verdict</th></tr>\n");
    for e in &r.entries {
        let verdict = match e.verdict {
            Verdict::Confirmed => "confirmed",
            Verdict::NotConfirmed => "not confirmed",
        };
        let _ = writeln!(
            b,
            "<tr class=\"{}\"><td>{}</td><td>{}</td><td>{:.2}</td><td>{:.2}</td><td>{}</td></tr>",
            if e.verdict == Verdict::Confirmed { "confirmed" } else { "not-confirmed" },
            escape_html(&e.suspect.to_string()),
            fmt_pct(e.map),
            e.ci_low,
            e.ci_high,
            verdict
        );
    }
    b.push_str("</table>\n");
    page(&format!("Diagnosis {}", r.model_id), &b)
}

fn delta_rows(b: &mut String, title: &str, id: &str, entries: &[DeltaEntry]) {
    let _ = writeln!(b, "<h2>{}</h2>\n<div class=\"chart\" id=\"{}\">", escape_html(title), id);
    for e in entries {
        let d = e.delta.unwrap_or(0.0);
        let class = if d < 0.0 { "bar delta-bar neg" } else { "bar delta-bar pos" };
        bar(b, class, &e.name, Some(d.abs()), &fmt_delta(e.delta));
    }
    b.push_str("</div>\n<table>\n<tr><th>name</th><th>A</th><th>B</th><th>delta</th><th>treated</th></tr>\n");
    for e in entries {
        let _ = writeln!(
            b,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            escape_html(&e.name),
            fmt_pct(e.a),
            fmt_pct(e.b),
            fmt_delta(e.delta),
            if e.treated { "yes" } else { "" }
        );
    }
    b.push_str("</table>\n");
}

fn comparison_html(r: &ComparisonReport) -> String {
    let mut b = String::new();
    let _ = writeln!(b, "<h1>Comparison: {} vs {}</h1>", escape_html(&r.model_a), escape_html(&r.model_b));
    let treated: Vec<String> = r.treated.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(
        b,
        "<p>Treated: {} &middot; epsilon {} &middot; overall mAP delta {}</p>",
        escape_html(&treated.join(", ")),
        r.epsilon,
        fmt_delta(r.overall.delta)
    );
    b.push_str("<section class=\"regressions\" id=\"regressions\">\n<h2>Regressions</h2>\n");
    if r.forgetting_flags.is_empty() {
        b.push_str("<p>No untreated scenario regressed beyond epsilon.</p>\n");
    } else {
        b.push_str("<ul>\n");
        for name in &r.forgetting_flags {
            let d = r.group(name).and_then(|g| g.delta);
            let _ = writeln!(
                b,
                "<li class=\"forgetting-flag\" data-name=\"{}\">{} ({})</li>",
                escape_html(name),
                escape_html(name),
                fmt_delta(d)
            );
        }
        b.push_str("</ul>\n");
    }
    b.push_str("</section>\n");
    delta_rows(&mut b, "mAP delta per scenario", "scenario-delta-chart", &r.groups);
    delta_rows(&mut b, "AP delta per class", "class-delta-chart", &r.classes);
    page(&format!("Comparison {} vs {}", r.model_a, r.model_b), &b)
}
