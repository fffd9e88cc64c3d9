//! Summary table and SVG plots over finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use urkle_core::MetricsRecord;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub beta_robust: f64,
    /// (epoch, total loss)
    pub losses: Vec<(f64, f64)>,
    pub attacks: Vec<MetricsRecord>,
}

fn read_csv(path: &Path) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>, CliError> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => return Ok(None),
    };
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok(Some((header, rows)))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Io(format!("{} has no `{name}` column", path.display())))
}

fn number(v: &str, path: &Path) -> Result<f64, CliError> {
    v.parse()
        .map_err(|_| CliError::Io(format!("{}: bad number `{v}`", path.display())))
}

fn conf_value(conf: &str, key: &str) -> Option<String> {
    conf.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

fn load_run(dir: &Path, name: String) -> Result<Option<RunSummary>, CliError> {
    let metrics = dir.join("metrics.csv");
    let attack = dir.join("attack.csv");
    let Some((header, rows)) = read_csv(&metrics)? else {
        if !attack.is_file() {
            return Ok(None);
        }
        return load_attack_only(dir, name);
    };
    let (ie, it) = (column(&header, "epoch", &metrics)?, column(&header, "total", &metrics)?);
    let losses = rows
        .iter()
        .map(|r| {
            let get = |i: usize| r.get(i).map(String::as_str).unwrap_or("");
            Ok((number(get(ie), &metrics)?, number(get(it), &metrics)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut run = load_attack_only(dir, name)?.expect("summary always built");
    run.losses = losses;
    Ok(Some(run))
}

fn load_attack_only(dir: &Path, name: String) -> Result<Option<RunSummary>, CliError> {
    let conf = fs::read_to_string(dir.join("run.conf")).unwrap_or_default();
    let attack_path = dir.join("attack.csv");
    let attacks = match read_csv(&attack_path)? {
        Some((_, rows)) => rows
            .iter()
            .map(|r| MetricsRecord::parse_csv_row(&r.join(",")).map_err(|e| CliError::Io(format!("{}: {e}", attack_path.display()))))
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    Ok(Some(RunSummary {
        name,
        method: conf_value(&conf, "method").unwrap_or_else(|| "?".into()),
        beta_robust: conf_value(&conf, "beta_robust")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN),
        losses: Vec::new(),
        attacks,
    }))
}

/// Runs found in `dir` itself and in its immediate subdirectories, sorted
/// by robustness weight and then by name.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunSummary>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("{} is not a directory", dir.display())));
    }
    let mut runs = Vec::new();
    if let Some(r) = load_run(dir, ".".into())? {
        runs.push(r);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let name = sub.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        if let Some(r) = load_run(&sub, name)? {
            runs.push(r);
        }
    }
    if runs.is_empty() {
        return Err(CliError::NoMetrics(dir.to_path_buf()));
    }
    runs.sort_by(|a, b| a.beta_robust.total_cmp(&b.beta_robust).then_with(|| a.name.cmp(&b.name)));
    Ok(runs)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

pub fn summary_table(runs: &[RunSummary]) -> String {
    let mut s = format!(
        "{:<24} {:<14} {:>11} {:>7} {:>12} {:>9} {:>9} {:>8}\n",
        "run", "method", "beta_robust", "epochs", "final_loss", "clean_acc", "adv_acc", "epsilon"
    );
    for r in runs {
        let strongest = r.attacks.iter().max_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        let _ = writeln!(
            s,
            "{:<24} {:<14} {:>11} {:>7} {:>12} {:>9} {:>9} {:>8}",
            r.name,
            r.method,
            r.beta_robust,
            r.losses.len(),
            fmt_opt(r.losses.last().map(|l| l.1), 5),
            fmt_opt(strongest.map(|a| a.clean_accuracy), 4),
            fmt_opt(strongest.map(|a| a.adversarial_accuracy), 4),
            fmt_opt(strongest.map(|a| a.epsilon), 3),
        );
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot of several labelled series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, h - pad + 16.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.3}</text>"#, pad - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            w - pad,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.txt`, `loss_curves.svg` and `accuracy_vs_epsilon.svg`
/// into `dir` and returns the summary table.
pub fn write_report(dir: &Path) -> Result<String, CliError> {
    let runs = collect_runs(dir)?;
    let table = summary_table(&runs);
    fs::write(dir.join("report.txt"), &table)?;
    let label = |r: &RunSummary| format!("{} (beta {})", r.name, r.beta_robust);
    let losses: Vec<_> = runs.iter().map(|r| (label(r), r.losses.clone())).collect();
    fs::write(dir.join("loss_curves.svg"), line_plot("Training loss", "epoch", "total loss", &losses))?;
    let acc: Vec<_> = runs
        .iter()
        .map(|r| {
            let mut pts: Vec<(f64, f64)> = r.attacks.iter().map(|a| (a.epsilon, a.adversarial_accuracy)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (label(r), pts)
        })
        .collect();
    fs::write(
        dir.join("accuracy_vs_epsilon.svg"),
        line_plot("Adversarial accuracy", "epsilon", "accuracy", &acc),
    )?;
    Ok(table)
}
