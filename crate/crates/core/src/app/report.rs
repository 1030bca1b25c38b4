//! Report files: `results.csv`, `densities.csv`, `timings.csv`, SVG plots
//! and `manifest.json`.
//!
//! Everything except `timings.csv` is a function of the configuration and
//! seed alone, so repeated runs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use super::sweep::{DensityCurve, SweepKind, SweepReport, SweepRow, Timing};
use crate::error::{Error, Result};
use crate::quantities::{CountMethod, CountMode};

pub const RESULTS_FILE: &str = "results.csv";
pub const DENSITIES_FILE: &str = "densities.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PLOT_DIR: &str = "plots";

const HEADER: [&str; 13] = [
    "sweep",
    "group",
    "center",
    "param",
    "epsilon",
    "threshold",
    "mode",
    "method",
    "refit",
    "refit_stderr",
    "linear",
    "linear_stderr",
    "refit_converged",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_csv<I, R>(header: &[&str], rows: I) -> Vec<u8>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// `results.csv` contents: `# key: value` metadata lines, then the table.
pub fn results_csv(report: &SweepReport) -> Vec<u8> {
    let mut out = String::new();
    for (k, v) in &report.metadata {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    let mut bytes = out.into_bytes();
    bytes.extend(to_csv(
        &HEADER,
        report.rows.iter().map(|r| {
            vec![
                r.sweep.as_str().to_string(),
                r.group.clone(),
                r.center.to_string(),
                r.param.to_string(),
                r.epsilon.to_string(),
                r.threshold.to_string(),
                r.mode.as_str().to_string(),
                r.method.as_str().to_string(),
                r.refit.to_string(),
                r.refit_stderr.to_string(),
                r.linear.to_string(),
                r.linear_stderr.to_string(),
                r.refit_converged.to_string(),
            ]
        }),
    ));
    bytes
}

fn densities_csv(densities: &[DensityCurve]) -> Vec<u8> {
    to_csv(
        &["label", "alpha", "delta", "nu", "p0", "pc"],
        densities.iter().flat_map(|d| {
            d.table.iter().map(move |[nu, p0, pc]| {
                vec![
                    d.label.clone(),
                    d.alpha.to_string(),
                    d.delta.to_string(),
                    nu.to_string(),
                    p0.to_string(),
                    pc.to_string(),
                ]
            })
        }),
    )
}

fn timings_csv(timings: &[Timing]) -> Vec<u8> {
    to_csv(
        &["stage", "label", "seconds"],
        timings
            .iter()
            .map(|t| vec![t.stage.clone(), t.label.clone(), format!("{:.6}", t.seconds)]),
    )
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Load {
        path: path.to_path_buf(),
        line,
        msg: format!("column `{name}`: cannot parse `{v}`"),
    })
}

/// Parses `results.csv` text back into metadata and rows.
pub fn parse_results(text: &str, path: &Path) -> Result<(BTreeMap<String, String>, Vec<SweepRow>)> {
    let mut metadata = BTreeMap::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some((k, v)) = line[1..].trim_start().split_once(": ") {
            metadata.insert(k.to_string(), v.to_string());
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Load {
            path: path.to_path_buf(),
            line: metadata.len() + 1,
            msg: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::Load {
            path: path.to_path_buf(),
            line,
            msg: format!("unknown {what}"),
        };
        rows.push(SweepRow {
            sweep: SweepKind::parse(&rec[0]).ok_or_else(|| bad("sweep"))?,
            group: rec[1].to_string(),
            center: field(path, line, HEADER[2], &rec[2])?,
            param: field(path, line, HEADER[3], &rec[3])?,
            epsilon: field(path, line, HEADER[4], &rec[4])?,
            threshold: field(path, line, HEADER[5], &rec[5])?,
            mode: CountMode::parse(&rec[6]).ok_or_else(|| bad("mode"))?,
            method: CountMethod::parse(&rec[7]).ok_or_else(|| bad("method"))?,
            refit: field(path, line, HEADER[8], &rec[8])?,
            refit_stderr: field(path, line, HEADER[9], &rec[9])?,
            linear: field(path, line, HEADER[10], &rec[10])?,
            linear_stderr: field(path, line, HEADER[11], &rec[11])?,
            refit_converged: field(path, line, HEADER[12], &rec[12])?,
        });
    }
    Ok((metadata, rows))
}

fn parse_densities(text: &str, path: &Path) -> Result<Vec<DensityCurve>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out: Vec<DensityCurve> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = [
            field(path, line, "nu", &rec[3])?,
            field(path, line, "p0", &rec[4])?,
            field(path, line, "pc", &rec[5])?,
        ];
        match out.last_mut() {
            Some(d) if d.label == rec[0] => d.table.push(row),
            _ => out.push(DensityCurve {
                label: rec[0].to_string(),
                alpha: field(path, line, "alpha", &rec[1])?,
                delta: field(path, line, "delta", &rec[2])?,
                table: vec![row],
            }),
        }
    }
    Ok(out)
}

fn parse_timings(text: &str, path: &Path) -> Result<Vec<Timing>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(Timing {
            stage: rec[0].to_string(),
            label: rec[1].to_string(),
            seconds: field(path, line, "seconds", &rec[2])?,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads a report directory written by [`emit_report`]. Densities and
/// timings are optional.
pub fn load_report(dir: impl AsRef<Path>) -> Result<SweepReport> {
    let dir = dir.as_ref();
    let path = dir.join(RESULTS_FILE);
    let (metadata, rows) = parse_results(&read(&path)?, &path)?;
    let kind = metadata
        .get("sweep")
        .and_then(|s| SweepKind::parse(s))
        .or_else(|| rows.first().map(|r| r.sweep))
        .ok_or_else(|| Error::Load {
            path: path.clone(),
            line: 1,
            msg: "cannot tell the sweep kind".into(),
        })?;
    let densities = match dir.join(DENSITIES_FILE) {
        p if p.exists() => parse_densities(&read(&p)?, &p)?,
        _ => Vec::new(),
    };
    let timings = match dir.join(TIMINGS_FILE) {
        p if p.exists() => parse_timings(&read(&p)?, &p)?,
        _ => Vec::new(),
    };
    let all_converged =
        metadata.get("anchor_converged").map_or(true, |v| v == "true") && rows.iter().all(|r| r.refit_converged);
    Ok(SweepReport {
        kind,
        metadata,
        rows,
        timings,
        densities,
        all_converged,
    })
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '.' | '-' => out.push(c),
            _ if !out.ends_with('_') => out.push('_'),
            _ => {}
        }
    }
    out.trim_matches('_').to_string()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every report file into `dir` and returns the paths written.
pub fn emit_report(report: &SweepReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let plot_dir = dir.join(PLOT_DIR);
    std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;

    let mut files: Vec<(String, Vec<u8>)> = vec![(RESULTS_FILE.into(), results_csv(report))];
    if !report.densities.is_empty() {
        files.push((DENSITIES_FILE.into(), densities_csv(&report.densities)));
    }
    for (name, svg) in plots(report) {
        files.push((format!("{PLOT_DIR}/{name}"), svg.into_bytes()));
    }

    let hashes: BTreeMap<&str, String> = files.iter().map(|(n, b)| (n.as_str(), sha256_hex(b))).collect();
    let config: BTreeMap<&str, &str> = report
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.as_str())))
        .collect();
    let manifest = json!({
        "sweep": report.kind.as_str(),
        "config_hash": report.metadata.get("config_hash"),
        "seed": report.metadata.get("seed"),
        "version": report.metadata.get("version"),
        "config": config,
        "all_converged": report.all_converged,
        "rows": report.rows.len(),
        "files": hashes,
    });
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    manifest_bytes.push(b'\n');
    files.push((MANIFEST_FILE.into(), manifest_bytes));
    files.push((TIMINGS_FILE.into(), timings_csv(&report.timings)));

    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}

/// Plot file names and SVG text: one refit-vs-linear plot per
/// (group, threshold, mode) and one density plot per perturbation.
pub fn plots(report: &SweepReport) -> Vec<(String, String)> {
    let mut keys: Vec<(String, usize, CountMode)> = Vec::new();
    for r in &report.rows {
        let k = (r.group.clone(), r.threshold, r.mode);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let xlabel = match report.kind {
        SweepKind::Alpha => "alpha",
        SweepKind::Phi => "delta",
    };
    let mut out = Vec::new();
    for (group, t, mode) in keys {
        let rows: Vec<&SweepRow> = report
            .rows
            .iter()
            .filter(|r| r.group == group && r.threshold == t && r.mode == mode)
            .collect();
        let refit: Vec<(f64, f64)> = rows.iter().map(|r| (r.param, r.refit)).collect();
        let linear: Vec<(f64, f64)> = rows.iter().map(|r| (r.param, r.linear)).collect();
        let marker = match report.kind {
            SweepKind::Alpha => rows.first().map(|r| r.center),
            SweepKind::Phi => Some(0.0),
        };
        let title = format!("{group}, t={t}, {}", mode.as_str());
        let svg = line_plot(
            &title,
            xlabel,
            "expected clusters",
            &[("refit", "#1f77b4", &refit), ("linear", "#d62728", &linear)],
            marker,
        );
        let name = format!("{}_{}_t{t}_{}.svg", report.kind.as_str(), slug(&group), mode.as_str());
        out.push((name, svg));
    }
    for d in &report.densities {
        let p0: Vec<(f64, f64)> = d.table.iter().map(|r| (r[0], r[1])).collect();
        let pc: Vec<(f64, f64)> = d.table.iter().map(|r| (r[0], r[2])).collect();
        let title = format!("{}, alpha={}, delta={}", d.label, d.alpha, d.delta);
        let svg = line_plot(
            &title,
            "nu",
            "prior density",
            &[("base", "#1f77b4", &p0), ("perturbed", "#d62728", &pc)],
            None,
        );
        out.push((format!("density_{}.svg", slug(&d.label)), svg));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn extent<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// A minimal static line chart.
pub fn line_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(&str, &str, &Vec<(f64, f64)>)],
    marker: Option<f64>,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 130.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let (x0, x1) = extent(series.iter().flat_map(|s| s.2.iter().map(|p| &p.0)).chain(marker.iter()));
    let (y0, y1) = extent(series.iter().flat_map(|s| s.2.iter().map(|p| &p.1)));
    let sx = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let sy = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    )
    .unwrap();
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(fx),
            H - B + 16.0,
            tick(fx)
        )
        .unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, L - 6.0, sy(fy) + 4.0, tick(fy)).unwrap();
    }
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, L + (W - L - R) / 2.0, H - 12.0, xml_escape(xlabel)).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        T + (H - T - B) / 2.0,
        T + (H - T - B) / 2.0,
        xml_escape(ylabel)
    )
    .unwrap();
    if let Some(m) = marker {
        writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{T}" x2="{0:.1}" y2="{1}" stroke="gray" stroke-dasharray="4 3"/>"#,
            sx(m),
            H - B
        )
        .unwrap();
    }
    for (i, (name, color, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
        let ly = T + 16.0 + 18.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            W - R + 10.0,
            W - R + 30.0,
            W - R + 36.0,
            ly + 4.0,
            xml_escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}
