//! `report`: summary tables from a results directory's manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::run::{Manifest, Quantity, MANIFEST};

/// z for a two-sided 95% interval.
const Z95: f64 = 1.959_963_984_540_054;

pub fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    if !dir.is_dir() {
        return Err(CliError::report(format!("{} is not a directory", dir.display())));
    }
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| CliError::report(format!("no {MANIFEST} in {}; not a results directory", dir.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::report(format!("{}: {e}", path.display())))
}

/// `digits` significant figures; scientific outside 1e-3..1e6.
fn sig(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let e = v.abs().log10().floor() as i32;
    if !(-3..6).contains(&e) {
        format!("{:.*e}", digits - 1, v)
    } else {
        format!("{:.*}", (digits as i32 - 1 - e).max(0) as usize, v)
    }
}

fn fmt_quantity(q: &Quantity) -> String {
    match q.sigma {
        Some(s) => format!("{}={} ± {} {}", q.name, sig(q.value, 4), sig(s, 2), q.unit),
        None => format!("{}={} {}", q.name, sig(q.value, 4), q.unit),
    }
}

/// One line per experiment with its headline estimates.
pub fn text_table(m: &Manifest) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {}  config sha256 {}  seed {}",
        m.software,
        m.version,
        &m.config_sha256[..m.config_sha256.len().min(12)],
        m.seed.map_or_else(|| "-".into(), |s| s.to_string())
    );
    let w = m.experiments.iter().map(|e| e.name.len()).max().unwrap_or(0).max("experiment".len());
    let _ = writeln!(out, "{:<w$}  {:<12}  estimates", "experiment", "kind");
    for e in &m.experiments {
        let est: Vec<String> = e.summary.iter().map(fmt_quantity).collect();
        let est = if est.is_empty() { "-".to_string() } else { est.join("; ") };
        let _ = writeln!(out, "{:<w$}  {:<12}  {est}", e.name, e.kind);
        for n in &e.notes {
            let _ = writeln!(out, "{:<w$}  {:<12}  note: {n}", "", "");
        }
    }
    if m.experiments.is_empty() {
        let _ = writeln!(out, "(no experiments)");
    }
    out
}

/// Long-format CSV: one row per estimate, with a 95% normal interval.
pub fn write_csv(m: &Manifest, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["experiment", "kind", "quantity", "value", "sigma", "ci95_low", "ci95_high", "unit"])?;
    for e in &m.experiments {
        for q in &e.summary {
            let (s, lo, hi) = match q.sigma {
                Some(s) => (s.to_string(), (q.value - Z95 * s).to_string(), (q.value + Z95 * s).to_string()),
                None => (String::new(), String::new(), String::new()),
            };
            w.write_record([&e.name, &e.kind, &q.name, &q.value.to_string(), &s, &lo, &hi, &q.unit])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn report(dir: &Path, csv: Option<PathBuf>) -> Result<String, CliError> {
    let m = load_manifest(dir)?;
    write_csv(&m, &csv.unwrap_or_else(|| dir.join("summary.csv")))?;
    Ok(text_table(&m))
}
