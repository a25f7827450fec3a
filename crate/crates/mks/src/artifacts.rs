//! Text and image artifacts: metric CSVs, ablation tables, ERF heatmaps and
//! the `score label` AP fixture format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mks_core::erf::ErfMap;
use mks_core::metrics::ScoredPrediction;
use mks_core::train::{AblationReport, EpochMetrics};

use crate::error::{Error, Result};

/// `epoch,loss,ap` with one row per evaluated epoch (epoch 0 is the
/// initialization).
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,ap\n");
    for m in history {
        let _ = writeln!(s, "{},{:.8},{:.8}", m.epoch, m.loss, m.ap);
    }
    s
}

/// `variant,ap_seed<k>...,mean_ap,delta` with one row per variant.
pub fn ablation_csv(report: &AblationReport) -> String {
    let mut s = String::from("variant");
    for seed in &report.seeds {
        let _ = write!(s, ",ap_seed{seed}");
    }
    s.push_str(",mean_ap,delta\n");
    for v in &report.variants {
        s.push_str(v.variant.name());
        for ap in &v.per_seed {
            let _ = write!(s, ",{ap:.8}");
        }
        let _ = writeln!(s, ",{:.8},{:+.8}", v.mean_ap, v.delta);
    }
    s
}

/// Binary 8-bit PGM (`P5`), each value scaled by 255 / max and rounded.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm: value count does not match size");
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn erf_pgm(map: &ErfMap) -> Vec<u8> {
    pgm(map.width, map.height, &map.map)
}

/// Raw ERF map, one comma-separated image row per line.
pub fn erf_csv(map: &ErfMap) -> String {
    let mut s = String::new();
    for row in map.map.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Predictions and ground-truth count of an AP fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ApFixture {
    pub positives: usize,
    pub predictions: Vec<ScoredPrediction>,
}

/// Parses a `positives=<n>` header followed by `score label` lines
/// (label 0 or 1). Blank lines and `#` comments are skipped.
pub fn parse_ap_fixture(text: &str) -> Result<ApFixture> {
    const WHAT: &str = "AP fixture";
    let mut positives = None;
    let mut predictions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::format(WHAT, format!("line {}: {msg}", i + 1));
        if let Some(n) = line.strip_prefix("positives") {
            let n = n
                .trim_start()
                .strip_prefix('=')
                .ok_or_else(|| at("expected 'positives=<n>'".into()))?;
            if positives.is_some() {
                return Err(at("repeated positives header".into()));
            }
            positives = Some(n.trim().parse::<usize>().map_err(|e| at(format!("positives: {e}")))?);
            continue;
        }
        if positives.is_none() {
            return Err(at("the positives=<n> header must come first".into()));
        }
        let mut parts = line.split_whitespace();
        let (Some(score), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(at(format!("expected 'score label', got '{line}'")));
        };
        let score: f64 = score.parse().map_err(|e| at(format!("score '{score}': {e}")))?;
        if !score.is_finite() {
            return Err(at(format!("score '{score}' is not finite")));
        }
        let is_positive = match label {
            "1" => true,
            "0" => false,
            _ => return Err(at(format!("label must be 0 or 1, got '{label}'"))),
        };
        predictions.push(ScoredPrediction::new(score, is_positive));
    }
    let positives = positives.ok_or_else(|| Error::format(WHAT, "missing positives=<n> header"))?;
    let labelled = predictions.iter().filter(|p| p.is_positive).count();
    if labelled > positives {
        return Err(Error::format(
            WHAT,
            format!("{labelled} positive predictions exceed positives={positives}"),
        ));
    }
    Ok(ApFixture { positives, predictions })
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
