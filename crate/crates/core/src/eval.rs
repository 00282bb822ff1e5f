//! Scoring estimated traffic maps against simulator ground truth.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::kpi::KpiRecord;
use crate::localizer::{localize, smooth, FusionConfig, Kpi, Localization, WeightMap};
use crate::radio::RadioMap;
use crate::traffic::GroundTruth;

/// Top-q% thresholds of the detection table, in percent of pixels.
pub const DEFAULT_THRESHOLDS: [f64; 8] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 70.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthField {
    /// Sessions generated per pixel.
    Access,
    /// Bits delivered per pixel.
    Elapsed,
}

impl TruthField {
    pub fn name(self) -> &'static str {
        match self {
            TruthField::Access => "access",
            TruthField::Elapsed => "elapsed",
        }
    }
}

/// Ground-truth field normalized to sum 1.
pub fn truth_map(truth: &GroundTruth, field: TruthField) -> Result<WeightMap> {
    let raw = match field {
        TruthField::Access => &truth.access,
        TruthField::Elapsed => &truth.elapsed,
    };
    let total: u64 = raw.iter().sum();
    if total == 0 {
        return Err(Error::Mismatch(format!(
            "ground truth `{}` is empty",
            field.name()
        )));
    }
    WeightMap::new(
        truth.grid,
        raw.iter().map(|&v| v as f64 / total as f64).collect(),
    )
}

fn check_grids(a: &WeightMap, b: &WeightMap) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::Mismatch(
            "estimate and truth use different grids".into(),
        ));
    }
    Ok(())
}

/// Total-variation distance `0.5 * sum |est - truth|` between the two
/// maps after normalization; the fraction of misplaced traffic.
pub fn l1_error(est: &WeightMap, truth: &WeightMap) -> Result<f64> {
    check_grids(est, truth)?;
    let (a, b) = (est.normalized(), truth.normalized());
    let s: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok((0.5 * s).min(1.0))
}

/// What a weight CDF accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CdfKind {
    /// Fraction of pixels with weight at most `v`.
    #[default]
    Pixels,
    /// Fraction of total weight carried by pixels with weight at most `v`.
    Mass,
}

/// Empirical CDF of per-pixel weights sampled at `n_points` evenly spaced
/// quantile levels. Each point is `(value, cumulative fraction)`; the last
/// point is `(max, 1)`.
pub fn weight_cdf(map: &WeightMap, n_points: usize, kind: CdfKind) -> Vec<(f64, f64)> {
    let mut v = map.values().to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 || n_points == 0 {
        return Vec::new();
    }
    let total: f64 = v.iter().sum();
    // prefix[k] = sum of the k smallest values.
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for x in &v {
        prefix.push(prefix.last().unwrap() + x);
    }
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n_points);
    for k in 1..=n_points {
        let rank = ((k as f64 / n_points as f64) * n as f64).ceil() as usize;
        let value = v[rank.clamp(1, n) - 1];
        // Count of entries <= value.
        let upto = v.partition_point(|x| *x <= value);
        let cum = match kind {
            CdfKind::Pixels => upto as f64 / n as f64,
            CdfKind::Mass if total > 0.0 => prefix[upto] / total,
            CdfKind::Mass => 1.0,
        };
        if out.last().is_some_and(|l| l.0 == value) {
            continue;
        }
        out.push((value, cum));
    }
    out
}

/// Kolmogorov distance between the per-pixel weight distributions of two
/// maps (pixel-count CDFs).
pub fn kolmogorov_distance(a: &WeightMap, b: &WeightMap) -> Result<f64> {
    check_grids(a, b)?;
    let (a, b) = (a.normalized(), b.normalized());
    let mut x = a.values().to_vec();
    let mut y = b.values().to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() || j < y.len() {
        let v = match (x.get(i), y.get(j)) {
            (Some(p), Some(q)) => p.min(*q),
            (Some(p), None) => *p,
            (None, Some(q)) => *q,
            (None, None) => break,
        };
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / n).abs());
    }
    Ok(d)
}

/// Pixel indices sorted by descending weight, lowest index first on ties.
fn ranking(map: &WeightMap) -> Vec<usize> {
    let w = map.values();
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx
}

/// Number of pixels in a top-q% set.
pub fn top_count(q_percent: f64, n_pixels: usize) -> usize {
    ((q_percent / 100.0 * n_pixels as f64).round() as usize).clamp(1, n_pixels)
}

/// For each q: `|top_q(truth) ∩ top_q(est)| / n_pixels * 100`.
pub fn detection(est: &WeightMap, truth: &WeightMap, thresholds: &[f64]) -> Result<Vec<f64>> {
    check_grids(est, truth)?;
    if let Some(q) = thresholds.iter().find(|q| !(**q > 0.0 && **q <= 100.0)) {
        return Err(Error::config(
            "evaluation.thresholds",
            format!("{q} outside (0, 100]"),
        ));
    }
    let n = truth.values().len();
    let (re, rt) = (ranking(est), ranking(truth));
    let mut in_est = vec![false; n];
    Ok(thresholds
        .iter()
        .map(|&q| {
            let k = top_count(q, n);
            in_est.iter_mut().for_each(|b| *b = false);
            for &p in &re[..k] {
                in_est[p] = true;
            }
            let hits = rt[..k].iter().filter(|&&p| in_est[p]).count();
            hits as f64 / n as f64 * 100.0
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRow {
    pub q_percent: f64,
    pub detected_all: f64,
    pub detected_ta_only: f64,
}

/// Detection table comparing the full estimate with the TA-only baseline.
pub fn detection_table(
    est: &WeightMap,
    ta_only: &WeightMap,
    truth: &WeightMap,
    thresholds: &[f64],
) -> Result<Vec<DetectionRow>> {
    let all = detection(est, truth, thresholds)?;
    let ta = detection(ta_only, truth, thresholds)?;
    Ok(thresholds
        .iter()
        .zip(all.iter().zip(&ta))
        .map(|(&q, (&a, &t))| DetectionRow {
            q_percent: q,
            detected_all: a,
            detected_ta_only: t,
        })
        .collect())
}

/// TA-only baseline: the normalized TA map through the same smoother.
pub fn ta_baseline(loc: &Localization, config: &FusionConfig) -> WeightMap {
    smooth(&loc.step(Kpi::Ta).normalized(), config.lambda_m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub kpis: Vec<Kpi>,
    pub l1_access: f64,
    pub l1_elapsed: f64,
}

/// Label of a KPI subset, e.g. `all`, `-LOAD`, `TA`.
pub fn subset_name(kpis: &[Kpi]) -> String {
    if Kpi::ALL.iter().all(|k| kpis.contains(k)) {
        return "all".into();
    }
    if kpis.len() == 4 {
        let missing = Kpi::ALL.iter().find(|k| !kpis.contains(k)).unwrap();
        return format!("-{}", missing.name());
    }
    kpis.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
}

/// All KPIs, each leave-one-out subset, and TA only.
pub fn standard_subsets() -> Vec<Vec<Kpi>> {
    let mut out = vec![Kpi::ALL.to_vec()];
    for drop in Kpi::ALL {
        out.push(Kpi::ALL.iter().copied().filter(|k| *k != drop).collect());
    }
    out.push(vec![Kpi::Ta]);
    out
}

/// Re-runs localization with each KPI subset and scores the smoothed map
/// against both truth fields. Coefficients outside a subset are zeroed;
/// the fused map is renormalized, so the remaining coefficients need no
/// rescaling.
pub fn ablate(
    kpis: &[KpiRecord],
    radio: &RadioMap,
    truth: &GroundTruth,
    config: &FusionConfig,
    subsets: &[Vec<Kpi>],
) -> Result<Vec<AblationRow>> {
    let access = truth_map(truth, TruthField::Access)?;
    let elapsed = truth_map(truth, TruthField::Elapsed)?;
    subsets
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Err(Error::config("ablation.subsets", "empty KPI subset"));
            }
            let cfg = config.restricted_to(s);
            if cfg.alpha.iter().all(|a| *a == 0.0) {
                return Err(Error::config(
                    "ablation.subsets",
                    format!("subset {} has only zero coefficients", subset_name(s)),
                ));
            }
            let loc = localize(kpis, radio, &cfg)?;
            Ok(AblationRow {
                name: subset_name(s),
                kpis: s.clone(),
                l1_access: l1_error(&loc.smoothed, &access)?,
                l1_elapsed: l1_error(&loc.smoothed, &elapsed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub l1_error_access: f64,
    pub l1_error_elapsed: f64,
    pub cdf_real_access: Vec<(f64, f64)>,
    pub cdf_real_elapsed: Vec<(f64, f64)>,
    pub cdf_est: Vec<(f64, f64)>,
    pub ks_access: f64,
    pub detection_access: Vec<DetectionRow>,
    pub detection_elapsed: Vec<DetectionRow>,
    pub ablation: Vec<AblationRow>,
}

/// Number of quantile levels in reported CDF curves.
pub const CDF_POINTS: usize = 200;

/// Scores an estimate (and its TA-only baseline) against both truth fields.
pub fn evaluate(
    est: &WeightMap,
    ta_only: &WeightMap,
    truth: &GroundTruth,
    thresholds: &[f64],
    cdf_kind: CdfKind,
) -> Result<EvalReport> {
    let access = truth_map(truth, TruthField::Access)?;
    let elapsed = truth_map(truth, TruthField::Elapsed)?;
    let est_n = est.normalized();
    Ok(EvalReport {
        l1_error_access: l1_error(&est_n, &access)?,
        l1_error_elapsed: l1_error(&est_n, &elapsed)?,
        cdf_real_access: weight_cdf(&access, CDF_POINTS, cdf_kind),
        cdf_real_elapsed: weight_cdf(&elapsed, CDF_POINTS, cdf_kind),
        cdf_est: weight_cdf(&est_n, CDF_POINTS, cdf_kind),
        ks_access: kolmogorov_distance(&est_n, &access)?,
        detection_access: detection_table(&est_n, ta_only, &access, thresholds)?,
        detection_elapsed: detection_table(&est_n, ta_only, &elapsed, thresholds)?,
        ablation: Vec::new(),
    })
}

impl EvalReport {
    /// Plain-text report, one section per table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[error]");
        let _ = writeln!(s, "l1_access = {:.6}", self.l1_error_access);
        let _ = writeln!(s, "l1_elapsed = {:.6}", self.l1_error_elapsed);
        let _ = writeln!(s, "ks_access = {:.6}", self.ks_access);
        for (name, rows) in [
            ("access", &self.detection_access),
            ("elapsed", &self.detection_elapsed),
        ] {
            let _ = writeln!(s, "\n[detection.{name}]");
            let _ = writeln!(s, "{:>8}  {:>12}  {:>12}", "q%", "all KPIs %", "TA only %");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:>8}  {:>12.4}  {:>12.4}",
                    r.q_percent, r.detected_all, r.detected_ta_only
                );
            }
        }
        if !self.ablation.is_empty() {
            s.push('\n');
            s.push_str(&ablation_text(&self.ablation));
        }
        s
    }
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[ablation]");
    let _ = writeln!(
        s,
        "{:<10}  {:>10}  {:>10}",
        "subset", "l1_access", "l1_elapsed"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10}  {:>10.6}  {:>10.6}",
            r.name, r.l1_access, r.l1_elapsed
        );
    }
    s
}

pub fn write_detection_csv<W: Write>(rows: &[DetectionRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "q_percent",
        "detected_all_percent",
        "detected_ta_only_percent",
    ])?;
    for r in rows {
        w.write_record([
            r.q_percent.to_string(),
            r.detected_all.to_string(),
            r.detected_ta_only.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv<W: Write>(curve: &[(f64, f64)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["value", "cum_fraction"])?;
    for (v, c) in curve {
        w.write_record([v.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subset", "l1_access", "l1_elapsed"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.l1_access.to_string(),
            r.l1_elapsed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &EvalReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    w.write_record(["l1_access", &report.l1_error_access.to_string()])?;
    w.write_record(["l1_elapsed", &report.l1_error_elapsed.to_string()])?;
    w.write_record(["ks_access", &report.ks_access.to_string()])?;
    w.flush()?;
    Ok(())
}
