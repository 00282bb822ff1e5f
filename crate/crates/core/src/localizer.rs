//! KPI-driven traffic localization.
//!
//! Each KPI is projected onto the pixel grid through the radio map:
//!
//! 1. TA histogram mass is spread over the pixels of each timing-advance ring.
//! 2. AoA histogram mass is spread over the pixels of each angular wedge.
//! 3. Neighbour shares are spread over the pixels whose (best, second-best)
//!    server pair matches the reported pair.
//! 4. Load time is averaged over the candidate servers of each pixel whose
//!    load is close to the best server's load.
//! 5. The normalized AMT - HMT gap is placed on either the centre or the
//!    edge of each cell depending on a threshold.
//!
//! The five maps are normalized, combined with configurable coefficients
//! and smoothed with an exponential distance-decay kernel.
//!
//! Two combination rules are available. The linear rule is a convex
//! combination of the maps. The default log-linear rule pools the maps
//! multiplicatively inside each cell, so a pixel scores high only when the
//! KPIs agree on it, then rescales each cell back to its share of traffic.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelGrid;
use crate::kpi::{ta_bin, KpiRecord};
use crate::radio::{CellId, RadioMap};

/// The five KPI projections, in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Kpi {
    Ta,
    Aoa,
    Neighbor,
    Load,
    Throughput,
}

impl Kpi {
    pub const ALL: [Kpi; 5] = [Kpi::Ta, Kpi::Aoa, Kpi::Neighbor, Kpi::Load, Kpi::Throughput];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Kpi::Ta => "TA",
            Kpi::Aoa => "AoA",
            Kpi::Neighbor => "NB",
            Kpi::Load => "LOAD",
            Kpi::Throughput => "THR",
        }
    }
}

/// Non-negative per-pixel weights on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    grid: PixelGrid,
    w: Vec<f64>,
}

impl WeightMap {
    pub fn new(grid: PixelGrid, w: Vec<f64>) -> Result<Self> {
        if w.len() != grid.len() {
            return Err(Error::Mismatch(format!(
                "weight map has {} entries for a grid of {} pixels",
                w.len(),
                grid.len()
            )));
        }
        if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Mismatch(format!(
                "weight {v} is not a non-negative number"
            )));
        }
        Ok(WeightMap { grid, w })
    }

    pub fn zeros(grid: PixelGrid) -> Self {
        WeightMap {
            grid,
            w: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn into_values(self) -> Vec<f64> {
        self.w
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Scaled to sum to 1; an all-zero map stays all-zero. A map that
    /// already sums to 1 up to summation rounding is returned unchanged, so
    /// normalizing twice is the same as normalizing once.
    pub fn normalized(&self) -> Self {
        let s = self.sum();
        let rounding = 4.0 * f64::EPSILON * self.w.len() as f64;
        if s > 0.0 && (s - 1.0).abs() > rounding {
            WeightMap {
                grid: self.grid,
                w: self.w.iter().map(|v| v / s).collect(),
            }
        } else {
            self.clone()
        }
    }

    /// Pixel with the largest weight; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (p, v) in self.w.iter().enumerate() {
            if *v > self.w[best] {
                best = p;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(0.0, f64::max)
    }
}

pub const DEFAULT_ALPHA: [f64; 5] = [0.4, 1.0, 1.0, 0.3, 0.1];
pub const DEFAULT_POOLING_FLOOR: f64 = 0.1;

/// How step 5 treats edge pixels when the throughput gap is below the
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRule {
    /// Edge pixels take the gap itself.
    #[default]
    Literal,
    /// Edge pixels take one minus the gap.
    Complement,
}

/// How step 6 combines the per-KPI maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Convex combination of the normalized maps.
    Linear,
    /// Weighted geometric pooling within each cell, followed by rescaling
    /// of every cell to the coefficient-weighted mean of its masses in the
    /// session-scaled maps (TA, AoA, neighbour).
    #[default]
    LogLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Coefficients for TA, AoA, neighbour, load and throughput maps.
    pub alpha: [f64; 5],
    pub rule: FusionRule,
    /// Log-linear rule only: each map is floored at this fraction of its
    /// mean weight over the cell, so a zero in one map does not veto the
    /// others outright.
    pub pooling_floor: f64,
    /// Smoothing decay length, meters. 0 disables smoothing.
    pub lambda_m: f64,
    /// Largest load difference admitted into a pixel's candidate set.
    pub load_tolerance: f64,
    /// RSRP window below the best server for candidate cells, dB.
    pub candidate_margin_db: f64,
    /// Throughput-gap threshold separating centre from edge traffic.
    pub throughput_threshold: f64,
    /// Gap normalizer, bit/s. `None` uses the largest gap of the run.
    pub throughput_scale_bps: Option<f64>,
    /// Pixels beyond this fraction of the cell radius count as edge.
    pub edge_fraction: f64,
    pub edge_rule: EdgeRule,
    /// When set, candidates must also have a load series correlated with
    /// the best server's across periods at least this strongly.
    pub load_correlation_gate: Option<f64>,
    /// Merge this many consecutive TA bins before spreading.
    pub ta_rebucket: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: DEFAULT_ALPHA,
            rule: FusionRule::LogLinear,
            pooling_floor: DEFAULT_POOLING_FLOOR,
            lambda_m: 25.0,
            load_tolerance: 0.15,
            candidate_margin_db: 6.0,
            throughput_threshold: 0.5,
            throughput_scale_bps: None,
            edge_fraction: 0.6,
            edge_rule: EdgeRule::Literal,
            load_correlation_gate: None,
            ta_rebucket: 1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::config(
                "fusion.alpha",
                "coefficients must be finite and non-negative",
            ));
        }
        if self.alpha.iter().all(|a| *a == 0.0) {
            return Err(Error::config(
                "fusion.alpha",
                "at least one coefficient must be positive",
            ));
        }
        if !(self.pooling_floor > 0.0 && self.pooling_floor.is_finite()) {
            return Err(Error::config("fusion.pooling_floor", "must be positive"));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::config("fusion.lambda_m", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.load_tolerance) {
            return Err(Error::config("fusion.load_tolerance", "must lie in [0, 1]"));
        }
        if !(self.candidate_margin_db >= 0.0) {
            return Err(Error::config(
                "fusion.candidate_margin_db",
                "must be non-negative",
            ));
        }
        if !self.throughput_threshold.is_finite() {
            return Err(Error::config(
                "fusion.throughput_threshold",
                "must be finite",
            ));
        }
        if let Some(c) = self.throughput_scale_bps {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(
                    "fusion.throughput_scale_bps",
                    "must be positive",
                ));
            }
        }
        if !(self.edge_fraction > 0.0 && self.edge_fraction < 1.0) {
            return Err(Error::config("fusion.edge_fraction", "must lie in (0, 1)"));
        }
        if let Some(g) = self.load_correlation_gate {
            if !(-1.0..=1.0).contains(&g) {
                return Err(Error::config(
                    "fusion.load_correlation_gate",
                    "must lie in [-1, 1]",
                ));
            }
        }
        if self.ta_rebucket == 0 {
            return Err(Error::config("fusion.ta_rebucket", "must be at least 1"));
        }
        Ok(())
    }

    /// Same settings with the coefficients of KPIs outside `keep` zeroed.
    pub fn restricted_to(&self, keep: &[Kpi]) -> Self {
        let mut out = self.clone();
        for k in Kpi::ALL {
            if !keep.contains(&k) {
                out.alpha[k.index()] = 0.0;
            }
        }
        out
    }
}

/// Counters for KPI mass that could not be placed on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics {
    /// Pixels whose TA ring lies beyond their cell's histogram.
    pub ta_pixels_out_of_range: usize,
    /// Histogram mass (in sessions) landing in rings or wedges or server
    /// pairs that no best-server pixel of the cell occupies.
    pub ta_unplaced: f64,
    pub aoa_unplaced: f64,
    pub neighbor_unplaced: f64,
}

/// Records sorted by (period, cell) with ids resolved to radio-map indices.
struct Prepared<'a> {
    records: Vec<(usize, &'a KpiRecord)>,
    /// Best-server pixels of each cell.
    cell_pixels: Vec<Vec<usize>>,
}

fn prepare<'a>(kpis: &'a [KpiRecord], radio: &RadioMap) -> Result<Prepared<'a>> {
    let mut records = Vec::with_capacity(kpis.len());
    for r in kpis {
        let c = radio.cell_index(r.cell).ok_or_else(|| {
            Error::Mismatch(format!("KPI record references unknown cell {}", r.cell))
        })?;
        records.push((c, r));
    }
    // Fixed order so the output does not depend on the input order.
    records.sort_by_key(|(_, r)| (r.period, r.cell));
    let mut cell_pixels = vec![Vec::new(); radio.n_cells()];
    for p in 0..radio.grid().len() {
        cell_pixels[radio.best(p)].push(p);
    }
    Ok(Prepared {
        records,
        cell_pixels,
    })
}

/// Spreads `mass[k]` uniformly over the pixels assigned to key `k`.
/// Returns the mass whose key has no pixel.
fn spread<K: Ord + Copy>(w: &mut [f64], pixels: &[(usize, K)], mass: &BTreeMap<K, f64>) -> f64 {
    let mut count: BTreeMap<K, usize> = BTreeMap::new();
    for (_, k) in pixels {
        *count.entry(*k).or_default() += 1;
    }
    for &(p, k) in pixels {
        if let Some(m) = mass.get(&k) {
            w[p] += m / count[&k] as f64;
        }
    }
    mass.iter()
        .filter(|(k, m)| **m > 0.0 && !count.contains_key(k))
        .map(|(_, m)| m)
        .sum()
}

/// Step 1: timing-advance rings.
pub fn weight_ta(
    kpis: &[KpiRecord],
    radio: &RadioMap,
    config: &FusionConfig,
) -> Result<(WeightMap, Diagnostics)> {
    let prep = prepare(kpis, radio)?;
    let mut w = vec![0.0; radio.grid().len()];
    let mut diag = Diagnostics::default();
    let factor = config.ta_rebucket.max(1);
    for &(c, r) in &prep.records {
        if r.is_empty() {
            continue;
        }
        let width = r.ta_bin_width_m * factor as f64;
        let n_bins = r.ta_hist.len().div_ceil(factor);
        let mut mass = BTreeMap::new();
        for (k, h) in r.ta_hist.iter().enumerate() {
            *mass.entry(k / factor).or_insert(0.0) += r.n_sessions as f64 * h;
        }
        let mut keyed = Vec::with_capacity(prep.cell_pixels[c].len());
        for &p in &prep.cell_pixels[c] {
            let k = ta_bin(radio.dist(p), width);
            if k < n_bins {
                keyed.push((p, k));
            } else {
                diag.ta_pixels_out_of_range += 1;
            }
        }
        diag.ta_unplaced += spread(&mut w, &keyed, &mass);
    }
    Ok((WeightMap::new(*radio.grid(), w)?.normalized(), diag))
}

/// Step 2: angle-of-arrival wedges.
pub fn weight_aoa(kpis: &[KpiRecord], radio: &RadioMap) -> Result<(WeightMap, Diagnostics)> {
    let prep = prepare(kpis, radio)?;
    let mut w = vec![0.0; radio.grid().len()];
    let mut diag = Diagnostics::default();
    for &(c, r) in &prep.records {
        if r.is_empty() {
            continue;
        }
        let n_bins = r.aoa_hist.len();
        let mass: BTreeMap<usize, f64> = r
            .aoa_hist
            .iter()
            .enumerate()
            .map(|(k, h)| (k, r.n_sessions as f64 * h))
            .collect();
        let keyed: Vec<(usize, usize)> = prep.cell_pixels[c]
            .iter()
            .map(|&p| {
                let k = ((radio.bearing(p) / r.aoa_bin_width_deg).floor() as usize)
                    .min(n_bins.saturating_sub(1));
                (p, k)
            })
            .collect();
        diag.aoa_unplaced += spread(&mut w, &keyed, &mass);
    }
    Ok((WeightMap::new(*radio.grid(), w)?.normalized(), diag))
}

/// Step 3: neighbour (second-best server) bands.
pub fn weight_neighbor(kpis: &[KpiRecord], radio: &RadioMap) -> Result<(WeightMap, Diagnostics)> {
    let prep = prepare(kpis, radio)?;
    let mut w = vec![0.0; radio.grid().len()];
    let mut diag = Diagnostics::default();
    for &(c, r) in &prep.records {
        if r.is_empty() {
            continue;
        }
        let mass: BTreeMap<CellId, f64> = r
            .neighbors
            .shares
            .iter()
            .map(|(id, s)| (*id, r.n_sessions as f64 * s))
            .collect();
        let keyed: Vec<(usize, CellId)> = prep.cell_pixels[c]
            .iter()
            .map(|&p| (p, radio.second_best_id(p)))
            .collect();
        diag.neighbor_unplaced += spread(&mut w, &keyed, &mass);
    }
    Ok((WeightMap::new(*radio.grid(), w)?.normalized(), diag))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Step 4: load time averaged over each pixel's candidate servers.
///
/// The candidate set of pixel `p` holds every cell within
/// `candidate_margin_db` of the best server's RSRP whose load is within
/// `load_tolerance` of the best server's load. Periods are averaged.
pub fn weight_load(
    kpis: &[KpiRecord],
    radio: &RadioMap,
    config: &FusionConfig,
) -> Result<WeightMap> {
    let prep = prepare(kpis, radio)?;
    let n_cells = radio.n_cells();
    let mut by_period: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
    for &(c, r) in &prep.records {
        by_period
            .entry(r.period)
            .or_insert_with(|| vec![None; n_cells])[c] = Some(r.load_time);
    }
    let periods: Vec<&Vec<Option<f64>>> = by_period.values().collect();
    // Load series per cell over the periods it reported in.
    let series = |c: usize| -> Vec<f64> { periods.iter().map(|l| l[c].unwrap_or(0.0)).collect() };
    let correlated: Option<HashMap<(usize, usize), bool>> =
        config.load_correlation_gate.map(|gate| {
            let s: Vec<Vec<f64>> = (0..n_cells).map(series).collect();
            let mut m = HashMap::new();
            for a in 0..n_cells {
                for b in 0..n_cells {
                    // Constant series carry no correlation evidence either way.
                    let ok = a == b || pearson(&s[a], &s[b]).is_none_or(|r| r >= gate);
                    m.insert((a, b), ok);
                }
            }
            m
        });

    let n_pix = radio.grid().len();
    let margin = config.candidate_margin_db;
    let eps = config.load_tolerance;
    let w: Vec<f64> = (0..n_pix)
        .into_par_iter()
        .map(|p| {
            let b = radio.best(p);
            let floor = radio.rsrp(p, b) - margin;
            let mut acc = 0.0;
            for loads in &periods {
                let Some(lb) = loads[b] else { continue };
                let (mut sum, mut n) = (0.0, 0usize);
                for (x, lx) in loads.iter().enumerate() {
                    let Some(lx) = *lx else { continue };
                    let admitted = x == b
                        || (radio.rsrp(p, x) >= floor
                            && (lx - lb).abs() <= eps
                            && correlated.as_ref().is_none_or(|m| m[&(x, b)]));
                    if admitted {
                        sum += lx;
                        n += 1;
                    }
                }
                acc += sum / n as f64;
            }
            if periods.is_empty() {
                0.0
            } else {
                acc / periods.len() as f64
            }
        })
        .collect();
    Ok(WeightMap::new(*radio.grid(), w)?.normalized())
}

/// 95th percentile (nearest rank) of best-server distance over each
/// cell's pixels.
pub fn cell_radii(radio: &RadioMap) -> Vec<f64> {
    let mut d: Vec<Vec<f64>> = vec![Vec::new(); radio.n_cells()];
    for p in 0..radio.grid().len() {
        d[radio.best(p)].push(radio.dist(p));
    }
    d.into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return 0.0;
            }
            v.sort_by(f64::total_cmp);
            let rank = (0.95 * v.len() as f64).ceil() as usize;
            v[rank.clamp(1, v.len()) - 1]
        })
        .collect()
}

/// Step 5: throughput-gap placement on cell centre or edge.
pub fn weight_throughput_gap(
    kpis: &[KpiRecord],
    radio: &RadioMap,
    config: &FusionConfig,
) -> Result<WeightMap> {
    let prep = prepare(kpis, radio)?;
    let scale = match config.throughput_scale_bps {
        Some(c) => c,
        None => prep
            .records
            .iter()
            .filter_map(|(_, r)| r.throughput_gap())
            .fold(0.0, f64::max),
    };
    let radii = cell_radii(radio);
    let theta = config.throughput_threshold;
    let n_periods = prep
        .records
        .iter()
        .map(|(_, r)| r.period)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mut w = vec![0.0; radio.grid().len()];
    if scale > 0.0 {
        for &(c, r) in &prep.records {
            let Some(gap) = r.throughput_gap() else {
                continue;
            };
            let d = (gap / scale).clamp(0.0, 1.0);
            let edge_value = match config.edge_rule {
                EdgeRule::Literal => d,
                EdgeRule::Complement => 1.0 - d,
            };
            let (center_w, edge_w) = if d >= theta {
                (d, 0.0)
            } else {
                (0.0, edge_value)
            };
            let boundary = config.edge_fraction * radii[c];
            for &p in &prep.cell_pixels[c] {
                w[p] += if radio.dist(p) > boundary {
                    edge_w
                } else {
                    center_w
                };
            }
        }
        if n_periods > 0 {
            w.iter_mut().for_each(|v| *v /= n_periods as f64);
        }
    }
    Ok(WeightMap::new(*radio.grid(), w)?.normalized())
}

/// Step 6: combines the step maps according to `config.rule`.
///
/// Both rules depend on the coefficients only up to a common positive
/// factor. With a single positive coefficient the result is that map,
/// normalized.
pub fn fuse(maps: &[WeightMap; 5], radio: &RadioMap, config: &FusionConfig) -> Result<WeightMap> {
    if config.alpha.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::config(
            "fusion.alpha",
            "coefficients must be finite and non-negative",
        ));
    }
    if config.alpha.iter().all(|a| *a == 0.0) {
        return Err(Error::config(
            "fusion.alpha",
            "at least one coefficient must be positive",
        ));
    }
    let grid = *maps[0].grid();
    if maps.iter().any(|m| m.grid() != &grid) || radio.grid() != &grid {
        return Err(Error::Mismatch(
            "weight maps and radio map use different grids".into(),
        ));
    }
    let normalized: Vec<WeightMap> = maps.iter().map(WeightMap::normalized).collect();
    let active: Vec<usize> = (0..5).filter(|&k| config.alpha[k] > 0.0).collect();
    if let [only] = active[..] {
        return Ok(normalized[only].clone());
    }
    let w = match config.rule {
        FusionRule::Linear => {
            let mut w = vec![0.0; grid.len()];
            for &k in &active {
                let a = config.alpha[k];
                for (o, v) in w.iter_mut().zip(normalized[k].values()) {
                    *o += a * v;
                }
            }
            w
        }
        FusionRule::LogLinear => log_linear(&normalized, &active, radio, config),
    };
    Ok(WeightMap::new(grid, w)?.normalized())
}

fn log_linear(
    maps: &[WeightMap],
    active: &[usize],
    radio: &RadioMap,
    config: &FusionConfig,
) -> Vec<f64> {
    let n = radio.grid().len();
    let n_cells = radio.n_cells();
    let alpha = &config.alpha;
    let a_max = active.iter().map(|&k| alpha[k]).fold(0.0, f64::max);
    // Only the session-scaled maps (TA, AoA, neighbour) measure how traffic
    // divides between cells; load and throughput maps scale with cell area
    // and only shape the distribution inside a cell.
    let scaled: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&k| k < Kpi::Load.index())
        .collect();
    let mass_from = if scaled.is_empty() {
        active
    } else {
        &scaled[..]
    };
    let a_sum: f64 = mass_from.iter().map(|&k| alpha[k]).sum();

    let mut pixels = vec![0usize; n_cells];
    let mut cell_mass = vec![[0.0; 5]; n_cells];
    for p in 0..n {
        let c = radio.best(p);
        pixels[c] += 1;
        for &k in active {
            cell_mass[c][k] += maps[k].w[p];
        }
    }

    // Log-linear pooling per pixel. A map with no mass in a cell carries no
    // information about how traffic is spread inside it and abstains.
    let mut w: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|p| {
            let c = radio.best(p);
            let mut log_w = 0.0;
            let mut any = false;
            for &k in active {
                let m = cell_mass[c][k];
                if m > 0.0 {
                    let floor = config.pooling_floor * m / pixels[c] as f64;
                    log_w += alpha[k] / a_max * (maps[k].w[p] + floor).ln();
                    any = true;
                }
            }
            if any {
                log_w.exp()
            } else {
                0.0
            }
        })
        .collect();

    // Each cell keeps the coefficient-weighted mean of its masses.
    let mut pooled = vec![0.0; n_cells];
    for p in 0..n {
        pooled[radio.best(p)] += w[p];
    }
    let scale: Vec<f64> = (0..n_cells)
        .map(|c| {
            let target: f64 = mass_from
                .iter()
                .map(|&k| alpha[k] * cell_mass[c][k])
                .sum::<f64>()
                / a_sum;
            if pooled[c] > 0.0 {
                target / pooled[c]
            } else {
                0.0
            }
        })
        .collect();
    for (p, v) in w.iter_mut().enumerate() {
        *v *= scale[radio.best(p)];
    }
    w
}

/// Index into `[0, n)` of position `i` under half-sample symmetric
/// extension (mirror about the outer pixel edges).
fn fold(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Exponential distance-decay smoother, `K(d) = exp(-d / lambda)`,
/// truncated at `4 lambda`.
///
/// The grid is mirrored at its borders, which makes the smoothing operator
/// symmetric and doubly stochastic: total mass is preserved, a uniform map
/// is a fixed point, and no pixel can exceed the input maximum.
pub fn smooth(map: &WeightMap, lambda_m: f64) -> WeightMap {
    let grid = *map.grid();
    let res = grid.resolution();
    if !(lambda_m > 0.0) {
        return map.clone();
    }
    let cutoff = 4.0 * lambda_m;
    let r = (cutoff / res).floor() as i64;
    if r == 0 {
        return map.clone();
    }
    let mut kernel = Vec::new();
    for dj in -r..=r {
        for di in -r..=r {
            let d = res * ((di * di + dj * dj) as f64).sqrt();
            if d <= cutoff {
                kernel.push((di, dj, (-d / lambda_m).exp()));
            }
        }
    }
    let z: f64 = kernel.iter().map(|k| k.2).sum();
    let (w, h) = (grid.width(), grid.height());
    let src = map.values();
    let out: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let (i, j) = grid.coords(p);
            let mut acc = 0.0;
            for &(di, dj, k) in &kernel {
                let q = fold(j as i64 + dj, h) * w + fold(i as i64 + di, w);
                acc += k * src[q];
            }
            acc / z
        })
        .collect();
    WeightMap { grid, w: out }
}

/// All intermediate and final maps of one localization run.
#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Normalized step maps, indexed by [`Kpi::index`].
    pub steps: [WeightMap; 5],
    pub fused: WeightMap,
    pub smoothed: WeightMap,
    pub diagnostics: Diagnostics,
}

impl Localization {
    pub fn step(&self, k: Kpi) -> &WeightMap {
        &self.steps[k.index()]
    }

    pub fn grid(&self) -> &PixelGrid {
        self.fused.grid()
    }

    /// Writes `i,j,x,y,w1,w2,w3,w4,w5,fused,smoothed`, one row per pixel.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let grid = *self.grid();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(WEIGHTS_HEADER)?;
        for p in 0..grid.len() {
            let (i, j) = grid.coords(p);
            let c = grid.center(i, j);
            let mut row = vec![
                i.to_string(),
                j.to_string(),
                c.x.to_string(),
                c.y.to_string(),
            ];
            row.extend(self.steps.iter().map(|m| m.values()[p].to_string()));
            row.push(self.fused.values()[p].to_string());
            row.push(self.smoothed.values()[p].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const WEIGHTS_HEADER: [&str; 11] = [
    "i", "j", "x", "y", "w1", "w2", "w3", "w4", "w5", "fused", "smoothed",
];

/// Reads one column of a weight-map file onto `grid`.
pub fn read_weights_column<R: Read>(
    input: R,
    path: &str,
    grid: PixelGrid,
    column: &str,
) -> Result<WeightMap> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_string(),
            source: e,
        })?
        .clone();
    if header.iter().ne(WEIGHTS_HEADER.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            "header",
            format!("expected `{}`", WEIGHTS_HEADER.join(",")),
        ));
    }
    let col = WEIGHTS_HEADER
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| Error::config("evaluation.column", format!("no column `{column}`")))?;
    let mut w = vec![0.0; grid.len()];
    let mut seen = vec![false; grid.len()];
    for (n, rec) in rdr.records().enumerate() {
        let row = n + 2;
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_string(),
            source: e,
        })?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| Error::parse(path, row, WEIGHTS_HEADER[k], "missing"))
        };
        let idx = |k: usize| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::parse(path, row, WEIGHTS_HEADER[k], "not a pixel index"))
        };
        let (i, j) = (idx(0)?, idx(1)?);
        if i >= grid.width() || j >= grid.height() {
            return Err(Error::Mismatch(format!(
                "{path}: pixel ({i}, {j}) lies outside the grid"
            )));
        }
        let v: f64 = field(col)?
            .parse()
            .map_err(|_| Error::parse(path, row, column, "not a number"))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::parse(
                path,
                row,
                column,
                format!("{v} is not a non-negative weight"),
            ));
        }
        let p = grid.index(i, j);
        if std::mem::replace(&mut seen[p], true) {
            return Err(Error::parse(
                path,
                row,
                "i",
                format!("pixel ({i}, {j}) listed twice"),
            ));
        }
        w[p] = v;
    }
    if let Some(p) = seen.iter().position(|s| !s) {
        let (i, j) = grid.coords(p);
        return Err(Error::Mismatch(format!("{path}: pixel ({i}, {j}) missing")));
    }
    WeightMap::new(grid, w)
}

/// Runs steps 1 to 6 and the smoother.
pub fn localize(
    kpis: &[KpiRecord],
    radio: &RadioMap,
    config: &FusionConfig,
) -> Result<Localization> {
    config.validate()?;
    let (ta, d1) = weight_ta(kpis, radio, config)?;
    let (aoa, d2) = weight_aoa(kpis, radio)?;
    let (nb, d3) = weight_neighbor(kpis, radio)?;
    let load = weight_load(kpis, radio, config)?;
    let thr = weight_throughput_gap(kpis, radio, config)?;
    let steps = [ta, aoa, nb, load, thr];
    let fused = fuse(&steps, radio, config)?;
    let smoothed = smooth(&fused, config.lambda_m);
    Ok(Localization {
        steps,
        fused,
        smoothed,
        diagnostics: Diagnostics {
            ta_pixels_out_of_range: d1.ta_pixels_out_of_range,
            ta_unplaced: d1.ta_unplaced,
            aoa_unplaced: d2.aoa_unplaced,
            neighbor_unplaced: d3.neighbor_unplaced,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::kpi::{BinSpec, NeighborDist, TA_BIN_WIDTH_M};
    use crate::radio::{build_radio_map, tri_sector_cells, Antenna, Cell, DEFAULT_TX_POWER_DBM};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn omni(id: u32, x: f64, y: f64) -> Cell {
        Cell {
            id: CellId(id),
            site: Point::new(x, y),
            antenna: Antenna::Omni,
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
        }
    }

    /// Two omni cells 1.5 km apart; cell 0's coverage reaches well past
    /// four TA rings in every direction.
    fn pair() -> RadioMap {
        let grid = PixelGrid::new(Point::new(-500.0, -500.0), 80, 40, 25.0).unwrap();
        build_radio_map(grid, &[omni(0, 0.0, 0.0), omni(1, 1500.0, 0.0)], None).unwrap()
    }

    fn bins(aoa: f64) -> BinSpec {
        BinSpec::covering(2500.0, aoa).unwrap()
    }

    fn record(cell: u32, n: u64, spec: &BinSpec) -> KpiRecord {
        let mut r = KpiRecord::idle(CellId(cell), 0, spec);
        r.n_sessions = n;
        r.ta_hist[0] = 1.0;
        r.aoa_hist[0] = 1.0;
        r.load_time = 0.5;
        r.amt_bps = Some(1e6);
        r.hmt_bps = Some(1e6);
        r
    }

    fn mass_where(map: &WeightMap, pred: impl Fn(usize) -> bool) -> f64 {
        (0..map.values().len())
            .filter(|&p| pred(p))
            .map(|p| map.values()[p])
            .sum()
    }

    fn cfg() -> FusionConfig {
        FusionConfig::default()
    }

    #[test]
    fn normalizing_twice_changes_nothing() {
        let g = PixelGrid::new(Point::new(0.0, 0.0), 7, 5, 25.0).unwrap();
        let m = WeightMap::new(
            g,
            (0..35)
                .map(|k| (k as f64 * 0.37).sin().abs() / 3.0)
                .collect(),
        )
        .unwrap();
        let once = m.normalized();
        assert_relative_eq!(once.sum(), 1.0, epsilon = 1e-12);
        assert_eq!(once.normalized(), once);
        assert_eq!(WeightMap::zeros(g).normalized(), WeightMap::zeros(g));
    }

    #[test]
    fn ta_point_mass_fills_one_ring() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 10, &spec);
        r.ta_hist = vec![0.0; spec.ta_bins];
        r.ta_hist[3] = 1.0;
        let (w, _) = weight_ta(&[r, KpiRecord::idle(CellId(1), 0, &spec)], &radio, &cfg()).unwrap();
        let ring = |p: usize| radio.best(p) == 0 && ta_bin(radio.dist(p), TA_BIN_WIDTH_M) == 3;
        let n_ring = (0..radio.grid().len()).filter(|&p| ring(p)).count();
        assert!(n_ring > 0);
        for p in 0..radio.grid().len() {
            let expected = if ring(p) { 1.0 / n_ring as f64 } else { 0.0 };
            assert_relative_eq!(w.values()[p], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn ta_ring_masses_follow_the_histogram() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 10, &spec);
        r.ta_hist = vec![0.0; spec.ta_bins];
        r.ta_hist[..4].copy_from_slice(&[0.3, 0.2, 0.4, 0.1]);
        let (w, _) = weight_ta(&[r], &radio, &cfg()).unwrap();
        for (k, share) in [0.3, 0.2, 0.4, 0.1].into_iter().enumerate() {
            let ring = |p: usize| radio.best(p) == 0 && ta_bin(radio.dist(p), TA_BIN_WIDTH_M) == k;
            assert_relative_eq!(mass_where(&w, ring), share, epsilon = 1e-12);
            // Uniform within the ring.
            let vals: Vec<f64> = (0..radio.grid().len())
                .filter(|&p| ring(p))
                .map(|p| w.values()[p])
                .collect();
            assert!(vals.iter().all(|v| (v - vals[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn ta_cells_are_scaled_by_session_count() {
        let radio = pair();
        let spec = bins(10.0);
        let (w, _) = weight_ta(
            &[record(0, 30, &spec), record(1, 10, &spec)],
            &radio,
            &cfg(),
        )
        .unwrap();
        assert_relative_eq!(
            mass_where(&w, |p| radio.best(p) == 0),
            0.75,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ta_rings_without_pixels_are_reported() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 10, &spec);
        r.ta_hist = vec![0.0; spec.ta_bins];
        r.ta_hist[0] = 0.5;
        r.ta_hist[spec.ta_bins - 1] = 0.5;
        let (w, diag) = weight_ta(&[r], &radio, &cfg()).unwrap();
        assert_relative_eq!(diag.ta_unplaced, 5.0, epsilon = 1e-12);
        assert_relative_eq!(w.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ta_rebucketing_merges_rings() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 10, &spec);
        r.ta_hist = vec![0.0; spec.ta_bins];
        r.ta_hist[0] = 0.5;
        r.ta_hist[1] = 0.5;
        let mut c = cfg();
        c.ta_rebucket = 2;
        let (w, _) = weight_ta(&[r], &radio, &c).unwrap();
        let disk = |p: usize| radio.best(p) == 0 && radio.dist(p) < 2.0 * TA_BIN_WIDTH_M;
        let n = (0..radio.grid().len()).filter(|&p| disk(p)).count() as f64;
        for p in 0..radio.grid().len() {
            assert_relative_eq!(
                w.values()[p],
                if disk(p) { 1.0 / n } else { 0.0 },
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn aoa_point_mass_fills_one_wedge() {
        let radio = pair();
        let spec = bins(30.0);
        let mut r = record(0, 10, &spec);
        r.aoa_hist = vec![0.0; 12];
        r.aoa_hist[4] = 1.0;
        let (w, _) = weight_aoa(&[r], &radio).unwrap();
        for p in 0..radio.grid().len() {
            let inside = radio.best(p) == 0 && (120.0..150.0).contains(&radio.bearing(p));
            assert_eq!(w.values()[p] > 0.0, inside, "pixel {p}");
        }
    }

    #[test]
    fn aoa_wedge_masses_follow_the_histogram() {
        let radio = pair();
        let spec = bins(120.0);
        let mut r = record(0, 10, &spec);
        r.aoa_hist = vec![0.3, 0.4, 0.3];
        let (w, _) = weight_aoa(&[r], &radio).unwrap();
        for (k, share) in [0.3, 0.4, 0.3].into_iter().enumerate() {
            let lo = 120.0 * k as f64;
            let wedge =
                |p: usize| radio.best(p) == 0 && (lo..lo + 120.0).contains(&radio.bearing(p));
            assert_relative_eq!(mass_where(&w, wedge), share, epsilon = 1e-12);
        }
    }

    #[test]
    fn neighbor_in_two_cell_network_reduces_to_session_shares() {
        let radio = pair();
        let spec = bins(10.0);
        let mut a = record(0, 30, &spec);
        a.neighbors = NeighborDist {
            shares: [(CellId(1), 1.0)].into(),
            unreported: 0.0,
        };
        let mut b = record(1, 10, &spec);
        b.neighbors = NeighborDist {
            shares: [(CellId(0), 1.0)].into(),
            unreported: 0.0,
        };
        let (w, _) = weight_neighbor(&[a, b], &radio).unwrap();
        let n0 = (0..radio.grid().len())
            .filter(|&p| radio.best(p) == 0)
            .count() as f64;
        let n1 = radio.grid().len() as f64 - n0;
        for p in 0..radio.grid().len() {
            let expected = if radio.best(p) == 0 {
                0.75 / n0
            } else {
                0.25 / n1
            };
            assert_relative_eq!(w.values()[p], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn neighbor_mass_lands_on_the_reported_band() {
        let sites = crate::radio::hex_sites(3, 500.0);
        let cells = tri_sector_cells(&sites, 30.0, 65.0, 46.0);
        let grid = PixelGrid::covering(&sites, 300.0, 25.0).unwrap();
        let radio = build_radio_map(grid, &cells, None).unwrap();
        let c = 0;
        let target = (0..grid.len())
            .filter(|&p| radio.best(p) == c)
            .map(|p| radio.second_best_id(p))
            .max()
            .unwrap();
        let spec = bins(10.0);
        let mut r = record(radio.cells()[c].id.0, 10, &spec);
        r.neighbors = NeighborDist {
            shares: [(target, 1.0)].into(),
            unreported: 0.0,
        };
        let (w, d) = weight_neighbor(&[r], &radio).unwrap();
        assert_eq!(d.neighbor_unplaced, 0.0);
        for p in 0..grid.len() {
            let band = radio.best(p) == c && radio.second_best_id(p) == target;
            assert_eq!(w.values()[p] > 0.0, band);
        }
    }

    #[test]
    fn equal_loads_give_a_flat_load_map() {
        let radio = pair();
        let spec = bins(10.0);
        let w = weight_load(&[record(0, 1, &spec), record(1, 1, &spec)], &radio, &cfg()).unwrap();
        let v = w.values()[0];
        assert!(w.values().iter().all(|x| (x - v).abs() < 1e-15));
    }

    /// Hand-computed candidate-set average for omni cells at 46 dBm on a
    /// line, straight from the path-loss formula.
    fn load_oracle(sites_x: &[f64], loads: &[f64], x: f64, cfg: &FusionConfig) -> f64 {
        let rsrp: Vec<f64> = sites_x
            .iter()
            .map(|s| 46.0 - (128.1 + 37.6 * ((s - x).abs().max(10.0) / 1000.0).log10()))
            .collect();
        let b = (0..rsrp.len())
            .max_by(|&a, &b| rsrp[a].total_cmp(&rsrp[b]))
            .unwrap();
        let set: Vec<f64> = (0..rsrp.len())
            .filter(|&k| {
                k == b
                    || (rsrp[k] >= rsrp[b] - cfg.candidate_margin_db
                        && (loads[k] - loads[b]).abs() <= cfg.load_tolerance)
            })
            .map(|k| loads[k])
            .collect();
        set.iter().sum::<f64>() / set.len() as f64
    }

    #[test]
    fn load_candidate_sets_match_hand_computation_on_three_cells() {
        // Pixel row centred on the line through the sites.
        let grid = PixelGrid::new(Point::new(-250.0, -12.5), 100, 1, 25.0).unwrap();
        let xs = [0.0, 1000.0, 2000.0];
        let cells: Vec<Cell> = xs
            .iter()
            .enumerate()
            .map(|(k, x)| omni(k as u32, *x, 0.0))
            .collect();
        let radio = build_radio_map(grid, &cells, None).unwrap();
        let spec = bins(10.0);
        let probes = [112.5, 462.5, 537.5, 1462.5, 1987.5];
        for loads in [[0.1, 0.9, 0.1], [0.9, 0.8, 0.1], [0.5, 0.5, 0.5]] {
            let recs: Vec<KpiRecord> = (0..3)
                .map(|k| {
                    let mut r = record(k, 1, &spec);
                    r.load_time = loads[k as usize];
                    r
                })
                .collect();
            let w = weight_load(&recs, &radio, &cfg()).unwrap();
            let raw: Vec<f64> = probes
                .iter()
                .map(|&x| load_oracle(&xs, &loads, x, &cfg()))
                .collect();
            let total: f64 = (0..grid.len())
                .map(|p| load_oracle(&xs, &loads, grid.center_of(p).x, &cfg()))
                .sum();
            for (x, expected) in probes.iter().zip(&raw) {
                let p = grid.locate_index(Point::new(*x, 0.0)).unwrap();
                assert_relative_eq!(w.values()[p], expected / total, max_relative = 1e-12);
            }
        }
        // Two adjacent busy cells average across their border; an isolated
        // busy cell keeps its own value there.
        let both = [0.9, 0.8, 0.1];
        assert_relative_eq!(
            load_oracle(&xs, &both, 462.5, &cfg()),
            0.85,
            epsilon = 1e-12
        );
        let lone = [0.1, 0.9, 0.1];
        assert_relative_eq!(load_oracle(&xs, &lone, 537.5, &cfg()), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn load_correlation_gate_drops_uncorrelated_candidates() {
        let radio = pair();
        let spec = bins(10.0);
        let mut recs = Vec::new();
        for (period, (l0, l1)) in [(0.5, 0.6), (0.6, 0.5), (0.5, 0.6)].into_iter().enumerate() {
            for (c, l) in [(0, l0), (1, l1)] {
                let mut r = record(c, 1, &spec);
                r.period = period as u32;
                r.load_time = l;
                recs.push(r);
            }
        }
        let border = radio.grid().locate_index(Point::new(737.5, 12.5)).unwrap();
        let interior = radio.grid().locate_index(Point::new(12.5, 12.5)).unwrap();
        let open = weight_load(&recs, &radio, &cfg()).unwrap();
        let mut gated = cfg();
        gated.load_correlation_gate = Some(0.7);
        let gated = weight_load(&recs, &radio, &gated).unwrap();
        // Without the gate the border pixel mixes both cells' loads.
        let ratio = |w: &WeightMap| w.values()[border] / w.values()[interior];
        assert!((ratio(&open) - 1.0).abs() > 1e-6);
        assert_relative_eq!(ratio(&gated), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_rates_leave_the_throughput_map_empty() {
        let radio = pair();
        let spec = bins(10.0);
        let w = weight_throughput_gap(&[record(0, 5, &spec), record(1, 5, &spec)], &radio, &cfg())
            .unwrap();
        assert_eq!(w.sum(), 0.0);
    }

    #[test]
    fn gap_at_threshold_goes_to_the_centre() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 5, &spec);
        r.amt_bps = Some(2e6);
        r.hmt_bps = Some(1e6);
        let mut c = cfg();
        c.throughput_scale_bps = Some(2e6);
        let w = weight_throughput_gap(&[r], &radio, &c).unwrap();
        let boundary = c.edge_fraction * cell_radii(&radio)[0];
        let centre = |p: usize| radio.best(p) == 0 && radio.dist(p) <= boundary;
        let n = (0..radio.grid().len()).filter(|&p| centre(p)).count() as f64;
        for p in 0..radio.grid().len() {
            assert_relative_eq!(
                w.values()[p],
                if centre(p) { 1.0 / n } else { 0.0 },
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn small_gap_goes_to_the_edge_under_both_rules() {
        let radio = pair();
        let spec = bins(10.0);
        let mut r = record(0, 5, &spec);
        r.amt_bps = Some(2e6);
        r.hmt_bps = Some(1.5e6);
        for rule in [EdgeRule::Literal, EdgeRule::Complement] {
            let mut c = cfg();
            c.throughput_scale_bps = Some(2e6);
            c.edge_rule = rule;
            let w = weight_throughput_gap(std::slice::from_ref(&r), &radio, &c).unwrap();
            let boundary = c.edge_fraction * cell_radii(&radio)[0];
            for p in 0..radio.grid().len() {
                let edge = radio.best(p) == 0 && radio.dist(p) > boundary;
                assert_eq!(w.values()[p] > 0.0, edge);
            }
        }
    }

    #[test]
    fn cell_radius_is_the_95th_percentile_distance() {
        let radio = pair();
        let mut d: Vec<f64> = (0..radio.grid().len())
            .filter(|&p| radio.best(p) == 1)
            .map(|p| radio.dist(p))
            .collect();
        d.sort_by(f64::total_cmp);
        let k = (0.95 * d.len() as f64).ceil() as usize - 1;
        assert_eq!(cell_radii(&radio)[1], d[k]);
    }

    fn random_maps(radio: &RadioMap, seed: u64) -> [WeightMap; 5] {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| {
            let w = (0..radio.grid().len())
                .map(|_| rng.random::<f64>())
                .collect();
            WeightMap::new(*radio.grid(), w).unwrap().normalized()
        })
    }

    fn with_rule(rule: FusionRule, alpha: [f64; 5]) -> FusionConfig {
        FusionConfig {
            rule,
            alpha,
            ..cfg()
        }
    }

    #[test]
    fn single_coefficient_projects_onto_that_map() {
        let radio = pair();
        let maps = random_maps(&radio, 1);
        for rule in [FusionRule::Linear, FusionRule::LogLinear] {
            for k in 0..5 {
                let mut alpha = [0.0; 5];
                alpha[k] = 2.5;
                let fused = fuse(&maps, &radio, &with_rule(rule, alpha)).unwrap();
                assert_eq!(fused, maps[k].normalized());
            }
        }
    }

    #[test]
    fn linear_fusion_of_identical_maps_is_that_map() {
        let radio = pair();
        let m = random_maps(&radio, 2)[0].clone();
        let maps = std::array::from_fn(|_| m.clone());
        let fused = fuse(
            &maps,
            &radio,
            &with_rule(FusionRule::Linear, [0.1, 0.7, 0.3, 0.0, 2.0]),
        )
        .unwrap();
        for (a, b) in fused.values().iter().zip(m.values()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn linear_fusion_splits_disjoint_supports_evenly() {
        let radio = pair();
        let n = radio.grid().len();
        let maps: [WeightMap; 5] = std::array::from_fn(|k| {
            let w = (0..n)
                .map(|p| if p % 5 == k { (p + 1) as f64 } else { 0.0 })
                .collect();
            WeightMap::new(*radio.grid(), w).unwrap()
        });
        let fused = fuse(&maps, &radio, &with_rule(FusionRule::Linear, [1.0; 5])).unwrap();
        for k in 0..5 {
            assert_relative_eq!(mass_where(&fused, |p| p % 5 == k), 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_linear_fusion_keeps_the_blended_cell_masses() {
        let radio = pair();
        let maps = random_maps(&radio, 3);
        let alpha = [0.4, 1.0, 1.0, 0.3, 0.1];
        let fused = fuse(&maps, &radio, &with_rule(FusionRule::LogLinear, alpha)).unwrap();
        let a_sum: f64 = alpha[..3].iter().sum();
        for c in 0..2 {
            let in_c = |p: usize| radio.best(p) == c;
            let target: f64 = (0..3)
                .map(|k| alpha[k] * mass_where(&maps[k], in_c))
                .sum::<f64>()
                / a_sum;
            assert_relative_eq!(mass_where(&fused, in_c), target, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_linear_fusion_favours_agreement() {
        // Two maps that each put half their mass on one shared pixel and
        // the rest on disjoint pixels of the same cell.
        let radio = pair();
        let n = radio.grid().len();
        let shared = radio.grid().locate_index(Point::new(12.5, 12.5)).unwrap();
        let a_only = radio.grid().locate_index(Point::new(112.5, 12.5)).unwrap();
        let b_only = radio.grid().locate_index(Point::new(-112.5, 12.5)).unwrap();
        let mk = |other: usize| {
            let mut w = vec![0.0; n];
            w[shared] = 0.5;
            w[other] = 0.5;
            WeightMap::new(*radio.grid(), w).unwrap()
        };
        let zero = WeightMap::zeros(*radio.grid());
        let maps = [mk(a_only), mk(b_only), zero.clone(), zero.clone(), zero];
        let lin = fuse(
            &maps,
            &radio,
            &with_rule(FusionRule::Linear, [1.0, 1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let geo = fuse(
            &maps,
            &radio,
            &with_rule(FusionRule::LogLinear, [1.0, 1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        assert_relative_eq!(lin.values()[shared], 0.5, epsilon = 1e-12);
        assert!(geo.values()[shared] > 0.9);
        assert_relative_eq!(
            geo.values()[a_only],
            geo.values()[b_only],
            max_relative = 1e-12
        );
    }

    #[test]
    fn maps_without_mass_in_a_cell_abstain_there() {
        let radio = pair();
        let mut maps = random_maps(&radio, 4);
        let w: Vec<f64> = maps[2]
            .values()
            .iter()
            .enumerate()
            .map(|(p, v)| if radio.best(p) == 0 { 0.0 } else { *v })
            .collect();
        maps[2] = WeightMap::new(*radio.grid(), w).unwrap();
        let with = fuse(
            &maps,
            &radio,
            &with_rule(FusionRule::LogLinear, [1.0, 1.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        let without = fuse(
            &maps,
            &radio,
            &with_rule(FusionRule::LogLinear, [1.0, 1.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        // Inside cell 0 the shape is that of the TA x AoA pooling alone.
        let in0: Vec<usize> = (0..radio.grid().len())
            .filter(|&p| radio.best(p) == 0)
            .collect();
        let (s1, s2) = (
            mass_where(&with, |p| radio.best(p) == 0),
            mass_where(&without, |p| radio.best(p) == 0),
        );
        for &p in &in0 {
            assert_relative_eq!(
                with.values()[p] / s1,
                without.values()[p] / s2,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn fusion_rejects_all_zero_coefficients() {
        let radio = pair();
        let maps = random_maps(&radio, 5);
        for rule in [FusionRule::Linear, FusionRule::LogLinear] {
            let err = fuse(&maps, &radio, &with_rule(rule, [0.0; 5])).unwrap_err();
            assert!(err.is_validation() && err.to_string().contains("fusion.alpha"));
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut c = cfg();
        c.load_tolerance = 1.5;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("fusion.load_tolerance"));
        let mut c = cfg();
        c.edge_fraction = 1.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("fusion.edge_fraction"));
        let mut c = cfg();
        c.pooling_floor = 0.0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("fusion.pooling_floor"));
    }

    #[test]
    fn zero_lambda_smoothing_is_identity() {
        let radio = pair();
        let m = random_maps(&radio, 6)[0].clone();
        assert_eq!(smooth(&m, 0.0), m);
    }

    #[test]
    fn smoothing_a_point_gives_a_radially_decreasing_blob() {
        let grid = PixelGrid::new(Point::new(0.0, 0.0), 41, 41, 25.0).unwrap();
        let centre = grid.index(20, 20);
        let mut w = vec![0.0; grid.len()];
        w[centre] = 1.0;
        let s = smooth(&WeightMap::new(grid, w).unwrap(), 25.0);
        let c = grid.center_of(centre);
        for p in 0..grid.len() {
            for q in 0..grid.len() {
                let (dp, dq) = (
                    grid.center_of(p).distance(&c),
                    grid.center_of(q).distance(&c),
                );
                if dp < dq - 1e-9 {
                    assert!(s.values()[p] >= s.values()[q]);
                } else if (dp - dq).abs() < 1e-9 {
                    assert_relative_eq!(s.values()[p], s.values()[q], max_relative = 1e-12);
                }
            }
        }
        assert_relative_eq!(
            s.values()[centre],
            1.0 / kernel_mass(25.0, 25.0),
            max_relative = 1e-12
        );
        assert_relative_eq!(s.sum(), 1.0, epsilon = 1e-12);
    }

    fn kernel_mass(lambda: f64, res: f64) -> f64 {
        let r = (4.0 * lambda / res).floor() as i64;
        let mut z = 0.0;
        for dj in -r..=r {
            for di in -r..=r {
                let d = res * ((di * di + dj * dj) as f64).sqrt();
                if d <= 4.0 * lambda {
                    z += (-d / lambda).exp();
                }
            }
        }
        z
    }

    #[test]
    fn uniform_map_is_a_smoothing_fixed_point() {
        let grid = PixelGrid::new(Point::new(0.0, 0.0), 7, 5, 25.0).unwrap();
        let u = WeightMap::new(grid, vec![1.0 / 35.0; 35]).unwrap();
        let s = smooth(&u, 40.0);
        for v in s.values() {
            assert_relative_eq!(*v, 1.0 / 35.0, max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn smoothing_preserves_mass_and_never_raises_the_peak(
            w in proptest::collection::vec(0.0f64..1.0, 6 * 9),
            lambda in 1.0f64..120.0,
        ) {
            let grid = PixelGrid::new(Point::new(0.0, 0.0), 6, 9, 25.0).unwrap();
            let m = WeightMap::new(grid, w).unwrap();
            let s = smooth(&m, lambda);
            prop_assert!((s.sum() - m.sum()).abs() <= 1e-9 * m.sum().max(1.0));
            prop_assert!(s.max() <= m.max() * (1.0 + 1e-12));
            prop_assert!(s.values().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn fusion_is_invariant_to_scaling_the_coefficients(
            alpha in proptest::array::uniform5(0.0f64..2.0),
            t in 0.01f64..100.0,
            linear in any::<bool>(),
        ) {
            prop_assume!(alpha.iter().any(|a| *a > 1e-3));
            let radio = pair();
            let maps = random_maps(&radio, 7);
            let rule = if linear { FusionRule::Linear } else { FusionRule::LogLinear };
            let a = fuse(&maps, &radio, &with_rule(rule, alpha)).unwrap();
            let b = fuse(&maps, &radio, &with_rule(rule, alpha.map(|x| x * t))).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.max(*y).max(1e-300));
            }
            prop_assert!((a.sum() - 1.0).abs() < 1e-9);
        }
    }
}
