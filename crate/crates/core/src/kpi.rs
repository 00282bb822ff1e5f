//! Per-cell, per-period KPI records (the OMC export unit) and their CSV
//! persistence.
//!
//! Floating-point fields are written in the shortest decimal form that
//! parses back to the same `f64`, so `read(write(x)) == x` bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::radio::CellId;

/// LTE timing-advance step expressed as a distance.
pub const TA_BIN_WIDTH_M: f64 = 78.125;
pub const DEFAULT_AOA_BIN_WIDTH_DEG: f64 = 10.0;
/// Allowed deviation of a histogram sum from 1.
pub const HIST_SUM_TOLERANCE: f64 = 1e-9;

pub const KPI_HEADER: [&str; 11] = [
    "cell_id",
    "period",
    "ta_bin_width_m",
    "ta_hist",
    "aoa_bin_width_deg",
    "aoa_hist",
    "neighbor_dist",
    "load_time",
    "amt_bps",
    "hmt_bps",
    "n_sessions",
];

/// Timing-advance ring of a distance: `floor(distance / bin_width)`.
pub fn ta_bin(distance_m: f64, bin_width_m: f64) -> usize {
    debug_assert!(distance_m >= 0.0 && bin_width_m > 0.0);
    (distance_m / bin_width_m).floor() as usize
}

/// Checks that `bin_width_deg` tiles the circle and returns the bin count.
pub fn aoa_bin_count(bin_width_deg: f64) -> Result<usize> {
    if !(bin_width_deg > 0.0 && bin_width_deg <= 360.0) {
        return Err(Error::config("aoa_bin_width_deg", "must lie in (0, 360]"));
    }
    let n = (360.0 / bin_width_deg).round();
    if (n * bin_width_deg - 360.0).abs() > 1e-9 {
        return Err(Error::config(
            "aoa_bin_width_deg",
            format!("{bin_width_deg} does not divide 360"),
        ));
    }
    Ok(n as usize)
}

/// Angular bin of a bearing (anticlockwise from north).
pub fn aoa_bin(bearing_deg: f64, bin_width_deg: f64) -> Result<usize> {
    let n = aoa_bin_count(bin_width_deg)?;
    Ok(((bearing_deg / bin_width_deg).floor() as usize).min(n - 1))
}

/// Histogram layout shared by every record of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSpec {
    pub ta_bin_width_m: f64,
    pub ta_bins: usize,
    pub aoa_bin_width_deg: f64,
}

impl BinSpec {
    /// Enough TA rings to reach `max_range_m`, at the LTE granularity.
    pub fn covering(max_range_m: f64, aoa_bin_width_deg: f64) -> Result<Self> {
        aoa_bin_count(aoa_bin_width_deg)?;
        Ok(BinSpec {
            ta_bin_width_m: TA_BIN_WIDTH_M,
            ta_bins: ta_bin(max_range_m.max(0.0), TA_BIN_WIDTH_M) + 1,
            aoa_bin_width_deg,
        })
    }

    pub fn aoa_bins(&self) -> usize {
        (360.0 / self.aoa_bin_width_deg).round() as usize
    }
}

/// Share of a cell's sessions reporting each neighbour as their best
/// handover candidate. `unreported` holds the mass of sessions with no
/// neighbour report so that the shares total 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborDist {
    pub shares: BTreeMap<CellId, f64>,
    pub unreported: f64,
}

impl NeighborDist {
    pub fn get(&self, id: CellId) -> f64 {
        self.shares.get(&id).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.shares.values().sum::<f64>() + self.unreported
    }

    fn encode(&self) -> String {
        let mut parts: Vec<String> = self
            .shares
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect();
        if self.unreported != 0.0 {
            parts.push(format!("none:{}", self.unreported));
        }
        parts.join("|")
    }

    fn decode(text: &str) -> std::result::Result<Self, String> {
        let mut out = NeighborDist::default();
        if text.is_empty() {
            return Ok(out);
        }
        for part in text.split('|') {
            let (k, v) = part
                .split_once(':')
                .ok_or_else(|| format!("`{part}` is not an `id:fraction` pair"))?;
            let v = parse_f64(v)?;
            if k == "none" {
                out.unreported = v;
            } else {
                let id = k
                    .parse::<u32>()
                    .map_err(|_| format!("`{k}` is not a cell id"))?;
                if out.shares.insert(CellId(id), v).is_some() {
                    return Err(format!("cell {id} listed twice"));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiRecord {
    pub cell: CellId,
    pub period: u32,
    pub ta_bin_width_m: f64,
    /// Fraction of session samples per TA ring.
    pub ta_hist: Vec<f64>,
    pub aoa_bin_width_deg: f64,
    /// Fraction of session samples per AoA wedge, indexed from north
    /// anticlockwise.
    pub aoa_hist: Vec<f64>,
    pub neighbors: NeighborDist,
    /// Fraction of the period the cell's resources were fully occupied.
    pub load_time: f64,
    /// Arithmetic mean of per-session throughputs, bit/s. `None` when no
    /// session was served.
    pub amt_bps: Option<f64>,
    /// Harmonic mean of the same throughputs, bit/s.
    pub hmt_bps: Option<f64>,
    pub n_sessions: u64,
}

impl KpiRecord {
    /// Record for a cell that served nothing during the period.
    pub fn idle(cell: CellId, period: u32, bins: &BinSpec) -> Self {
        KpiRecord {
            cell,
            period,
            ta_bin_width_m: bins.ta_bin_width_m,
            ta_hist: vec![0.0; bins.ta_bins],
            aoa_bin_width_deg: bins.aoa_bin_width_deg,
            aoa_hist: vec![0.0; bins.aoa_bins()],
            neighbors: NeighborDist::default(),
            load_time: 0.0,
            amt_bps: None,
            hmt_bps: None,
            n_sessions: 0,
        }
    }

    /// True when the record carries no samples; its histograms are all zero.
    pub fn is_empty(&self) -> bool {
        self.n_sessions == 0
    }

    /// AMT - HMT, when both are defined.
    pub fn throughput_gap(&self) -> Option<f64> {
        Some(self.amt_bps? - self.hmt_bps?)
    }

    /// Checks every record invariant; the error names the failing field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.ta_bin_width_m > 0.0 && self.ta_bin_width_m.is_finite()) {
            return Err(("ta_bin_width_m", "must be positive".into()));
        }
        aoa_bin_count(self.aoa_bin_width_deg).map_err(|e| ("aoa_bin_width_deg", e.to_string()))?;
        check_hist("ta_hist", &self.ta_hist, self.n_sessions)?;
        check_hist("aoa_hist", &self.aoa_hist, self.n_sessions)?;
        let nb: Vec<f64> = self
            .neighbors
            .shares
            .values()
            .copied()
            .chain(std::iter::once(self.neighbors.unreported))
            .collect();
        check_hist("neighbor_dist", &nb, self.n_sessions)?;
        if self.neighbors.shares.contains_key(&self.cell) {
            return Err((
                "neighbor_dist",
                format!("cell {} lists itself as neighbor", self.cell),
            ));
        }
        if !(0.0..=1.0).contains(&self.load_time) {
            return Err(("load_time", format!("{} outside [0, 1]", self.load_time)));
        }
        match (self.amt_bps, self.hmt_bps) {
            (Some(a), Some(h)) => {
                if !(a.is_finite() && a > 0.0) {
                    return Err(("amt_bps", format!("{a} is not a positive rate")));
                }
                if !(h.is_finite() && h > 0.0) {
                    return Err(("hmt_bps", format!("{h} is not a positive rate")));
                }
                if h > a * (1.0 + 1e-9) {
                    return Err((
                        "hmt_bps",
                        format!("harmonic mean {h} exceeds arithmetic mean {a}"),
                    ));
                }
                if self.n_sessions == 0 {
                    return Err(("amt_bps", "defined for a record with no sessions".into()));
                }
            }
            (None, None) => {}
            (Some(_), None) => return Err(("amt_bps", "set while hmt_bps is NA".into())),
            (None, Some(_)) => return Err(("hmt_bps", "set while amt_bps is NA".into())),
        }
        Ok(())
    }
}

fn check_hist(
    name: &'static str,
    h: &[f64],
    n_sessions: u64,
) -> std::result::Result<(), (&'static str, String)> {
    if let Some(v) = h.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err((name, format!("entry {v} is not a non-negative number")));
    }
    let sum: f64 = h.iter().sum();
    if n_sessions > 0 {
        if (sum - 1.0).abs() > HIST_SUM_TOLERANCE {
            return Err((name, format!("histogram sums to {sum}, expected 1")));
        }
    } else if sum != 0.0 {
        return Err((
            name,
            format!("histogram sums to {sum} for a record with no sessions"),
        ));
    }
    Ok(())
}

fn encode_hist(h: &[f64]) -> String {
    h.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn decode_hist(text: &str) -> std::result::Result<Vec<f64>, String> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split('|').map(parse_f64).collect()
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("`{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn encode_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn decode_opt(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_f64(s).map(Some)
    }
}

/// Writes records in the order given, one row each, under the fixed header.
pub fn write_kpis<W: Write>(records: &[KpiRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(KPI_HEADER)?;
    for r in records {
        w.write_record([
            r.cell.to_string(),
            r.period.to_string(),
            r.ta_bin_width_m.to_string(),
            encode_hist(&r.ta_hist),
            r.aoa_bin_width_deg.to_string(),
            encode_hist(&r.aoa_hist),
            r.neighbors.encode(),
            r.load_time.to_string(),
            encode_opt(r.amt_bps),
            encode_opt(r.hmt_bps),
            r.n_sessions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses and validates a KPI file. When `known_cells` is given, every
/// cell and neighbour id must belong to it.
pub fn read_kpis<R: Read>(
    input: R,
    path: &str,
    known_cells: Option<&HashSet<CellId>>,
) -> Result<Vec<KpiRecord>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_string(),
            source: e,
        })?
        .clone();
    if header.iter().ne(KPI_HEADER.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            "header",
            format!("expected `{}`", KPI_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_string(),
            source: e,
        })?;
        let line = rec.position().map_or(out.len() + 2, |p| p.line() as usize);
        let err = |field: &str, reason: String| Error::parse(path, line, field, reason);
        if rec.len() > KPI_HEADER.len() {
            return Err(err(
                "row",
                format!("{} fields, expected {}", rec.len(), KPI_HEADER.len()),
            ));
        }
        let get = |k: usize| {
            rec.get(k)
                .ok_or_else(|| err(KPI_HEADER[k], "missing".into()))
        };
        let cell = CellId(
            get(0)?
                .parse::<u32>()
                .map_err(|_| err("cell_id", format!("`{}` is not a cell id", &rec[0])))?,
        );
        let period = get(1)?
            .parse::<u32>()
            .map_err(|_| err("period", format!("`{}` is not a period index", &rec[1])))?;
        let record = KpiRecord {
            cell,
            period,
            ta_bin_width_m: parse_f64(get(2)?).map_err(|e| err("ta_bin_width_m", e))?,
            ta_hist: decode_hist(get(3)?).map_err(|e| err("ta_hist", e))?,
            aoa_bin_width_deg: parse_f64(get(4)?).map_err(|e| err("aoa_bin_width_deg", e))?,
            aoa_hist: decode_hist(get(5)?).map_err(|e| err("aoa_hist", e))?,
            neighbors: NeighborDist::decode(get(6)?).map_err(|e| err("neighbor_dist", e))?,
            load_time: parse_f64(get(7)?).map_err(|e| err("load_time", e))?,
            amt_bps: decode_opt(get(8)?).map_err(|e| err("amt_bps", e))?,
            hmt_bps: decode_opt(get(9)?).map_err(|e| err("hmt_bps", e))?,
            n_sessions: get(10)?
                .parse::<u64>()
                .map_err(|_| err("n_sessions", format!("`{}` is not a count", &rec[10])))?,
        };
        record.validate().map_err(|(f, reason)| err(f, reason))?;
        if let Some(known) = known_cells {
            if !known.contains(&record.cell) {
                return Err(err("cell_id", format!("unknown cell id {}", record.cell)));
            }
            if let Some(id) = record
                .neighbors
                .shares
                .keys()
                .find(|id| !known.contains(id))
            {
                return Err(err("neighbor_dist", format!("unknown cell id {id}")));
            }
        }
        if !seen.insert((record.cell, record.period)) {
            return Err(err(
                "period",
                format!(
                    "duplicate record for cell {} period {}",
                    record.cell, record.period
                ),
            ));
        }
        out.push(record);
    }
    Ok(out)
}
