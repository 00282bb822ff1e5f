//! System-level traffic simulator: Poisson session arrivals drawn from an
//! intensity map, optional pedestrian mobility, round-robin sharing per
//! cell, hysteresis handover, and per-period KPI aggregation.
//!
//! The simulator advances in 1 s ticks. Within a tick every attached
//! session is sampled once for the TA, AoA and neighbour counters, then
//! served at its round-robin share of the cell's capacity.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{bearing_from_north, wrap_degrees, PixelGrid, Point};
use crate::kpi::{aoa_bin, ta_bin, BinSpec, KpiRecord, NeighborDist};
use crate::radio::{Cell, CellId, RadioMap};

pub const DEFAULT_BANDWIDTH_HZ: f64 = 20e6;
/// 1000 kbit.
pub const DEFAULT_FILE_SIZE_BITS: u64 = 1_000_000;
/// 8.33 km/h.
pub const DEFAULT_SPEED_MPS: f64 = 8.33 / 3.6;
/// One quarter of an hour.
pub const DEFAULT_PERIOD_S: u32 = 900;
pub const DEFAULT_MOBILE_FRACTION: f64 = 0.3;
pub const DEFAULT_HYSTERESIS_DB: f64 = 3.0;
pub const DEFAULT_NOISE_FIGURE_DB: f64 = 9.0;
/// Spectral-efficiency cap, bit/s/Hz.
pub const MAX_SPECTRAL_EFFICIENCY: f64 = 6.0;
const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

/// Everything needed to reproduce one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: PixelGrid,
    pub cells: Vec<Cell>,
    pub bandwidth_hz: f64,
    /// Relative arrival intensity per pixel, row-major on `grid`.
    pub intensity: Vec<f64>,
    /// Network-wide session arrival rate, sessions/s.
    pub arrival_rate: f64,
    pub file_size_bits: u64,
    pub mobile_fraction: f64,
    pub speed_mps: f64,
    pub period_s: u32,
    pub n_periods: u32,
    pub seed: u64,
    pub hysteresis_db: f64,
    pub noise_figure_db: f64,
    /// Admission cap per cell; sessions arriving at a full cell are dropped.
    pub max_attached: Option<usize>,
    pub bins: BinSpec,
    /// Mean multipath excess distance added to timing advance, meters
    /// (exponentially distributed, never negative).
    pub ta_error_m: f64,
    /// Standard deviation of the angle-of-arrival error, degrees.
    pub aoa_error_deg: f64,
}

impl Scenario {
    /// Scenario with the default traffic parameters. The TA histogram is
    /// sized to the largest site-to-corner distance of the grid.
    pub fn new(
        grid: PixelGrid,
        cells: Vec<Cell>,
        intensity: Vec<f64>,
        arrival_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let bins = BinSpec::covering(
            max_range(&grid, &cells),
            crate::kpi::DEFAULT_AOA_BIN_WIDTH_DEG,
        )?;
        let s = Scenario {
            grid,
            cells,
            bandwidth_hz: DEFAULT_BANDWIDTH_HZ,
            intensity,
            arrival_rate,
            file_size_bits: DEFAULT_FILE_SIZE_BITS,
            mobile_fraction: DEFAULT_MOBILE_FRACTION,
            speed_mps: DEFAULT_SPEED_MPS,
            period_s: DEFAULT_PERIOD_S,
            n_periods: 4,
            seed,
            hysteresis_db: DEFAULT_HYSTERESIS_DB,
            noise_figure_db: DEFAULT_NOISE_FIGURE_DB,
            max_attached: None,
            bins,
            ta_error_m: 0.0,
            aoa_error_deg: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity.len() != self.grid.len() {
            return Err(Error::config(
                "traffic.intensity",
                format!(
                    "{} entries for a grid of {} pixels",
                    self.intensity.len(),
                    self.grid.len()
                ),
            ));
        }
        if self.intensity.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(
                "traffic.intensity",
                "entries must be finite and non-negative",
            ));
        }
        if !(self.intensity.iter().sum::<f64>() > 0.0) {
            return Err(Error::config(
                "traffic.intensity",
                "must have positive total",
            ));
        }
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::config("traffic.bandwidth_hz", "must be positive"));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::config(
                "traffic.arrival_rate",
                "must be non-negative",
            ));
        }
        if self.file_size_bits == 0 {
            return Err(Error::config("traffic.file_size_bits", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mobile_fraction) {
            return Err(Error::config(
                "traffic.mobile_fraction",
                "must lie in [0, 1]",
            ));
        }
        if !(self.speed_mps >= 0.0 && self.speed_mps.is_finite()) {
            return Err(Error::config("traffic.speed_mps", "must be non-negative"));
        }
        if self.period_s == 0 {
            return Err(Error::config("traffic.period_s", "must be positive"));
        }
        if !(self.hysteresis_db >= 0.0) {
            return Err(Error::config(
                "traffic.hysteresis_db",
                "must be non-negative",
            ));
        }
        if !(self.ta_error_m >= 0.0 && self.ta_error_m.is_finite()) {
            return Err(Error::config("traffic.ta_error_m", "must be non-negative"));
        }
        if !(self.aoa_error_deg >= 0.0 && self.aoa_error_deg.is_finite()) {
            return Err(Error::config(
                "traffic.aoa_error_deg",
                "must be non-negative",
            ));
        }
        if self.max_attached == Some(0) {
            return Err(Error::config("traffic.max_attached", "must be at least 1"));
        }
        if !(self.bins.ta_bin_width_m > 0.0) || self.bins.ta_bins == 0 {
            return Err(Error::config("kpi.ta_bin_width_m", "must be positive"));
        }
        crate::kpi::aoa_bin_count(self.bins.aoa_bin_width_deg)
            .map_err(|_| Error::config("kpi.aoa_bin_width_deg", "must divide 360"))?;
        Ok(())
    }

    pub fn total_ticks(&self) -> u64 {
        self.period_s as u64 * self.n_periods as u64
    }
}

/// Largest distance from any site to any grid corner.
pub fn max_range(grid: &PixelGrid, cells: &[Cell]) -> f64 {
    let o = grid.origin();
    let corners = [
        o,
        Point::new(grid.x_max(), o.y),
        Point::new(o.x, grid.y_max()),
        Point::new(grid.x_max(), grid.y_max()),
    ];
    cells
        .iter()
        .flat_map(|c| corners.iter().map(move |k| c.site.distance(k)))
        .fold(0.0, f64::max)
}

/// A traffic concentration added on top of the background intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hotspot {
    pub center: Point,
    /// Gaussian spread; 0 puts all mass on the pixel containing `center`.
    pub sigma_m: f64,
    /// Share of arrivals relative to the background's share.
    pub weight: f64,
}

/// Intensity map: `background` spread uniformly plus each hotspot's
/// `weight` spread as a normalized Gaussian (or point mass).
pub fn intensity_map(grid: &PixelGrid, background: f64, hotspots: &[Hotspot]) -> Result<Vec<f64>> {
    if !(background >= 0.0) {
        return Err(Error::config("hotspots.background", "must be non-negative"));
    }
    let n = grid.len();
    let mut out = vec![background / n as f64; n];
    for (k, h) in hotspots.iter().enumerate() {
        if !(h.weight >= 0.0) || !(h.sigma_m >= 0.0) {
            return Err(Error::config(
                format!("hotspots[{k}]"),
                "weight and sigma_m must be non-negative",
            ));
        }
        if h.sigma_m == 0.0 {
            let p = grid.locate_index(h.center).ok_or_else(|| {
                Error::config(format!("hotspots[{k}].center"), "lies outside the grid")
            })?;
            out[p] += h.weight;
            continue;
        }
        let kernel: Vec<f64> = (0..n)
            .map(|p| {
                let d = grid.center_of(p).distance(&h.center) / h.sigma_m;
                (-0.5 * d * d).exp()
            })
            .collect();
        let z: f64 = kernel.iter().sum();
        if z > 0.0 {
            for (o, k) in out.iter_mut().zip(&kernel) {
                *o += h.weight * k / z;
            }
        }
    }
    Ok(out)
}

/// Places `count` hotspots uniformly at random within `max_dist` of a
/// random site, all inside the grid.
pub fn random_hotspots(
    grid: &PixelGrid,
    sites: &[Point],
    count: usize,
    max_dist: f64,
    sigma_m: f64,
    weight: f64,
    seed: u64,
) -> Vec<Hotspot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count && !sites.is_empty() {
        let site = sites[rng.random_range(0..sites.len())];
        let r = max_dist * rng.random::<f64>().sqrt();
        let a = rng.random::<f64>() * std::f64::consts::TAU;
        let c = Point::new(site.x + r * a.cos(), site.y + r * a.sin());
        if grid.locate(c).is_some() {
            out.push(Hotspot {
                center: c,
                sigma_m,
                weight,
            });
        }
    }
    out
}

/// Round-robin share of the cell capacity:
/// `(bandwidth / n_attached) * min(log2(1 + sinr), 6)`.
pub fn per_tick_throughput(n_attached: usize, bandwidth_hz: f64, sinr_db: f64) -> f64 {
    debug_assert!(n_attached >= 1);
    let sinr = 10f64.powf(sinr_db / 10.0);
    let se = (1.0 + sinr).log2().min(MAX_SPECTRAL_EFFICIENCY);
    bandwidth_hz / n_attached as f64 * se
}

/// One file download in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: u64,
    pub birth_pixel: usize,
    pub position: Point,
    /// Pixel containing `position`.
    pub pixel: usize,
    pub remaining_bits: u64,
    /// Index into the radio map's cell list.
    pub serving: usize,
    pub mobile: bool,
    /// Unit velocity direction (east, north).
    pub heading: (f64, f64),
    /// Persistent measurement errors of this session's uplink: timing
    /// advance (meters) and angle of arrival (degrees).
    pub ta_error_m: f64,
    pub aoa_error_deg: f64,
}

/// Serving cell after a handover check: the best-RSRP cell at the
/// session's pixel, but only if it beats the current server by strictly
/// more than `hysteresis_db`.
pub fn handover_check(session: &Session, radio: &RadioMap, hysteresis_db: f64) -> usize {
    let best = radio.best(session.pixel);
    if best != session.serving
        && radio.rsrp(session.pixel, best)
            > radio.rsrp(session.pixel, session.serving) + hysteresis_db
    {
        best
    } else {
        session.serving
    }
}

/// Raw per-tick observations of one cell over one period.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CellPeriodLog {
    pub cell: usize,
    pub period: u32,
    /// Site-to-session distance, one sample per attached session per tick.
    pub ta_samples: Vec<f64>,
    /// Site-to-session bearing (anticlockwise from north), same sampling.
    pub aoa_samples: Vec<f64>,
    /// Strongest non-serving cell reported, same sampling.
    pub neighbor_samples: Vec<Option<CellId>>,
    /// Ticks during which the cell's resources were fully occupied.
    pub busy_ticks: u32,
    pub ticks: u32,
    /// Time-averaged throughput of each session segment served here that
    /// moved at least one bit.
    pub session_rates: Vec<f64>,
    /// Session segments attached to the cell during the period.
    pub n_sessions: u64,
}

/// Turns one period of raw observations into the exported KPI record.
pub fn aggregate_kpis(log: &CellPeriodLog, cell_id: CellId, bins: &BinSpec) -> KpiRecord {
    let mut rec = KpiRecord::idle(cell_id, log.period, bins);
    if log.ticks > 0 {
        rec.load_time = log.busy_ticks as f64 / log.ticks as f64;
    }
    rec.n_sessions = log.n_sessions;
    if log.ta_samples.is_empty() {
        // No samples: keep the flagged all-zero histograms.
        rec.n_sessions = 0;
        return rec;
    }

    let n = log.ta_samples.len() as f64;
    let mut ta = vec![0u64; bins.ta_bins];
    for &d in &log.ta_samples {
        ta[ta_bin(d, bins.ta_bin_width_m).min(bins.ta_bins - 1)] += 1;
    }
    rec.ta_hist = ta.iter().map(|&c| c as f64 / n).collect();

    let mut aoa = vec![0u64; bins.aoa_bins()];
    for &b in &log.aoa_samples {
        // Bin width was validated when the scenario was built.
        let k = aoa_bin(b, bins.aoa_bin_width_deg).unwrap_or(0);
        aoa[k] += 1;
    }
    let na = log.aoa_samples.len() as f64;
    rec.aoa_hist = aoa.iter().map(|&c| c as f64 / na).collect();

    let mut counts = std::collections::BTreeMap::<CellId, u64>::new();
    let mut none = 0u64;
    for s in &log.neighbor_samples {
        match s {
            Some(id) => *counts.entry(*id).or_default() += 1,
            None => none += 1,
        }
    }
    let nn = log.neighbor_samples.len() as f64;
    rec.neighbors = NeighborDist {
        shares: counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / nn))
            .collect(),
        unreported: none as f64 / nn,
    };

    if !log.session_rates.is_empty() {
        let k = log.session_rates.len() as f64;
        let amt = log.session_rates.iter().sum::<f64>() / k;
        let hmt = k / log.session_rates.iter().map(|r| 1.0 / r).sum::<f64>();
        rec.amt_bps = Some(amt);
        // AM >= HM; clamp away rounding noise on constant rates.
        rec.hmt_bps = Some(hmt.min(amt));
    }
    rec
}

/// Per-pixel ground truth of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub grid: PixelGrid,
    /// Sessions generated at each pixel (including blocked ones).
    pub access: Vec<u64>,
    /// Bits delivered while the session was at each pixel.
    pub elapsed: Vec<u64>,
}

impl GroundTruth {
    pub fn empty(grid: PixelGrid) -> Self {
        GroundTruth {
            grid,
            access: vec![0; grid.len()],
            elapsed: vec![0; grid.len()],
        }
    }

    pub fn total_access(&self) -> u64 {
        self.access.iter().sum()
    }

    pub fn total_elapsed(&self) -> u64 {
        self.elapsed.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRUTH_HEADER)?;
        for p in 0..self.grid.len() {
            let (i, j) = self.grid.coords(p);
            w.write_record([
                i.to_string(),
                j.to_string(),
                self.access[p].to_string(),
                self.elapsed[p].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a truth file written for `grid`; every pixel must appear once.
    pub fn read_csv<R: Read>(input: R, path: &str, grid: PixelGrid) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::Csv {
                path: path.to_string(),
                source: e,
            })?
            .clone();
        if header.iter().ne(TRUTH_HEADER.iter().copied()) {
            return Err(Error::parse(
                path,
                1,
                "header",
                format!("expected `{}`", TRUTH_HEADER.join(",")),
            ));
        }
        let mut truth = GroundTruth::empty(grid);
        let mut seen = vec![false; grid.len()];
        for (n, rec) in rdr.records().enumerate() {
            let row = n + 2;
            let rec = rec.map_err(|e| Error::Csv {
                path: path.to_string(),
                source: e,
            })?;
            let num = |k: usize| -> Result<u64> {
                rec.get(k)
                    .ok_or_else(|| Error::parse(path, row, TRUTH_HEADER[k], "missing"))?
                    .parse::<u64>()
                    .map_err(|_| {
                        Error::parse(
                            path,
                            row,
                            TRUTH_HEADER[k],
                            format!("`{}` is not a count", &rec[k]),
                        )
                    })
            };
            let (i, j) = (num(0)? as usize, num(1)? as usize);
            if i >= grid.width() || j >= grid.height() {
                return Err(Error::Mismatch(format!(
                    "{path}: pixel ({i}, {j}) lies outside the grid"
                )));
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
            truth.access[p] = num(2)?;
            truth.elapsed[p] = num(3)?;
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            let (i, j) = grid.coords(p);
            return Err(Error::Mismatch(format!("{path}: pixel ({i}, {j}) missing")));
        }
        Ok(truth)
    }
}

pub const TRUTH_HEADER: [&str; 4] = ["i", "j", "access_count", "elapsed_bits"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimStats {
    pub sessions: u64,
    pub blocked: u64,
    pub completed: u64,
    pub handovers: u64,
    /// Sum over ticks of attached sessions, all cells.
    pub session_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub truth: GroundTruth,
    /// One record per cell per period, ordered by period then cell id.
    pub kpis: Vec<KpiRecord>,
    pub stats: SimStats,
}

/// Downlink SINR at a pixel with every other cell transmitting at full power.
struct LinkBudget {
    noise_mw: f64,
    total_rx_mw: Vec<f64>,
}

impl LinkBudget {
    fn new(radio: &RadioMap, bandwidth_hz: f64, noise_figure_db: f64) -> Self {
        let noise_dbm = THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10() + noise_figure_db;
        let total_rx_mw = (0..radio.grid().len())
            .map(|p| radio.rsrp_row(p).iter().map(|r| dbm_to_mw(*r)).sum())
            .collect();
        LinkBudget {
            noise_mw: dbm_to_mw(noise_dbm),
            total_rx_mw,
        }
    }

    fn sinr_db(&self, radio: &RadioMap, pixel: usize, serving: usize) -> f64 {
        let s = dbm_to_mw(radio.rsrp(pixel, serving));
        let i = (self.total_rx_mw[pixel] - s).max(0.0);
        10.0 * (s / (self.noise_mw + i)).log10()
    }
}

fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

struct Active {
    session: Session,
    /// Bits and busy seconds accumulated on the current (cell, period).
    seg_bits: u64,
    seg_time: f64,
    seg_ticks: u32,
}

/// Runs the scenario tick by tick. Deterministic for a given seed.
pub fn run_simulation(scenario: &Scenario, radio: &RadioMap) -> Result<SimOutput> {
    scenario.validate()?;
    if radio.grid() != &scenario.grid {
        return Err(Error::Mismatch(
            "radio map and scenario use different grids".into(),
        ));
    }
    let mut scen_cells = scenario.cells.clone();
    scen_cells.sort_by_key(|c| c.id);
    if scen_cells != radio.cells() {
        return Err(Error::Mismatch(
            "radio map and scenario use different cells".into(),
        ));
    }

    let grid = scenario.grid;
    let n_cells = radio.n_cells();
    let link = LinkBudget::new(radio, scenario.bandwidth_hz, scenario.noise_figure_db);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let placement = WeightedIndex::new(&scenario.intensity)
        .map_err(|e| Error::config("traffic.intensity", e.to_string()))?;
    let arrivals = (scenario.arrival_rate > 0.0)
        .then(|| Poisson::new(scenario.arrival_rate))
        .transpose()
        .map_err(|e| Error::config("traffic.arrival_rate", e.to_string()))?;

    let mut truth = GroundTruth::empty(grid);
    let mut stats = SimStats::default();
    let mut kpis = Vec::with_capacity(n_cells * scenario.n_periods as usize);
    let mut active: Vec<Active> = Vec::new();
    let mut attached = vec![0usize; n_cells];
    let new_logs = |period: u32| -> Vec<CellPeriodLog> {
        (0..n_cells)
            .map(|c| CellPeriodLog {
                cell: c,
                period,
                ..Default::default()
            })
            .collect()
    };
    let mut logs = new_logs(0);
    let res = grid.resolution();

    for tick in 0..scenario.total_ticks() {
        let period = (tick / scenario.period_s as u64) as u32;
        if tick > 0 && tick % scenario.period_s as u64 == 0 {
            for a in &mut active {
                close_segment(a, &mut logs);
            }
            flush_period(&mut kpis, &logs, radio, &scenario.bins);
            logs = new_logs(period);
        }

        // Sessions already present move and may hand over.
        for a in &mut active {
            let s = &mut a.session;
            if s.mobile && scenario.speed_mps > 0.0 {
                let (pos, heading) = reflect_step(&grid, s.position, s.heading, scenario.speed_mps);
                s.position = pos;
                s.heading = heading;
                s.pixel = grid.locate_index(pos).unwrap_or(s.pixel);
            }
            let target = handover_check(s, radio, scenario.hysteresis_db);
            if target != s.serving {
                close_segment(a, &mut logs);
                attached[a.session.serving] -= 1;
                attached[target] += 1;
                a.session.serving = target;
                stats.handovers += 1;
            }
        }

        // New arrivals.
        let n_new = arrivals.as_ref().map_or(0, |d| d.sample(&mut rng) as u64);
        for _ in 0..n_new {
            let pixel = placement.sample(&mut rng);
            let c = grid.center_of(pixel);
            let jx: f64 = rng.random::<f64>() - 0.5;
            let jy: f64 = rng.random::<f64>() - 0.5;
            let mobile = rng.random::<f64>() < scenario.mobile_fraction;
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            let ta_err = scenario.ta_error_m * rng.sample::<f64, _>(Exp1);
            let aoa_err = scenario.aoa_error_deg * rng.sample::<f64, _>(StandardNormal);
            stats.sessions += 1;
            truth.access[pixel] += 1;
            let serving = radio.best(pixel);
            if scenario
                .max_attached
                .is_some_and(|cap| attached[serving] >= cap)
            {
                stats.blocked += 1;
                continue;
            }
            attached[serving] += 1;
            active.push(Active {
                session: Session {
                    id: stats.sessions - 1,
                    birth_pixel: pixel,
                    position: Point::new(c.x + jx * res, c.y + jy * res),
                    pixel,
                    remaining_bits: scenario.file_size_bits,
                    serving,
                    mobile,
                    heading: (a.cos(), a.sin()),
                    ta_error_m: ta_err,
                    aoa_error_deg: aoa_err,
                },
                seg_bits: 0,
                seg_time: 0.0,
                seg_ticks: 0,
            });
        }

        // Serve.
        for (c, log) in logs.iter_mut().enumerate() {
            log.ticks += 1;
            // Greedy downloads keep every attached cell fully occupied.
            if attached[c] > 0 {
                log.busy_ticks += 1;
            }
            stats.session_ticks += attached[c] as u64;
        }
        for a in &mut active {
            let s = &mut a.session;
            let cell = &radio.cells()[s.serving];
            let log = &mut logs[s.serving];
            log.ta_samples
                .push((cell.site.distance(&s.position) + s.ta_error_m).max(0.0));
            log.aoa_samples.push(wrap_degrees(
                bearing_from_north(cell.site, s.position).degrees + s.aoa_error_deg,
            ));
            let nb = radio.strongest_except(s.pixel, s.serving);
            log.neighbor_samples.push(Some(radio.cells()[nb].id));

            let sinr = link.sinr_db(radio, s.pixel, s.serving);
            let rate = per_tick_throughput(attached[s.serving], scenario.bandwidth_hz, sinr);
            let bits = (rate.floor() as u64).min(s.remaining_bits);
            s.remaining_bits -= bits;
            truth.elapsed[s.pixel] += bits;
            a.seg_bits += bits;
            a.seg_time += if s.remaining_bits == 0 {
                bits as f64 / rate
            } else {
                1.0
            };
            a.seg_ticks += 1;
        }
        active.retain_mut(|a| {
            if a.session.remaining_bits > 0 {
                return true;
            }
            close_segment(a, &mut logs);
            attached[a.session.serving] -= 1;
            stats.completed += 1;
            false
        });
    }

    if scenario.total_ticks() > 0 {
        for a in &mut active {
            close_segment(a, &mut logs);
        }
        flush_period(&mut kpis, &logs, radio, &scenario.bins);
    }
    Ok(SimOutput { truth, kpis, stats })
}

/// Ends the session's current (cell, period) segment. Segments that were
/// never sampled leave no trace.
fn close_segment(a: &mut Active, logs: &mut [CellPeriodLog]) {
    if a.seg_ticks > 0 {
        let log = &mut logs[a.session.serving];
        log.n_sessions += 1;
        if a.seg_bits > 0 && a.seg_time > 0.0 {
            log.session_rates.push(a.seg_bits as f64 / a.seg_time);
        }
    }
    a.seg_bits = 0;
    a.seg_time = 0.0;
    a.seg_ticks = 0;
}

fn flush_period(
    out: &mut Vec<KpiRecord>,
    logs: &[CellPeriodLog],
    radio: &RadioMap,
    bins: &BinSpec,
) {
    for log in logs {
        out.push(aggregate_kpis(log, radio.cells()[log.cell].id, bins));
    }
}

/// Straight-line step with specular reflection at the grid border.
fn reflect_step(
    grid: &PixelGrid,
    pos: Point,
    heading: (f64, f64),
    speed: f64,
) -> (Point, (f64, f64)) {
    let (mut x, mut y) = (pos.x + heading.0 * speed, pos.y + heading.1 * speed);
    let (mut hx, mut hy) = heading;
    let (x0, y0, x1, y1) = (grid.origin().x, grid.origin().y, grid.x_max(), grid.y_max());
    // Keep strictly inside the half-open pixel bounds.
    let eps = 1e-9 * grid.resolution();
    if x < x0 {
        x = (2.0 * x0 - x).min(x1 - eps);
        hx = -hx;
    } else if x >= x1 {
        x = (2.0 * x1 - x - eps).max(x0);
        hx = -hx;
    }
    if y < y0 {
        y = (2.0 * y0 - y).min(y1 - eps);
        hy = -hy;
    } else if y >= y1 {
        y = (2.0 * y1 - y - eps).max(y0);
        hy = -hy;
    }
    (Point::new(x, y), (hx, hy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::{build_radio_map, Antenna, DEFAULT_TX_POWER_DBM};
    use approx::assert_relative_eq;

    fn omni(id: u32, x: f64, y: f64) -> Cell {
        Cell {
            id: CellId(id),
            site: Point::new(x, y),
            antenna: Antenna::Omni,
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
        }
    }

    /// Two omni cells 1 km apart on a 1200 m x 225 m strip whose middle
    /// pixel row is centred on the line through both sites.
    fn strip() -> (PixelGrid, Vec<Cell>, RadioMap) {
        let grid = PixelGrid::new(Point::new(-100.0, -112.5), 48, 9, 25.0).unwrap();
        let cells = vec![omni(0, 0.0, 0.0), omni(1, 1000.0, 0.0)];
        let radio = build_radio_map(grid, &cells, None).unwrap();
        (grid, cells, radio)
    }

    fn session_at(radio: &RadioMap, pixel: usize, serving: usize) -> Session {
        Session {
            id: 0,
            birth_pixel: pixel,
            position: radio.grid().center_of(pixel),
            pixel,
            remaining_bits: DEFAULT_FILE_SIZE_BITS,
            serving,
            mobile: false,
            heading: (1.0, 0.0),
            ta_error_m: 0.0,
            aoa_error_deg: 0.0,
        }
    }

    fn uniform_scenario(rate: f64, seed: u64) -> (Scenario, RadioMap) {
        let (grid, cells, radio) = strip();
        let mut s = Scenario::new(grid, cells, vec![1.0; grid.len()], rate, seed).unwrap();
        s.period_s = 60;
        (s, radio)
    }

    #[test]
    fn throughput_closed_form_at_zero_db() {
        assert_eq!(per_tick_throughput(1, 20e6, 0.0), 2.0e7);
    }

    #[test]
    fn throughput_caps_spectral_efficiency() {
        assert_eq!(
            per_tick_throughput(1, 20e6, 300.0),
            20e6 * MAX_SPECTRAL_EFFICIENCY
        );
    }

    #[test]
    fn doubling_attached_sessions_halves_rate() {
        for sinr in [-5.0, 0.0, 7.5, 40.0] {
            for n in 1..6 {
                let one = per_tick_throughput(n, 20e6, sinr);
                let two = per_tick_throughput(2 * n, 20e6, sinr);
                assert_relative_eq!(two, one / 2.0, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn stationary_session_never_hands_over() {
        let (grid, _, radio) = strip();
        for p in 0..grid.len() {
            let s = session_at(&radio, p, radio.best(p));
            assert_eq!(handover_check(&s, &radio, DEFAULT_HYSTERESIS_DB), s.serving);
        }
    }

    #[test]
    fn handover_needs_strictly_more_than_hysteresis() {
        let (grid, _, radio) = strip();
        let p = grid.locate_index(Point::new(900.0, 0.0)).unwrap();
        let s = session_at(&radio, p, 0);
        let margin = radio.rsrp(p, 1) - radio.rsrp(p, 0);
        assert!(margin > 0.0);
        assert_eq!(handover_check(&s, &radio, margin), 0);
        assert_eq!(handover_check(&s, &radio, margin.next_down()), 1);
    }

    #[test]
    fn crossing_the_midpoint_hands_over_once_where_the_margin_exceeds_hysteresis() {
        // On the line between the sites the cell-1 advantage is
        // 37.6 log10(x / (1000 - x)) dB, which exceeds 3 dB beyond x*.
        let ratio = 10f64.powf(DEFAULT_HYSTERESIS_DB / 37.6);
        let x_star = 1000.0 * ratio / (1.0 + ratio);
        let (grid, _, radio) = strip();
        let j = grid.locate(Point::new(0.0, 0.0)).unwrap().1;
        let mut s = session_at(&radio, grid.index(4, j), 0);
        let mut switches = Vec::new();
        for i in 4..44 {
            s.pixel = grid.index(i, j);
            let next = handover_check(&s, &radio, DEFAULT_HYSTERESIS_DB);
            if next != s.serving {
                switches.push(grid.center_of(s.pixel).x);
                s.serving = next;
            }
        }
        assert_eq!(switches.len(), 1);
        assert!(switches[0] > x_star && switches[0] - grid.resolution() <= x_star);
    }

    fn log_with_ta(samples: &[(usize, f64)]) -> CellPeriodLog {
        let mut log = CellPeriodLog {
            ticks: 10,
            busy_ticks: 4,
            n_sessions: 100,
            ..Default::default()
        };
        for &(n, d) in samples {
            for _ in 0..n {
                log.ta_samples.push(d);
                log.aoa_samples.push(0.0);
                log.neighbor_samples.push(Some(CellId(7)));
            }
        }
        log.session_rates = vec![5e6; 100];
        log
    }

    #[test]
    fn ta_histogram_of_four_ring_populations() {
        let bins = BinSpec::covering(1000.0, 10.0).unwrap();
        let w = crate::kpi::TA_BIN_WIDTH_M;
        let log = log_with_ta(&[(30, 0.5 * w), (20, 1.5 * w), (40, 2.5 * w), (10, 3.5 * w)]);
        let rec = aggregate_kpis(&log, CellId(1), &bins);
        assert_eq!(&rec.ta_hist[..5], &[0.3, 0.2, 0.4, 0.1, 0.0]);
        assert_eq!(rec.load_time, 0.4);
        assert_eq!(rec.neighbors.shares[&CellId(7)], 1.0);
        rec.validate().unwrap();
    }

    #[test]
    fn aoa_histogram_with_wide_bins() {
        let bins = BinSpec::covering(1000.0, 120.0).unwrap();
        let mut log = log_with_ta(&[(100, 10.0)]);
        log.aoa_samples = [vec![10.0; 30], vec![130.0; 40], vec![250.0; 30]].concat();
        let rec = aggregate_kpis(&log, CellId(1), &bins);
        assert_eq!(rec.aoa_hist, vec![0.3, 0.4, 0.3]);
    }

    #[test]
    fn equal_rates_give_equal_means() {
        let bins = BinSpec::covering(1000.0, 10.0).unwrap();
        let mut log = log_with_ta(&[(3, 10.0)]);
        log.session_rates = vec![1.0 / 3.0 * 1e7; 7];
        let rec = aggregate_kpis(&log, CellId(1), &bins);
        assert_relative_eq!(
            rec.amt_bps.unwrap(),
            rec.hmt_bps.unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn point_intensity_puts_all_access_on_one_pixel() {
        let (grid, cells, radio) = strip();
        let mut intensity = vec![0.0; grid.len()];
        intensity[123] = 1.0;
        let mut s = Scenario::new(grid, cells, intensity, 2.0, 3).unwrap();
        s.period_s = 30;
        let out = run_simulation(&s, &radio).unwrap();
        assert!(out.stats.sessions > 0);
        assert_eq!(out.truth.access[123], out.stats.sessions);
        assert_eq!(out.truth.total_access(), out.stats.sessions);
    }

    #[test]
    fn zero_rate_gives_idle_records_and_empty_truth() {
        let (s, radio) = uniform_scenario(0.0, 1);
        let out = run_simulation(&s, &radio).unwrap();
        assert_eq!(out.kpis.len(), 2 * s.n_periods as usize);
        for r in &out.kpis {
            assert!(r.is_empty());
            assert_eq!(r.load_time, 0.0);
            assert_eq!(r.amt_bps, None);
            r.validate().unwrap();
        }
        assert_eq!(out.truth.total_access(), 0);
        assert_eq!(out.truth.total_elapsed(), 0);
    }

    #[test]
    fn same_seed_same_output() {
        let (s, radio) = uniform_scenario(3.0, 11);
        assert_eq!(
            run_simulation(&s, &radio).unwrap(),
            run_simulation(&s, &radio).unwrap()
        );
        let (t, _) = uniform_scenario(3.0, 12);
        assert_ne!(
            run_simulation(&s, &radio).unwrap().truth,
            run_simulation(&t, &radio).unwrap().truth
        );
    }

    #[test]
    fn records_are_valid_and_ordered() {
        let (mut s, radio) = uniform_scenario(5.0, 4);
        s.ta_error_m = 40.0;
        s.aoa_error_deg = 15.0;
        let out = run_simulation(&s, &radio).unwrap();
        let keys: Vec<_> = out.kpis.iter().map(|r| (r.period, r.cell)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        for r in &out.kpis {
            r.validate().unwrap();
            assert!(!r.is_empty());
            assert!(r.hmt_bps.unwrap() <= r.amt_bps.unwrap());
        }
    }

    #[test]
    fn fast_long_sessions_hand_over() {
        let (mut s, radio) = uniform_scenario(2.0, 8);
        s.file_size_bits = 5_000_000_000;
        s.mobile_fraction = 1.0;
        s.speed_mps = 30.0;
        let out = run_simulation(&s, &radio).unwrap();
        assert!(out.stats.handovers > 0);
        for r in &out.kpis {
            r.validate().unwrap();
        }
    }

    #[test]
    fn served_bits_are_conserved() {
        // Light load: every session finishes, so delivered bits are exactly
        // the files of all sessions.
        let (s, radio) = uniform_scenario(1.0, 5);
        let out = run_simulation(&s, &radio).unwrap();
        assert_eq!(out.stats.completed, out.stats.sessions);
        assert_eq!(
            out.truth.total_elapsed(),
            out.stats.sessions * s.file_size_bits
        );
        assert!(out.stats.session_ticks >= out.stats.sessions);
    }

    #[test]
    fn heavy_load_keeps_partial_downloads_bounded() {
        let (mut s, radio) = uniform_scenario(400.0, 6);
        s.n_periods = 1;
        s.period_s = 5;
        let out = run_simulation(&s, &radio).unwrap();
        assert!(out.stats.completed < out.stats.sessions);
        assert!(out.truth.total_elapsed() <= out.stats.sessions * s.file_size_bits);
        assert!(out.truth.total_elapsed() >= out.stats.completed * s.file_size_bits);
        for r in &out.kpis {
            assert_eq!(r.load_time, 1.0);
        }
    }

    #[test]
    fn admission_cap_blocks_but_still_counts_access() {
        let (mut s, radio) = uniform_scenario(400.0, 7);
        s.n_periods = 1;
        s.period_s = 5;
        s.max_attached = Some(3);
        let out = run_simulation(&s, &radio).unwrap();
        assert!(out.stats.blocked > 0);
        assert_eq!(out.truth.total_access(), out.stats.sessions);
    }

    #[test]
    fn reflection_keeps_walkers_on_the_grid() {
        let grid = PixelGrid::new(Point::new(0.0, 0.0), 4, 3, 25.0).unwrap();
        let mut pos = Point::new(50.0, 30.0);
        let mut heading = (0.6f64, 0.8f64);
        for _ in 0..10_000 {
            (pos, heading) = reflect_step(&grid, pos, heading, 7.3);
            assert!(grid.locate(pos).is_some(), "{pos:?}");
            assert_relative_eq!(heading.0.hypot(heading.1), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let (s, _) = uniform_scenario(1.0, 1);
        let other = PixelGrid::new(Point::new(-100.0, -112.5), 48, 10, 25.0).unwrap();
        let radio = build_radio_map(other, &s.cells, None).unwrap();
        assert!(matches!(
            run_simulation(&s, &radio),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn invalid_parameters_name_their_field() {
        let (s, _) = uniform_scenario(1.0, 1);
        let mut bad = s.clone();
        bad.bandwidth_hz = 0.0;
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("traffic.bandwidth_hz"));
        let mut bad = s.clone();
        bad.intensity = vec![0.0; s.grid.len()];
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("traffic.intensity"));
        let mut bad = s;
        bad.aoa_error_deg = -1.0;
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("traffic.aoa_error_deg"));
    }
}
