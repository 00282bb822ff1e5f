//! Radio substrate: cells, macro path loss with a sector antenna pattern,
//! and the per-pixel RSRP / best-server fingerprint map.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angular_offset, bearing_from_north, wrap_degrees, PixelGrid, Point};

/// Distances below this are clamped before taking the log.
pub const MIN_DISTANCE_M: f64 = 10.0;
/// Loss at 1 km for the urban macro model, dB.
pub const PATH_LOSS_AT_1KM_DB: f64 = 128.1;
/// Loss slope, dB per decade of distance.
pub const PATH_LOSS_SLOPE_DB: f64 = 37.6;
pub const DEFAULT_BEAMWIDTH_DEG: f64 = 65.0;
pub const DEFAULT_MAX_ATTENUATION_DB: f64 = 30.0;
pub const DEFAULT_TX_POWER_DBM: f64 = 46.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Horizontal antenna pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Antenna {
    /// Isotropic in the horizontal plane.
    Omni,
    /// Parabolic sector pattern `min(12 (offset / beamwidth)^2, max_attenuation)`.
    Sector {
        /// Boresight, degrees clockwise from north.
        azimuth_deg: f64,
        /// 3 dB beamwidth, degrees.
        beamwidth_deg: f64,
        max_attenuation_db: f64,
    },
}

impl Antenna {
    pub fn sector(azimuth_deg: f64) -> Self {
        Antenna::Sector {
            azimuth_deg,
            beamwidth_deg: DEFAULT_BEAMWIDTH_DEG,
            max_attenuation_db: DEFAULT_MAX_ATTENUATION_DB,
        }
    }

    /// Attenuation towards a target at `bearing_deg` (anticlockwise from north).
    pub fn attenuation_db(&self, bearing_deg: f64) -> f64 {
        match *self {
            Antenna::Omni => 0.0,
            Antenna::Sector {
                azimuth_deg,
                beamwidth_deg,
                max_attenuation_db,
            } => {
                // Antenna azimuths are clockwise; bearings anticlockwise.
                let clockwise = wrap_degrees(360.0 - bearing_deg);
                let off = angular_offset(clockwise, azimuth_deg) / beamwidth_deg;
                (12.0 * off * off).min(max_attenuation_db)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub site: Point,
    pub antenna: Antenna,
    pub tx_power_dbm: f64,
}

impl Cell {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("cells[{}].{f}", self.id);
        if let Antenna::Sector {
            azimuth_deg,
            beamwidth_deg,
            max_attenuation_db,
        } = self.antenna
        {
            if !(0.0..360.0).contains(&azimuth_deg) {
                return Err(Error::config(field("azimuth_deg"), "must lie in [0, 360)"));
            }
            if !(beamwidth_deg > 0.0) {
                return Err(Error::config(field("beamwidth_deg"), "must be positive"));
            }
            if !(max_attenuation_db >= 0.0) {
                return Err(Error::config(
                    field("max_attenuation_db"),
                    "must be non-negative",
                ));
            }
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(Error::config(field("tx_power_dbm"), "must be finite"));
        }
        Ok(())
    }
}

/// Macro path loss plus antenna attenuation, dB.
///
/// `128.1 + 37.6 log10(max(d, 10 m) / 1 km) + A(offset)`.
pub fn path_loss(distance_m: f64, cell: &Cell, bearing_deg: f64) -> f64 {
    let d = distance_m.max(MIN_DISTANCE_M);
    PATH_LOSS_AT_1KM_DB
        + PATH_LOSS_SLOPE_DB * (d / 1000.0).log10()
        + cell.antenna.attenuation_db(bearing_deg)
}

/// First `n` positions of a hexagonal lattice with spacing `isd`, in
/// spiral order: the center, then ring 1, ring 2, ...
pub fn hex_sites(n: usize, isd: f64) -> Vec<Point> {
    // Axial directions for a lattice with a neighbour due east.
    const DIRS: [(i64, i64); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
    let to_point = |q: i64, r: i64| {
        let (q, r) = (q as f64, r as f64);
        Point::new(isd * (q + r / 2.0), isd * r * 3f64.sqrt() / 2.0)
    };
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(to_point(0, 0));
    let mut ring = 1i64;
    while out.len() < n {
        // Start of ring k: k steps along direction 4.
        let (mut q, mut r) = (DIRS[4].0 * ring, DIRS[4].1 * ring);
        for dir in DIRS {
            for _ in 0..ring {
                if out.len() == n {
                    return out;
                }
                out.push(to_point(q, r));
                q += dir.0;
                r += dir.1;
            }
        }
        ring += 1;
    }
    out
}

/// Three cells per site with boresights 120° apart, starting at
/// `first_azimuth_deg`. Ids are `3 * site + sector`.
pub fn tri_sector_cells(
    sites: &[Point],
    first_azimuth_deg: f64,
    beamwidth_deg: f64,
    tx_power_dbm: f64,
) -> Vec<Cell> {
    sites
        .iter()
        .enumerate()
        .flat_map(|(s, &site)| {
            (0..3).map(move |k| Cell {
                id: CellId((3 * s + k) as u32),
                site,
                antenna: Antenna::Sector {
                    azimuth_deg: wrap_degrees(first_azimuth_deg + 120.0 * k as f64),
                    beamwidth_deg,
                    max_attenuation_db: DEFAULT_MAX_ATTENUATION_DB,
                },
                tx_power_dbm,
            })
        })
        .collect()
}

/// Log-normal shadowing, independent per pixel and cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shadowing {
    pub sigma_db: f64,
    pub seed: u64,
}

/// Per-pixel, per-cell received power plus the best-server fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioMap {
    grid: PixelGrid,
    cells: Vec<Cell>,
    /// Pixel-major: `rsrp[p * n_cells + c]`, dBm.
    rsrp: Vec<f64>,
    best: Vec<u32>,
    second_best: Vec<u32>,
    dist: Vec<f64>,
    bearing: Vec<f64>,
    degenerate: Vec<bool>,
}

/// Builds the RSRP map and its derived fields. Cells are re-ordered by id;
/// all per-cell indices in the map refer to that order.
pub fn build_radio_map(
    grid: PixelGrid,
    cells: &[Cell],
    shadowing: Option<Shadowing>,
) -> Result<RadioMap> {
    if cells.len() < 2 {
        return Err(Error::config("layout", "at least 2 cells are required"));
    }
    let mut cells = cells.to_vec();
    cells.sort_by_key(|c| c.id);
    for w in cells.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::config(
                "layout",
                format!("duplicate cell id {}", w[0].id),
            ));
        }
    }
    for c in &cells {
        c.validate()?;
    }
    let n_cells = cells.len();
    let n_pix = grid.len();

    let shadow: Option<Vec<f64>> = match shadowing {
        Some(s) if s.sigma_db > 0.0 => {
            let normal = Normal::new(0.0, s.sigma_db)
                .map_err(|e| Error::config("propagation.shadowing_sigma_db", e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            Some(
                (0..n_pix * n_cells)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            )
        }
        Some(s) if s.sigma_db < 0.0 => {
            return Err(Error::config(
                "propagation.shadowing_sigma_db",
                "must be non-negative",
            ));
        }
        _ => None,
    };

    let mut rsrp = vec![0.0; n_pix * n_cells];
    rsrp.par_chunks_mut(n_cells)
        .enumerate()
        .for_each(|(p, row)| {
            let center = grid.center_of(p);
            for (c, cell) in cells.iter().enumerate() {
                let b = bearing_from_north(cell.site, center).degrees;
                let loss = path_loss(cell.site.distance(&center), cell, b);
                let s = shadow.as_ref().map_or(0.0, |v| v[p * n_cells + c]);
                row[c] = cell.tx_power_dbm - loss - s;
            }
        });

    let fields: Vec<(u32, u32, f64, f64, bool)> = rsrp
        .par_chunks(n_cells)
        .enumerate()
        .map(|(p, row)| {
            let (best, second) = top_two(row);
            let center = grid.center_of(p);
            let site = cells[best].site;
            let b = bearing_from_north(site, center);
            (
                best as u32,
                second as u32,
                site.distance(&center),
                b.degrees,
                b.degenerate,
            )
        })
        .collect();

    let mut map = RadioMap {
        grid,
        cells,
        rsrp,
        best: Vec::with_capacity(n_pix),
        second_best: Vec::with_capacity(n_pix),
        dist: Vec::with_capacity(n_pix),
        bearing: Vec::with_capacity(n_pix),
        degenerate: Vec::with_capacity(n_pix),
    };
    for (b, s, d, br, deg) in fields {
        map.best.push(b);
        map.second_best.push(s);
        map.dist.push(d);
        map.bearing.push(br);
        map.degenerate.push(deg);
    }
    Ok(map)
}

/// Indices of the strongest and second-strongest entries; ties go to the
/// lower index (cells are sorted by id, so the lower id wins).
fn top_two(row: &[f64]) -> (usize, usize) {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    let mut second = usize::MAX;
    for c in 0..row.len() {
        if c != best && (second == usize::MAX || row[c] > row[second]) {
            second = c;
        }
    }
    (best, second)
}

impl RadioMap {
    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    /// Cells sorted by id.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Position of `id` in [`RadioMap::cells`].
    pub fn cell_index(&self, id: CellId) -> Option<usize> {
        self.cells.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn cell_ids(&self) -> HashSet<CellId> {
        self.cells.iter().map(|c| c.id).collect()
    }

    pub fn rsrp(&self, pixel: usize, cell: usize) -> f64 {
        self.rsrp[pixel * self.cells.len() + cell]
    }

    pub fn rsrp_row(&self, pixel: usize) -> &[f64] {
        let n = self.cells.len();
        &self.rsrp[pixel * n..(pixel + 1) * n]
    }

    /// Cell index of the strongest server at `pixel`.
    pub fn best(&self, pixel: usize) -> usize {
        self.best[pixel] as usize
    }

    pub fn second_best(&self, pixel: usize) -> usize {
        self.second_best[pixel] as usize
    }

    pub fn best_id(&self, pixel: usize) -> CellId {
        self.cells[self.best(pixel)].id
    }

    pub fn second_best_id(&self, pixel: usize) -> CellId {
        self.cells[self.second_best(pixel)].id
    }

    /// Distance from the best server's site to the pixel center, meters.
    pub fn dist(&self, pixel: usize) -> f64 {
        self.dist[pixel]
    }

    /// Bearing from the best server's site to the pixel center, degrees
    /// anticlockwise from north.
    pub fn bearing(&self, pixel: usize) -> f64 {
        self.bearing[pixel]
    }

    /// True where the pixel center coincides with its best server's site.
    pub fn is_degenerate(&self, pixel: usize) -> bool {
        self.degenerate[pixel]
    }

    /// Strongest cell other than `serving` at `pixel`.
    pub fn strongest_except(&self, pixel: usize, serving: usize) -> usize {
        if self.best(pixel) == serving {
            self.second_best(pixel)
        } else {
            self.best(pixel)
        }
    }

    /// Writes one row per pixel:
    /// `i,j,x,y,best_cell,second_best_cell,dist_m,bearing_deg,rsrp_best_dbm`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RADIO_HEADER)?;
        for p in 0..self.grid.len() {
            let (i, j) = self.grid.coords(p);
            let c = self.grid.center(i, j);
            w.write_record([
                i.to_string(),
                j.to_string(),
                c.x.to_string(),
                c.y.to_string(),
                self.best_id(p).to_string(),
                self.second_best_id(p).to_string(),
                self.dist(p).to_string(),
                self.bearing(p).to_string(),
                self.rsrp(p, self.best(p)).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Checks that an exported radio-map file describes this map: same
    /// grid, same best and second-best servers and best-server RSRP per
    /// pixel.
    pub fn check_rows(&self, rows: &[RadioRow]) -> Result<()> {
        if rows.len() != self.grid.len() {
            return Err(Error::Mismatch(format!(
                "radio map file has {} pixels, expected {} ({}x{})",
                rows.len(),
                self.grid.len(),
                self.grid.width(),
                self.grid.height()
            )));
        }
        let tol = 1e-6 * self.grid.resolution();
        for r in rows {
            if r.i >= self.grid.width() || r.j >= self.grid.height() {
                return Err(Error::Mismatch(format!(
                    "pixel ({}, {}) lies outside the grid",
                    r.i, r.j
                )));
            }
            let p = self.grid.index(r.i, r.j);
            let c = self.grid.center(r.i, r.j);
            if (c.x - r.x).abs() > tol || (c.y - r.y).abs() > tol {
                return Err(Error::Mismatch(format!(
                    "pixel ({}, {}) center ({}, {}) does not match grid center ({}, {})",
                    r.i, r.j, r.x, r.y, c.x, c.y
                )));
            }
            if r.best_cell != self.best_id(p) || r.second_best_cell != self.second_best_id(p) {
                return Err(Error::Mismatch(format!(
                    "pixel ({}, {}) servers {}/{} differ from layout servers {}/{}",
                    r.i,
                    r.j,
                    r.best_cell,
                    r.second_best_cell,
                    self.best_id(p),
                    self.second_best_id(p)
                )));
            }
            let rsrp = self.rsrp(p, self.best(p));
            if (rsrp - r.rsrp_best_dbm).abs() > 1e-6 {
                return Err(Error::Mismatch(format!(
                    "pixel ({}, {}) best-server RSRP {} dBm differs from layout RSRP {} dBm",
                    r.i, r.j, r.rsrp_best_dbm, rsrp
                )));
            }
        }
        Ok(())
    }
}

pub const RADIO_HEADER: [&str; 9] = [
    "i",
    "j",
    "x",
    "y",
    "best_cell",
    "second_best_cell",
    "dist_m",
    "bearing_deg",
    "rsrp_best_dbm",
];

/// One parsed row of an exported radio map.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RadioRow {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub best_cell: CellId,
    pub second_best_cell: CellId,
    pub dist_m: f64,
    pub bearing_deg: f64,
    pub rsrp_best_dbm: f64,
}

pub fn read_radio_csv<R: Read>(input: R, path: &str) -> Result<Vec<RadioRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_string(),
            source: e,
        })?
        .clone();
    if header.iter().ne(RADIO_HEADER.iter().copied()) {
        return Err(Error::parse(
            path,
            1,
            "header",
            format!("expected `{}`", RADIO_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.deserialize::<RadioRow>().enumerate() {
        let row = rec.map_err(|e| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| RADIO_HEADER.get(f as usize))
                    .copied()
                    .unwrap_or("row"),
                _ => "row",
            };
            Error::parse(path, n + 2, field, e.to_string())
        })?;
        rows.push(row);
    }
    Ok(rows)
}
