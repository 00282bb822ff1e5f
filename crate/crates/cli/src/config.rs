//! Run configuration: one TOML file with a section per pipeline stage.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use hotspot_core::eval::{CdfKind, DEFAULT_THRESHOLDS};
use hotspot_core::geometry::{PixelGrid, Point};
use hotspot_core::kpi::{BinSpec, DEFAULT_AOA_BIN_WIDTH_DEG};
use hotspot_core::localizer::FusionConfig;
use hotspot_core::radio::{
    build_radio_map, hex_sites, tri_sector_cells, Cell, RadioMap, Shadowing, DEFAULT_BEAMWIDTH_DEG,
    DEFAULT_TX_POWER_DBM,
};
use hotspot_core::traffic::{self, intensity_map, max_range, random_hotspots, Hotspot, Scenario};
use serde::Deserialize;

use crate::CliError;

/// The bundled desk-scale configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub layout: LayoutSection,
    #[serde(default)]
    pub propagation: PropagationSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub hotspots: HotspotSection,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub paths: PathSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Pixel edge length, meters.
    pub resolution: f64,
    /// Extra coverage around the outermost sites, meters.
    pub margin_m: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            resolution: 25.0,
            margin_m: 250.0,
        }
    }
}

/// Hexagonal layout of tri-sector sites, filled ring by ring from the
/// centre.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub sites: usize,
    pub isd_m: f64,
    pub first_azimuth_deg: f64,
    pub beamwidth_deg: f64,
    pub tx_power_dbm: f64,
}

impl Default for LayoutSection {
    fn default() -> Self {
        LayoutSection {
            sites: 7,
            isd_m: 500.0,
            first_azimuth_deg: 30.0,
            beamwidth_deg: DEFAULT_BEAMWIDTH_DEG,
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationSection {
    /// Log-normal shadowing standard deviation, dB. 0 disables it.
    pub shadowing_sigma_db: f64,
    /// Shadowing seed; defaults to the run seed.
    pub shadowing_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficSection {
    pub arrival_rate: f64,
    pub bandwidth_hz: f64,
    pub file_size_bits: u64,
    pub mobile_fraction: f64,
    pub speed_mps: f64,
    pub period_s: u32,
    pub n_periods: u32,
    pub hysteresis_db: f64,
    pub noise_figure_db: f64,
    pub max_attached: Option<usize>,
    pub ta_error_m: f64,
    pub aoa_error_deg: f64,
    pub aoa_bin_width_deg: f64,
}

impl Default for TrafficSection {
    fn default() -> Self {
        TrafficSection {
            arrival_rate: 8.0,
            bandwidth_hz: traffic::DEFAULT_BANDWIDTH_HZ,
            file_size_bits: traffic::DEFAULT_FILE_SIZE_BITS,
            mobile_fraction: traffic::DEFAULT_MOBILE_FRACTION,
            speed_mps: traffic::DEFAULT_SPEED_MPS,
            period_s: traffic::DEFAULT_PERIOD_S,
            n_periods: 4,
            hysteresis_db: traffic::DEFAULT_HYSTERESIS_DB,
            noise_figure_db: traffic::DEFAULT_NOISE_FIGURE_DB,
            max_attached: None,
            ta_error_m: 80.0,
            aoa_error_deg: 25.0,
            aoa_bin_width_deg: DEFAULT_AOA_BIN_WIDTH_DEG,
        }
    }
}

/// Uniform background plus randomly placed and explicitly listed
/// Gaussian hotspots.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HotspotSection {
    pub background: f64,
    pub random_count: usize,
    pub random_sigma_m: f64,
    pub random_weight: f64,
    /// Random hotspots fall within this distance of a random site.
    pub random_max_dist_m: f64,
    pub fixed: Vec<FixedHotspot>,
}

impl Default for HotspotSection {
    fn default() -> Self {
        HotspotSection {
            background: 0.4,
            random_count: 6,
            random_sigma_m: 60.0,
            random_weight: 0.1,
            random_max_dist_m: 400.0,
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedHotspot {
    pub x: f64,
    pub y: f64,
    /// 0 concentrates the hotspot on a single pixel.
    #[serde(default)]
    pub sigma_m: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CdfKindName {
    #[default]
    Pixels,
    Mass,
}

impl From<CdfKindName> for CdfKind {
    fn from(k: CdfKindName) -> Self {
        match k {
            CdfKindName::Pixels => CdfKind::Pixels,
            CdfKindName::Mass => CdfKind::Mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Top-q% levels of the detection table.
    pub thresholds: Vec<f64>,
    pub cdf_kind: CdfKindName,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            cdf_kind: CdfKindName::Pixels,
        }
    }
}

/// Artifact locations. Relative names resolve against `out_dir`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub out_dir: PathBuf,
    pub kpis: PathBuf,
    pub truth: PathBuf,
    pub radio_map: PathBuf,
    pub weights: PathBuf,
    pub report: PathBuf,
    pub ablation: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            out_dir: "out".into(),
            kpis: "kpis.csv".into(),
            truth: "truth.csv".into(),
            radio_map: "radio_map.csv".into(),
            weights: "weights.csv".into(),
            report: "report.txt".into(),
            ablation: "ablation.csv".into(),
        }
    }
}

/// Evaluation tables written next to the report.
pub const EVAL_TABLES: [&str; 6] = [
    "detection_access.csv",
    "detection_elapsed.csv",
    "cdf_real_access.csv",
    "cdf_real_elapsed.csv",
    "cdf_est.csv",
    "summary.csv",
];

impl PathSection {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn kpis(&self) -> PathBuf {
        self.resolve(&self.kpis)
    }

    pub fn truth(&self) -> PathBuf {
        self.resolve(&self.truth)
    }

    pub fn radio_map(&self) -> PathBuf {
        self.resolve(&self.radio_map)
    }

    pub fn weights(&self) -> PathBuf {
        self.resolve(&self.weights)
    }

    pub fn report(&self) -> PathBuf {
        self.resolve(&self.report)
    }

    pub fn ablation(&self) -> PathBuf {
        self.resolve(&self.ablation)
    }

    /// Location of one of [`EVAL_TABLES`], in the report's directory.
    pub fn eval_table(&self, name: &str) -> PathBuf {
        self.report().with_file_name(name)
    }

    fn all(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![
            ("paths.kpis", self.kpis()),
            ("paths.truth", self.truth()),
            ("paths.radio_map", self.radio_map()),
            ("paths.weights", self.weights()),
            ("paths.report", self.report()),
            ("paths.ablation", self.ablation()),
        ];
        for t in EVAL_TABLES {
            v.push(("paths.report", self.eval_table(t)));
        }
        v
    }
}

fn invalid(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("invalid configuration `{key}`: {reason}"))
}

impl RunConfig {
    /// Parses a TOML document; type errors name the dotted key path.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| CliError::Validation(format!("configuration: {e}")))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Validation(format!(
                "invalid configuration `{key}`: {}",
                e.into_inner().message().trim()
            ))
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => RunConfig::from_toml(DEFAULT_CONFIG),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
        }
    }

    /// Range checks not expressible in the file format.
    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.grid;
        if !(g.margin_m >= 0.0 && g.margin_m.is_finite()) {
            return Err(invalid("grid.margin_m", "must be non-negative"));
        }
        let l = &self.layout;
        if l.sites == 0 {
            return Err(invalid("layout.sites", "must be at least 1"));
        }
        if !(l.isd_m > 0.0 && l.isd_m.is_finite()) {
            return Err(invalid("layout.isd_m", "must be positive"));
        }
        if !(l.beamwidth_deg > 0.0 && l.beamwidth_deg <= 360.0) {
            return Err(invalid("layout.beamwidth_deg", "must lie in (0, 360]"));
        }
        if !l.tx_power_dbm.is_finite() || !l.first_azimuth_deg.is_finite() {
            return Err(invalid(
                "layout",
                "tx_power_dbm and first_azimuth_deg must be finite",
            ));
        }
        let s = self.propagation.shadowing_sigma_db;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(invalid(
                "propagation.shadowing_sigma_db",
                "must be non-negative",
            ));
        }
        if self.traffic.n_periods == 0 {
            return Err(invalid("traffic.n_periods", "must be at least 1"));
        }
        let h = &self.hotspots;
        for (key, v) in [
            ("hotspots.background", h.background),
            ("hotspots.random_sigma_m", h.random_sigma_m),
            ("hotspots.random_weight", h.random_weight),
            ("hotspots.random_max_dist_m", h.random_max_dist_m),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be non-negative"));
            }
        }
        for (k, f) in h.fixed.iter().enumerate() {
            if !(f.x.is_finite() && f.y.is_finite()) {
                return Err(invalid(
                    &format!("hotspots.fixed[{k}]"),
                    "coordinates must be finite",
                ));
            }
        }
        if self.evaluation.thresholds.is_empty() {
            return Err(invalid("evaluation.thresholds", "must not be empty"));
        }
        if let Some(q) = self
            .evaluation
            .thresholds
            .iter()
            .find(|q| !(**q > 0.0 && **q <= 100.0))
        {
            return Err(invalid(
                "evaluation.thresholds",
                format!("{q} outside (0, 100]"),
            ));
        }
        self.fusion.validate()?;
        let mut seen = HashSet::new();
        for (key, p) in self.paths.all() {
            if !seen.insert(p.clone()) {
                return Err(invalid(key, format!("{} is used twice", p.display())));
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<Point> {
        hex_sites(self.layout.sites, self.layout.isd_m)
    }

    pub fn cells(&self) -> Vec<Cell> {
        let l = &self.layout;
        tri_sector_cells(
            &self.sites(),
            l.first_azimuth_deg,
            l.beamwidth_deg,
            l.tx_power_dbm,
        )
    }

    pub fn grid(&self) -> Result<PixelGrid, CliError> {
        Ok(PixelGrid::covering(
            &self.sites(),
            self.grid.margin_m,
            self.grid.resolution,
        )?)
    }

    pub fn radio_map(&self) -> Result<RadioMap, CliError> {
        let sigma = self.propagation.shadowing_sigma_db;
        let shadowing = (sigma > 0.0).then(|| Shadowing {
            sigma_db: sigma,
            seed: self.propagation.shadowing_seed.unwrap_or(self.seed),
        });
        Ok(build_radio_map(self.grid()?, &self.cells(), shadowing)?)
    }

    pub fn hotspots(&self, grid: &PixelGrid) -> Vec<Hotspot> {
        let h = &self.hotspots;
        let mut out = random_hotspots(
            grid,
            &self.sites(),
            h.random_count,
            h.random_max_dist_m,
            h.random_sigma_m,
            h.random_weight,
            self.seed,
        );
        out.extend(h.fixed.iter().map(|f| Hotspot {
            center: Point::new(f.x, f.y),
            sigma_m: f.sigma_m,
            weight: f.weight,
        }));
        out
    }

    pub fn scenario(&self, radio: &RadioMap) -> Result<Scenario, CliError> {
        let grid = *radio.grid();
        let cells = radio.cells().to_vec();
        let t = &self.traffic;
        let intensity = intensity_map(&grid, self.hotspots.background, &self.hotspots(&grid))?;
        let bins = BinSpec::covering(max_range(&grid, &cells), t.aoa_bin_width_deg)
            .map_err(|e| invalid("traffic.aoa_bin_width_deg", e))?;
        let s = Scenario {
            grid,
            cells,
            bandwidth_hz: t.bandwidth_hz,
            intensity,
            arrival_rate: t.arrival_rate,
            file_size_bits: t.file_size_bits,
            mobile_fraction: t.mobile_fraction,
            speed_mps: t.speed_mps,
            period_s: t.period_s,
            n_periods: t.n_periods,
            seed: self.seed,
            hysteresis_db: t.hysteresis_db,
            noise_figure_db: t.noise_figure_db,
            max_attached: t.max_attached,
            bins,
            ta_error_m: t.ta_error_m,
            aoa_error_deg: t.aoa_error_deg,
        };
        s.validate()?;
        Ok(s)
    }
}
