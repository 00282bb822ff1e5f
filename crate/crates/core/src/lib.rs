//! Traffic hotspot localization from per-cell network KPIs.
//!
//! The pipeline has four stages:
//!
//! - [`radio`] builds the pixel raster, cell layout and RSRP / best-server
//!   maps shared by every other stage.
//! - [`traffic`] simulates session arrivals, mobility and round-robin
//!   scheduling, producing ground truth and per-cell [`kpi::KpiRecord`]s.
//! - [`localizer`] turns KPI records into five per-pixel weight maps,
//!   fuses them and smooths the result into a traffic estimate.
//! - [`eval`] scores estimates against ground truth.

// Validation is written as `!(x > 0.0)` on purpose: NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod kpi;
pub mod localizer;
pub mod radio;
pub mod traffic;

pub use error::{Error, Result};
