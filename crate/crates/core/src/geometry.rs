//! Planar geometry: points in meters (+y = north) and the pixel raster that
//! every map in the pipeline is indexed by.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Point reached by travelling `distance` meters from `self` along a
    /// bearing measured anticlockwise from north.
    pub fn offset_by_bearing(&self, distance: f64, bearing_deg: f64) -> Point {
        let b = bearing_deg.to_radians();
        Point::new(self.x - distance * b.sin(), self.y + distance * b.cos())
    }
}

/// Angle from a site to a target, anticlockwise from geographic north.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    pub degrees: f64,
    /// Set when site and target coincide; `degrees` is then 0.
    pub degenerate: bool,
}

/// Bearing of `target` as seen from `site`, in [0, 360), measured
/// anticlockwise from north (+y). North is 0°, west 90°, south 180°.
pub fn bearing_from_north(site: Point, target: Point) -> Bearing {
    let dx = target.x - site.x;
    let dy = target.y - site.y;
    if dx == 0.0 && dy == 0.0 {
        return Bearing {
            degrees: 0.0,
            degenerate: true,
        };
    }
    // atan2(-dx, dy) is the anticlockwise angle from +y.
    let deg = (-dx).atan2(dy).to_degrees();
    Bearing {
        degrees: wrap_degrees(deg),
        degenerate: false,
    }
}

/// Wraps an angle into [0, 360).
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Smallest absolute angular difference between two directions, in [0, 180].
pub fn angular_offset(a_deg: f64, b_deg: f64) -> f64 {
    let d = wrap_degrees(a_deg - b_deg);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Rectangular raster of square pixels. Pixel `(i, j)` has column `i`
/// (east) and row `j` (north); its center is
/// `origin + ((i + 0.5), (j + 0.5)) * resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    origin: Point,
    width: usize,
    height: usize,
    resolution: f64,
}

impl PixelGrid {
    pub fn new(origin: Point, width: usize, height: usize, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::config(
                "grid.resolution",
                "must be a positive finite number of meters",
            ));
        }
        if width == 0 {
            return Err(Error::config("grid.width", "must be at least 1 pixel"));
        }
        if height == 0 {
            return Err(Error::config("grid.height", "must be at least 1 pixel"));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(Error::config("grid.origin", "must be finite"));
        }
        Ok(PixelGrid {
            origin,
            width,
            height,
            resolution,
        })
    }

    /// Smallest grid with the given resolution whose extent covers the
    /// bounding box of `points` grown by `margin` meters on every side.
    pub fn covering(points: &[Point], margin: f64, resolution: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("layout", "no sites to cover"));
        }
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::config(
                "grid.resolution",
                "must be a positive finite number of meters",
            ));
        }
        let w = (((x1 - x0) + 2.0 * margin) / resolution).ceil().max(1.0) as usize;
        let h = (((y1 - y0) + 2.0 * margin) / resolution).ceil().max(1.0) as usize;
        Self::new(Point::new(x0 - margin, y0 - margin), w, h, resolution)
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.width && j < self.height);
        j * self.width + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    pub fn center(&self, i: usize, j: usize) -> Point {
        Point::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn center_of(&self, idx: usize) -> Point {
        let (i, j) = self.coords(idx);
        self.center(i, j)
    }

    pub fn x_max(&self) -> f64 {
        self.origin.x + self.width as f64 * self.resolution
    }

    pub fn y_max(&self) -> f64 {
        self.origin.y + self.height as f64 * self.resolution
    }

    /// Pixel containing `p`, or `None` outside the grid. Pixels are
    /// half-open: `[x0, x0 + res) x [y0, y0 + res)`.
    pub fn locate(&self, p: Point) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.resolution;
        let fy = (p.y - self.origin.y) / self.resolution;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn locate_index(&self, p: Point) -> Option<usize> {
        self.locate(p).map(|(i, j)| self.index(i, j))
    }

    /// Same extent as `self` with each pixel split into `factor x factor`.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::config("grid.refine", "factor must be at least 1"));
        }
        Self::new(
            self.origin,
            self.width * factor,
            self.height * factor,
            self.resolution / factor as f64,
        )
    }

    /// Grid shifted by `(dx, dy)` meters.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        PixelGrid {
            origin: Point::new(self.origin.x + dx, self.origin.y + dy),
            ..*self
        }
    }
}
