//! Raster surfaces over an observation window.
//!
//! A [`ScalarField`] stores one value per grid cell over the window's
//! bounding box; cells whose centre falls outside the window are absent
//! (stored as NaN and skipped by every aggregate).

use crate::geometry::{Point2, Window};
use serde::{Deserialize, Serialize};

/// Grid resolution for field evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: 128, ny: 128 }
    }
}

impl GridSpec {
    pub fn square(n: usize) -> Self {
        GridSpec { nx: n, ny: n }
    }
}

/// A raster surface over a window. Values at cells outside the window are
/// absent; in-window values are finite by construction of the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    window: Window,
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    /// Row-major values; NaN encodes "absent".
    values: Vec<f64>,
}

impl ScalarField {
    /// Builds a field by evaluating `f` at every in-window cell centre.
    pub fn from_fn(window: &Window, grid: GridSpec, mut f: impl FnMut(Point2) -> f64) -> Self {
        let mut field = ScalarField::absent(window, grid);
        for iy in 0..field.ny {
            for ix in 0..field.nx {
                let idx = iy * field.nx + ix;
                if field.values[idx].is_nan() {
                    continue;
                }
                field.values[idx] = f(field.cell_center(ix, iy));
            }
        }
        field
    }

    /// All-absent-outside, zero-inside field (the usual accumulator start).
    pub fn absent(window: &Window, grid: GridSpec) -> Self {
        assert!(grid.nx >= 2 && grid.ny >= 2, "grid must be at least 2x2");
        let bb = window.bbox();
        let dx = bb.width() / grid.nx as f64;
        let dy = bb.height() / grid.ny as f64;
        let mut values = vec![f64::NAN; grid.nx * grid.ny];
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let p = Point2::new(
                    bb.x0 + (ix as f64 + 0.5) * dx,
                    bb.y0 + (iy as f64 + 0.5) * dy,
                );
                if window.contains(p) {
                    values[iy * grid.nx + ix] = 0.0;
                }
            }
        }
        ScalarField {
            window: window.clone(),
            x0: bb.x0,
            y0: bb.y0,
            dx,
            dy,
            nx: grid.nx,
            ny: grid.ny,
            values,
        }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn cell_width(&self) -> f64 {
        self.dx
    }

    pub fn cell_height(&self) -> f64 {
        self.dy
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            self.x0 + (ix as f64 + 0.5) * self.dx,
            self.y0 + (iy as f64 + 0.5) * self.dy,
        )
    }

    /// Value at a cell, `None` when outside the window.
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        let v = self.values[iy * self.nx + ix];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let idx = iy * self.nx + ix;
        if !self.values[idx].is_nan() {
            self.values[idx] = v;
        }
    }

    pub(crate) fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(ix, iy, value)` over in-window cells.
    pub fn iter_inside(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let nx = self.nx;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(move |(i, &v)| (i % nx, i / nx, v))
    }

    /// Number of in-window cells.
    pub fn inside_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    /// Midpoint-rule integral over the window.
    pub fn integral(&self) -> f64 {
        let sum: f64 = self.values.iter().filter(|v| !v.is_nan()).sum();
        sum * self.cell_area()
    }

    /// Minimum and maximum over in-window cells.
    pub fn range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for v in self.values.iter().filter(|v| !v.is_nan()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
            any = true;
        }
        any.then_some((lo, hi))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            if !v.is_nan() {
                *v = f(*v);
            }
        }
        out
    }

    /// Bilinear interpolation at `p` from the surrounding cell centres;
    /// absent corners are dropped and the weights renormalised. `None` when
    /// every surrounding cell is absent.
    pub fn sample(&self, p: Point2) -> Option<f64> {
        let fx = (p.x - self.x0) / self.dx - 0.5;
        let fy = (p.y - self.y0) / self.dy - 0.5;
        let ix0 = fx.floor();
        let iy0 = fy.floor();
        let tx = fx - ix0;
        let ty = fy - iy0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (di, wx) in [(0i64, 1.0 - tx), (1i64, tx)] {
            for (dj, wy) in [(0i64, 1.0 - ty), (1i64, ty)] {
                let ix = ix0 as i64 + di;
                let iy = iy0 as i64 + dj;
                if ix < 0 || iy < 0 || ix >= self.nx as i64 || iy >= self.ny as i64 {
                    continue;
                }
                let v = self.values[iy as usize * self.nx + ix as usize];
                if v.is_nan() {
                    continue;
                }
                let w = wx * wy;
                num += w * v;
                den += w;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// The field translated by `(dx, dy)` and resampled onto `target`'s grid
    /// (bilinear). Cells of `target` with no source value become absent.
    pub fn translate_resample(&self, dx: f64, dy: f64, target: &Window, grid: GridSpec) -> ScalarField {
        let mut out = ScalarField::absent(target, grid);
        for iy in 0..out.ny {
            for ix in 0..out.nx {
                let idx = iy * out.nx + ix;
                if out.values[idx].is_nan() {
                    continue;
                }
                let c = out.cell_center(ix, iy);
                let src = Point2::new(c.x - dx, c.y - dy);
                out.values[idx] = self.sample(src).unwrap_or(f64::NAN);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Window;
    use approx::assert_relative_eq;

    #[test]
    fn integral_of_constant_field_is_area() {
        let w = Window::rectangle(0.0, 0.0, 2.0, 1.0).unwrap();
        let f = ScalarField::from_fn(&w, GridSpec::square(64), |_| 3.0);
        assert_relative_eq!(f.integral(), 6.0, max_relative = 1e-9);
    }

    #[test]
    fn outside_cells_are_absent() {
        let tri = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap();
        let f = ScalarField::from_fn(&tri, GridSpec::square(32), |_| 1.0);
        assert!(f.get(31, 31).is_none());
        assert!(f.get(1, 1).is_some());
        assert_relative_eq!(f.integral(), 0.5, max_relative = 0.05);
    }

    #[test]
    fn bilinear_sample_reproduces_linear_surface() {
        let w = Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        let f = ScalarField::from_fn(&w, GridSpec::square(32), |p| 2.0 * p.x + p.y);
        let v = f.sample(Point2::new(0.5, 0.25)).unwrap();
        assert_relative_eq!(v, 1.25, epsilon = 1e-9);
    }

    #[test]
    fn translate_resample_shifts_values() {
        let w = Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap();
        let f = ScalarField::from_fn(&w, GridSpec::square(64), |p| p.x);
        let target = Window::rectangle(0.2, 0.2, 0.8, 0.8).unwrap();
        let shifted = f.translate_resample(0.1, 0.0, &target, GridSpec::square(32));
        let v = shifted.sample(Point2::new(0.5, 0.5)).unwrap();
        assert_relative_eq!(v, 0.4, epsilon = 1e-6);
    }
}
