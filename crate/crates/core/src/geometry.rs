//! Observation windows.
//!
//! Windows are simple polygons (counter-clockwise vertex list, no holes).
//! Besides the basic area/containment queries this module provides the two
//! window constructions the rest of the crate relies on: convex-hull
//! dilation for inferring a window from bare point locations, and erosion
//! (inward offset by a disc), used when point patterns are translated and
//! must stay comparable on a common sub-window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    /// The points do not span a two-dimensional hull.
    #[error("input points are collinear; no 2-D convex hull exists")]
    CollinearInput,
    /// Hull dilation factor 1/sqrt(1 - w/n) is undefined when n <= w.
    #[error("degenerate dilation: {n} points, {hull_vertices} hull vertices")]
    DegenerateDilation { n: usize, hull_vertices: usize },
    #[error("erosion by radius {radius} leaves an empty window")]
    EmptyErosion { radius: f64 },
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
}

/// A planar location in micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn dist_sq(self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn diagonal(&self) -> f64 {
        (self.width() * self.width() + self.height() * self.height()).sqrt()
    }
}

/// A simple polygon observation window.
///
/// Vertices are stored counter-clockwise; construction normalises the
/// orientation and rejects self-intersecting or degenerate boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WindowJson", into = "WindowJson")]
pub struct Window {
    vertices: Vec<Point2>,
    area: f64,
    bbox: Rect,
}

/// Wire format: `{"vertices": [[x, y], ...]}`.
#[derive(Serialize, Deserialize)]
struct WindowJson {
    vertices: Vec<[f64; 2]>,
}

impl TryFrom<WindowJson> for Window {
    type Error = GeometryError;

    fn try_from(json: WindowJson) -> Result<Self, Self::Error> {
        Window::try_new(
            json.vertices
                .into_iter()
                .map(|[x, y]| Point2::new(x, y))
                .collect(),
        )
    }
}

impl From<Window> for WindowJson {
    fn from(w: Window) -> Self {
        WindowJson {
            vertices: w.vertices.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl Window {
    /// Builds a window from a vertex list, validating that the polygon is
    /// simple with positive area. Clockwise input is reversed.
    pub fn try_new(mut vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidPolygon(
                "non-finite vertex coordinate".into(),
            ));
        }
        // Drop repeated consecutive vertices (including a closing repeat).
        vertices.dedup_by(|a, b| a == b);
        if vertices.len() > 1 && vertices[0] == *vertices.last().unwrap() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidPolygon(
                "polygon needs at least 3 distinct vertices".into(),
            ));
        }
        let signed = signed_area(&vertices);
        if signed < 0.0 {
            vertices.reverse();
        }
        let area = signed.abs();
        if area <= 0.0 {
            return Err(GeometryError::InvalidPolygon("polygon area is zero".into()));
        }
        if !is_simple(&vertices) {
            return Err(GeometryError::InvalidPolygon(
                "polygon boundary self-intersects".into(),
            ));
        }
        Ok(Self::assemble(vertices, area))
    }

    /// Constructor for rings produced by raster tracing; skips the O(m^2)
    /// simplicity check (the trace is simple by construction).
    fn from_traced_ring(mut vertices: Vec<Point2>) -> Result<Self, GeometryError> {
        let signed = signed_area(&vertices);
        if signed < 0.0 {
            vertices.reverse();
        }
        let area = signed.abs();
        if vertices.len() < 3 || area <= 0.0 {
            return Err(GeometryError::InvalidPolygon("degenerate traced ring".into()));
        }
        Ok(Self::assemble(vertices, area))
    }

    fn assemble(vertices: Vec<Point2>, area: f64) -> Self {
        let bbox = bounding_box(&vertices);
        Window {
            vertices,
            area,
            bbox,
        }
    }

    /// Axis-aligned rectangle window.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Window::try_new(vec![
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    /// Area centroid of the polygon.
    pub fn centroid(&self) -> Point2 {
        polygon_centroid(&self.vertices)
    }

    /// Point-in-polygon test; points on the boundary count as inside.
    pub fn contains(&self, p: Point2) -> bool {
        let r = self.bbox;
        let eps = 1e-9 * (1.0 + r.diagonal());
        if p.x < r.x0 - eps || p.x > r.x1 + eps || p.y < r.y0 - eps || p.y > r.y1 + eps {
            return false;
        }
        if self.boundary_distance(p) <= eps {
            return true;
        }
        // Even-odd ray casting; boundary hits were already resolved above.
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let vi = self.vertices[i];
            let vj = self.vertices[j];
            if (vi.y > p.y) != (vj.y > p.y) {
                let x_cross = vj.x + (p.y - vj.y) / (vi.y - vj.y) * (vi.x - vj.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Distance from `p` to the polygon boundary (zero on the boundary).
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        let n = self.vertices.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            best = best.min(segment_distance(p, a, b));
        }
        best
    }

    /// True when every interior angle turns the same way.
    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        let tol = 1e-12 * (1.0 + self.bbox.diagonal().powi(2));
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            if cross(a, b, c) < -tol {
                return false;
            }
        }
        true
    }

    /// Returns the rectangle when the window is an axis-aligned 4-gon.
    pub fn as_axis_rectangle(&self) -> Option<Rect> {
        if self.vertices.len() != 4 {
            return None;
        }
        let v = &self.vertices;
        for i in 0..4 {
            let a = v[i];
            let b = v[(i + 1) % 4];
            if a.x != b.x && a.y != b.y {
                return None;
            }
        }
        Some(self.bbox)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Window {
        let vertices: Vec<Point2> = self
            .vertices
            .iter()
            .map(|p| Point2::new(p.x + dx, p.y + dy))
            .collect();
        Self::assemble(vertices, self.area)
    }

    /// `|W ∩ (W + v)|` for convex windows; `None` when the window is not
    /// convex (translation edge weights are only defined for that case here).
    pub fn overlap_area_translated(&self, dx: f64, dy: f64) -> Option<f64> {
        if let Some(r) = self.as_axis_rectangle() {
            let w = (r.width() - dx.abs()).max(0.0);
            let h = (r.height() - dy.abs()).max(0.0);
            return Some(w * h);
        }
        if !self.is_convex() {
            return None;
        }
        let mut poly = self.vertices.clone();
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            // Edge of the translated polygon as an inward half-plane.
            let (nx, ny) = inward_normal(a, b);
            let c = nx * (a.x + dx) + ny * (a.y + dy);
            poly = clip_halfplane(&poly, nx, ny, c);
            if poly.len() < 3 {
                return Some(0.0);
            }
        }
        Some(signed_area(&poly).abs())
    }

    /// Inward offset by `radius`: the set of points whose distance-`radius`
    /// disc fits inside the window. Exact for convex windows (half-plane
    /// clipping); general polygons go through a raster distance transform at
    /// resolution `radius / 50` followed by boundary tracing.
    pub fn erode(&self, radius: f64) -> Result<Window, GeometryError> {
        if radius.is_nan() || radius < 0.0 {
            return Err(GeometryError::InvalidPolygon(
                "erosion radius must be non-negative".into(),
            ));
        }
        if radius == 0.0 {
            return Ok(self.clone());
        }
        if self.is_convex() {
            let mut poly = self.vertices.clone();
            let n = self.vertices.len();
            for i in 0..n {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let (nx, ny) = inward_normal(a, b);
                let c = nx * a.x + ny * a.y + radius;
                poly = clip_halfplane(&poly, nx, ny, c);
                if poly.len() < 3 {
                    return Err(GeometryError::EmptyErosion { radius });
                }
            }
            if signed_area(&poly).abs() <= 0.0 {
                return Err(GeometryError::EmptyErosion { radius });
            }
            return Window::try_new(poly)
                .map_err(|_| GeometryError::EmptyErosion { radius });
        }
        self.erode_raster(radius)
    }

    fn erode_raster(&self, radius: f64) -> Result<Window, GeometryError> {
        let r = self.bbox;
        let mut h = radius / 50.0;
        let max_cells = 2048.0;
        h = h.max(r.width() / max_cells).max(r.height() / max_cells);
        let nx = (r.width() / h).ceil() as usize + 1;
        let ny = (r.height() / h).ceil() as usize + 1;

        let cx = |ix: usize| r.x0 + (ix as f64 + 0.5) * h;
        let cy = |iy: usize| r.y0 + (iy as f64 + 0.5) * h;

        let mut inside = vec![false; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                inside[iy * nx + ix] = self.contains(Point2::new(cx(ix), cy(iy)));
            }
        }
        // Squared distance (cell units) from each cell to the outside set;
        // cells on the grid edge border the implicit outside.
        let d2 = edt_squared(&inside, nx, ny);
        let r_cells = radius / h;
        let keep: Vec<bool> = inside
            .iter()
            .zip(d2.iter())
            .map(|(&ins, &d)| ins && d >= r_cells * r_cells)
            .collect();

        let component = largest_component(&keep, nx, ny)
            .ok_or(GeometryError::EmptyErosion { radius })?;
        let ring = trace_boundary(&component, nx, ny)
            .ok_or(GeometryError::EmptyErosion { radius })?;
        let pts: Vec<Point2> = ring
            .into_iter()
            .map(|(ix, iy)| Point2::new(cx(ix), cy(iy)))
            .collect();
        let simplified = simplify_ring(&pts, h);
        Window::from_traced_ring(simplified).map_err(|_| GeometryError::EmptyErosion { radius })
    }
}

/// Convex hull of the points dilated about the hull centroid by
/// `1 / sqrt(1 - w/n)`, where `w` is the hull vertex count. Keeps inferred
/// windows from hugging the extreme points too tightly.
pub fn ripley_rasson_window(points: &[Point2]) -> Result<Window, GeometryError> {
    let n = points.len();
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(GeometryError::CollinearInput);
    }
    let w = hull.len();
    if n <= w {
        return Err(GeometryError::DegenerateDilation {
            n,
            hull_vertices: w,
        });
    }
    let factor = 1.0 / (1.0 - w as f64 / n as f64).sqrt();
    let c = polygon_centroid(&hull);
    let dilated: Vec<Point2> = hull
        .iter()
        .map(|p| Point2::new(c.x + factor * (p.x - c.x), c.y + factor * (p.y - c.y)))
        .collect();
    Window::try_new(dilated)
}

/// Strict convex hull (collinear boundary points dropped), counter-clockwise.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.iter().copied().filter(|p| p.is_finite()).collect();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup();
    let n = pts.len();
    if n < 3 {
        return Vec::new();
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Vec::new();
    }
    hull
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn signed_area(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn polygon_centroid(vertices: &[Point2]) -> Point2 {
    let n = vertices.len();
    let mut a = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = vertices[i];
        let q = vertices[(i + 1) % n];
        let w = p.x * q.y - q.x * p.y;
        a += w;
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    Point2::new(cx / (3.0 * a), cy / (3.0 * a))
}

fn bounding_box(vertices: &[Point2]) -> Rect {
    let mut r = Rect {
        x0: f64::INFINITY,
        y0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y1: f64::NEG_INFINITY,
    };
    for p in vertices {
        r.x0 = r.x0.min(p.x);
        r.y0 = r.y0.min(p.y);
        r.x1 = r.x1.max(p.x);
        r.y1 = r.y1.max(p.y);
    }
    r
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len_sq = abx * abx + aby * aby;
    if len_sq == 0.0 {
        return p.dist(a);
    }
    let t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / len_sq;
    let t = t.clamp(0.0, 1.0);
    p.dist(Point2::new(a.x + t * abx, a.y + t * aby))
}

/// Unit normal pointing into the polygon for a CCW edge a -> b.
fn inward_normal(a: Point2, b: Point2) -> (f64, f64) {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len = (dx * dx + dy * dy).sqrt();
    (-dy / len, dx / len)
}

/// Sutherland-Hodgman step: keep the side where nx*x + ny*y >= c.
fn clip_halfplane(poly: &[Point2], nx: f64, ny: f64, c: f64) -> Vec<Point2> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let nxt = poly[(i + 1) % n];
        let dc = nx * cur.x + ny * cur.y - c;
        let dn = nx * nxt.x + ny * nxt.y - c;
        if dc >= 0.0 {
            out.push(cur);
        }
        if (dc > 0.0 && dn < 0.0) || (dc < 0.0 && dn > 0.0) {
            let t = dc / (dc - dn);
            out.push(Point2::new(
                cur.x + t * (nxt.x - cur.x),
                cur.y + t * (nxt.y - cur.y),
            ));
        }
    }
    out.dedup_by(|a, b| a == b);
    if out.len() > 1 && out[0] == *out.last().unwrap() {
        out.pop();
    }
    out
}

/// O(m^2) segment-pair test; adjacent edges share exactly one endpoint.
fn is_simple(vertices: &[Point2]) -> bool {
    let n = vertices.len();
    for i in 0..n {
        let a1 = vertices[i];
        let a2 = vertices[(i + 1) % n];
        for j in (i + 1)..n {
            // Skip adjacent edges (they legitimately share an endpoint).
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let b1 = vertices[j];
            let b2 = vertices[(j + 1) % n];
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn segments_intersect(p1: Point2, p2: Point2, q1: Point2, q2: Point2) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |d: f64, a: Point2, b: Point2, p: Point2| {
        d == 0.0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    };
    on(d1, q1, q2, p1) || on(d2, q1, q2, p2) || on(d3, p1, p2, q1) || on(d4, p1, p2, q2)
}

/// Felzenszwalb-Huttenlocher squared Euclidean distance transform to the
/// complement of `inside` (grid borders count as outside).
fn edt_squared(inside: &[bool], nx: usize, ny: usize) -> Vec<f64> {
    const INF: f64 = 1e18;
    let mut d = vec![0.0_f64; nx * ny];
    for i in 0..nx * ny {
        d[i] = if inside[i] { INF } else { 0.0 };
    }
    // Column pass: 1-D transform along y, with virtual outside rows at both
    // ends so boundary cells see the complement.
    let mut f = vec![0.0_f64; ny + 2];
    let mut out = vec![0.0_f64; ny + 2];
    for ix in 0..nx {
        f[0] = 0.0;
        f[ny + 1] = 0.0;
        for iy in 0..ny {
            f[iy + 1] = d[iy * nx + ix];
        }
        dt_1d(&f, &mut out);
        for iy in 0..ny {
            d[iy * nx + ix] = out[iy + 1];
        }
    }
    let mut f = vec![0.0_f64; nx + 2];
    let mut out = vec![0.0_f64; nx + 2];
    for iy in 0..ny {
        f[0] = 0.0;
        f[nx + 1] = 0.0;
        for ix in 0..nx {
            f[ix + 1] = d[iy * nx + ix];
        }
        dt_1d(&f, &mut out);
        for ix in 0..nx {
            d[iy * nx + ix] = out[ix + 1];
        }
    }
    d
}

fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0_f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

/// Largest 4-connected true-component of the mask.
fn largest_component(mask: &[bool], nx: usize, ny: usize) -> Option<Vec<bool>> {
    let mut label = vec![0u32; nx * ny];
    let mut best: (u32, usize) = (0, 0);
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..nx * ny {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(c) = stack.pop() {
            size += 1;
            let (ix, iy) = (c % nx, c / nx);
            let mut push = |jx: usize, jy: usize| {
                let j = jy * nx + jx;
                if mask[j] && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if ix > 0 {
                push(ix - 1, iy);
            }
            if ix + 1 < nx {
                push(ix + 1, iy);
            }
            if iy > 0 {
                push(ix, iy - 1);
            }
            if iy + 1 < ny {
                push(ix, iy + 1);
            }
        }
        if size > best.1 {
            best = (id, size);
        }
    }
    if best.1 == 0 {
        return None;
    }
    Some(label.iter().map(|&l| l == best.0).collect())
}

/// Moore-neighbour boundary trace of the component, returning cell indices.
fn trace_boundary(mask: &[bool], nx: usize, ny: usize) -> Option<Vec<(usize, usize)>> {
    let at = |ix: i64, iy: i64| -> bool {
        ix >= 0 && iy >= 0 && (ix as usize) < nx && (iy as usize) < ny
            && mask[iy as usize * nx + ix as usize]
    };
    let start = (0..nx * ny).find(|&i| mask[i])?;
    let (sx, sy) = ((start % nx) as i64, (start / nx) as i64);
    // Clockwise Moore neighbourhood starting west.
    const DIRS: [(i64, i64); 8] = [
        (-1, 0),
        (-1, -1),
        (0, -1),
        (1, -1),
        (1, 0),
        (1, 1),
        (0, 1),
        (-1, 1),
    ];
    let mut ring = vec![(sx as usize, sy as usize)];
    let mut cur = (sx, sy);
    let mut backtrack = 0usize; // came from west
    let limit = 8 * nx * ny;
    for _ in 0..limit {
        let mut found = None;
        for step in 0..8 {
            let dir = (backtrack + 1 + step) % 8;
            let cand = (cur.0 + DIRS[dir].0, cur.1 + DIRS[dir].1);
            if at(cand.0, cand.1) {
                found = Some((cand, dir));
                break;
            }
        }
        let (next, dir) = found?; // isolated single cell has no boundary ring
        if next == (sx, sy) && ring.len() > 2 {
            return Some(ring);
        }
        ring.push((next.0 as usize, next.1 as usize));
        cur = next;
        backtrack = (dir + 4) % 8;
    }
    None
}

/// Douglas-Peucker on a closed ring.
fn simplify_ring(pts: &[Point2], tol: f64) -> Vec<Point2> {
    if pts.len() <= 8 {
        return pts.to_vec();
    }
    // Split at the two mutually farthest-ish points (first and midpoint).
    let mid = pts.len() / 2;
    let mut out = Vec::new();
    dp(&pts[..=mid], tol, &mut out);
    out.pop();
    dp(&pts[mid..], tol, &mut out);
    out.pop();
    // Close back to the start implicitly.
    let mut ring = out;
    ring.dedup_by(|a, b| a == b);
    if ring.len() > 1 && ring[0] == *ring.last().unwrap() {
        ring.pop();
    }
    ring
}

fn dp(pts: &[Point2], tol: f64, out: &mut Vec<Point2>) {
    if pts.len() < 3 {
        out.extend_from_slice(pts);
        return;
    }
    let a = pts[0];
    let b = *pts.last().unwrap();
    let mut worst = 0.0;
    let mut idx = 0;
    for (i, &p) in pts.iter().enumerate().skip(1).take(pts.len() - 2) {
        let d = segment_distance(p, a, b);
        if d > worst {
            worst = d;
            idx = i;
        }
    }
    if worst <= tol {
        out.push(a);
        out.push(b);
        return;
    }
    dp(&pts[..=idx], tol, out);
    out.pop();
    dp(&pts[idx..], tol, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square() -> Window {
        Window::rectangle(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn shoelace_area_and_containment() {
        let w = unit_square();
        assert_eq!(w.area(), 1.0);
        assert!(w.contains(Point2::new(0.5, 0.5)));
        assert!(!w.contains(Point2::new(2.0, 2.0)));
        assert!(w.contains(Point2::new(0.0, 0.5))); // boundary counts

        let tri = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap();
        assert_relative_eq!(tri.area(), 0.5);
        assert!(tri.contains(Point2::new(0.1, 0.1)));
    }

    #[test]
    fn clockwise_input_is_normalised() {
        let w = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(1.0, 1.0),
            Point2::new(1.0, 0.0),
        ])
        .unwrap();
        assert!(signed_area(w.vertices()) > 0.0);
        assert_eq!(w.area(), 1.0);
    }

    #[test]
    fn self_intersecting_polygon_rejected() {
        let bowtie = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ]);
        assert!(matches!(bowtie, Err(GeometryError::InvalidPolygon(_))));
    }

    #[test]
    fn ripley_rasson_unit_square_case() {
        // 4 corner points plus 4 strictly interior: hull is the unit square,
        // w = 4, n = 8, factor = sqrt(2).
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.3, 0.4),
            Point2::new(0.6, 0.2),
            Point2::new(0.5, 0.7),
            Point2::new(0.2, 0.6),
        ];
        let w = ripley_rasson_window(&pts).unwrap();
        assert_relative_eq!(w.area(), 2.0, max_relative = 1e-12);
        let c = w.centroid();
        assert_relative_eq!(c.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.y, 0.5, epsilon = 1e-12);
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let bb = w.bbox();
        assert_relative_eq!(bb.x0, 0.5 - half, epsilon = 1e-12);
        assert_relative_eq!(bb.x1, 0.5 + half, epsilon = 1e-12);
        for p in &pts {
            assert!(w.contains(*p));
        }
    }

    #[test]
    fn ripley_rasson_degenerate_cases() {
        let square = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        assert!(matches!(
            ripley_rasson_window(&square),
            Err(GeometryError::DegenerateDilation {
                n: 4,
                hull_vertices: 4
            })
        ));
        let collinear = vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.5, 0.5),
            Point2::new(1.0, 1.0),
        ];
        assert!(matches!(
            ripley_rasson_window(&collinear),
            Err(GeometryError::CollinearInput)
        ));
    }

    #[test]
    fn erode_rectangle_exact() {
        let w = unit_square();
        let e = w.erode(0.1).unwrap();
        assert_relative_eq!(e.area(), 0.64, epsilon = 1e-12);
        let bb = e.bbox();
        assert_relative_eq!(bb.x0, 0.1, epsilon = 1e-12);
        assert_relative_eq!(bb.y1, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn erode_identity_and_empty() {
        let w = unit_square();
        assert_eq!(w.erode(0.0).unwrap(), w);
        assert!(matches!(
            w.erode(0.6),
            Err(GeometryError::EmptyErosion { .. })
        ));
    }

    #[test]
    fn erode_monotone_in_radius() {
        let w = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.5, 1.5),
            Point2::new(1.0, 2.2),
            Point2::new(-0.3, 1.0),
        ])
        .unwrap();
        let e1 = w.erode(0.1).unwrap();
        let e2 = w.erode(0.25).unwrap();
        assert!(e2.area() < e1.area());
        for p in e2.vertices() {
            assert!(e1.contains(*p));
        }
    }

    #[test]
    fn rectangle_erosion_area_formula() {
        let w = Window::rectangle(0.0, 0.0, 3.0, 2.0).unwrap();
        for r in [0.05, 0.2, 0.5, 0.9] {
            let e = w.erode(r).unwrap();
            assert_relative_eq!(e.area(), (3.0 - 2.0 * r) * (2.0 - 2.0 * r), epsilon = 1e-10);
        }
    }

    #[test]
    fn erode_nonconvex_matches_brute_force_area() {
        // L-shaped polygon: erosion runs through the raster path.
        let w = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.0, 1.0),
            Point2::new(1.0, 1.0),
            Point2::new(1.0, 2.0),
            Point2::new(0.0, 2.0),
        ])
        .unwrap();
        let radius = 0.15;
        let e = w.erode(radius).unwrap();
        // Brute force: fraction of sample points with boundary distance >= r.
        let n = 300;
        let mut kept = 0usize;
        for iy in 0..n {
            for ix in 0..n {
                let p = Point2::new((ix as f64 + 0.5) * 2.0 / n as f64,
                                    (iy as f64 + 0.5) * 2.0 / n as f64);
                if w.contains(p) && w.boundary_distance(p) >= radius {
                    kept += 1;
                }
            }
        }
        let brute = kept as f64 * (2.0 / n as f64) * (2.0 / n as f64);
        assert_relative_eq!(e.area(), brute, max_relative = 0.03);
        // Eroded window stays inside the original.
        for p in e.vertices() {
            assert!(w.contains(*p));
        }
    }

    #[test]
    fn translation_overlap_rectangle_and_convex_agree() {
        let w = unit_square();
        assert_relative_eq!(w.overlap_area_translated(0.3, 0.2).unwrap(), 0.7 * 0.8);
        // Same rectangle expressed as a generic convex polygon (5 vertices).
        let poly = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.5, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ])
        .unwrap();
        assert_relative_eq!(
            poly.overlap_area_translated(0.3, 0.2).unwrap(),
            0.7 * 0.8,
            epsilon = 1e-12
        );
    }

    #[test]
    fn window_json_round_trip() {
        let w = Window::try_new(vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.5, 0.1),
            Point2::new(1.0, 3.0),
        ])
        .unwrap();
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"vertices\""));
        let back: Window = serde_json::from_str(&json).unwrap();
        assert_eq!(w, back);
    }
}
