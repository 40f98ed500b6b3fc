//! Workpiece silhouettes and the two affordance anchors.
//!
//! A [`PlanarShape`] carries both an occupancy raster and its vectorized
//! boundary (one counterclockwise outer loop plus clockwise hole loops). The
//! polygon is authoritative for moments and tangents; the raster backs the
//! material test used by anchor selection and perception.
//!
//! All operations report points in the world frame, i.e. after applying the
//! shape's planar pose.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Point2, Vector2};

use crate::textio::{content_lines, parse_f64, parse_num, LineError};

/// Half-width of the central-difference stencil used for rim tangents, in samples.
pub const TANGENT_STENCIL: usize = 3;

/// Maximum relative disagreement between polygon area and raster area.
pub const AREA_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("shape has no occupied cells")]
    EmptyShape,
    #[error("anchor is {distance_mm:.3} mm from the boundary (limit one cell)")]
    AnchorOffBoundary { distance_mm: f64 },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape file {0}")]
    Parse(#[from] LineError),
}

/// Planar rigid transform (mm, rad) of a shape frame over the table plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub const fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn rotate(&self, v: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn apply(&self, p: Point2<f64>) -> Point2<f64> {
        let v = self.rotate(p.coords);
        Point2::new(v.x + self.x, v.y + self.y)
    }

    pub fn inverse_apply(&self, p: Point2<f64>) -> Point2<f64> {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffordanceClass {
    Front,
    Back,
}

impl AffordanceClass {
    pub fn as_str(self) -> &'static str {
        match self {
            AffordanceClass::Front => "Front",
            AffordanceClass::Back => "Back",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Front" | "front" => Some(Self::Front),
            "Back" | "back" => Some(Self::Back),
            _ => None,
        }
    }
}

/// Unit tag carried by every anchor so pixel and metric coordinates never mix silently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorUnit {
    Pixel,
    Millimeter,
}

impl AnchorUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            AnchorUnit::Pixel => "px",
            AnchorUnit::Millimeter => "mm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "px" => Some(Self::Pixel),
            "mm" => Some(Self::Millimeter),
            _ => None,
        }
    }
}

/// Affordance class plus the 2-D anchor it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffordanceObservation {
    pub cls: AffordanceClass,
    pub anchor: Point2<f64>,
    pub unit: AnchorUnit,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub c_geo: Point2<f64>,
}

/// Binary occupancy raster. Row 0 is the lowest `y`; `origin` is the
/// lower-left corner of cell `(0, 0)` in the shape frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cell_mm: f64,
    origin: Point2<f64>,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        cell_mm: f64,
        origin: Point2<f64>,
        cells: Vec<bool>,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidShape("zero-sized grid".into()));
        }
        if !(cell_mm.is_finite() && cell_mm > 0.0) {
            return Err(GeometryError::InvalidShape("cell size must be positive".into()));
        }
        if width.checked_mul(height) != Some(cells.len()) {
            return Err(GeometryError::InvalidShape("cell count does not match dimensions".into()));
        }
        Ok(Self { width, height, cell_mm, origin, cells })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_mm(&self) -> f64 {
        self.cell_mm
    }

    pub fn origin(&self) -> Point2<f64> {
        self.origin
    }

    /// Occupancy at `(col, row)`; anything outside the raster is free.
    pub fn get(&self, col: i64, row: i64) -> bool {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            return false;
        }
        self.cells[row as usize * self.width + col as usize]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point2<f64> {
        Point2::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_mm,
            self.origin.y + (row as f64 + 0.5) * self.cell_mm,
        )
    }

    /// Cell index containing `p` (may be out of range).
    pub fn cell_of(&self, p: Point2<f64>) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.cell_mm).floor() as i64,
            ((p.y - self.origin.y) / self.cell_mm).floor() as i64,
        )
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |r| (0..self.width).map(move |c| (c, r)))
            .filter(move |&(c, r)| self.cells[r * self.width + c])
    }

    fn vertex(&self, col: i64, row: i64) -> Point2<f64> {
        Point2::new(
            self.origin.x + col as f64 * self.cell_mm,
            self.origin.y + row as f64 * self.cell_mm,
        )
    }
}

/// A workpiece silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarShape {
    grid: OccupancyGrid,
    outer: Vec<Point2<f64>>,
    holes: Vec<Vec<Point2<f64>>>,
    frame: Pose2,
}

impl PlanarShape {
    /// Builds a shape from polygon loops (any orientation) and rasterizes it
    /// with the given cell size.
    pub fn from_polygon(
        outer: Vec<Point2<f64>>,
        holes: Vec<Vec<Point2<f64>>>,
        cell_mm: f64,
    ) -> Result<Self, GeometryError> {
        if !(cell_mm.is_finite() && cell_mm > 0.0) {
            return Err(GeometryError::InvalidShape("cell size must be positive".into()));
        }
        let outer = normalize_loop(outer, true)?;
        let holes = holes
            .into_iter()
            .map(|h| normalize_loop(h, false))
            .collect::<Result<Vec<_>, _>>()?;
        let mut all: Vec<&[Point2<f64>]> = vec![&outer];
        all.extend(holes.iter().map(|h| h.as_slice()));
        if !loops_are_simple(&all) {
            return Err(GeometryError::InvalidShape("polygon is self-intersecting".into()));
        }
        let area = region_area(&all);
        if area <= 0.0 {
            return Err(GeometryError::InvalidShape("polygon area must be positive".into()));
        }

        let (mut lo, mut hi) = (outer[0], outer[0]);
        for p in &outer {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let origin = Point2::new(
            (lo.x / cell_mm).floor() * cell_mm - cell_mm,
            (lo.y / cell_mm).floor() * cell_mm - cell_mm,
        );
        let width = ((hi.x - origin.x) / cell_mm).ceil() as usize + 1;
        let height = ((hi.y - origin.y) / cell_mm).ceil() as usize + 1;
        if width.saturating_mul(height) > 50_000_000 {
            return Err(GeometryError::InvalidShape("raster too large for cell size".into()));
        }
        let mut cells = vec![false; width * height];
        for row in 0..height {
            let y = origin.y + (row as f64 + 0.5) * cell_mm;
            for (col, slot) in cells[row * width..(row + 1) * width].iter_mut().enumerate() {
                let x = origin.x + (col as f64 + 0.5) * cell_mm;
                *slot = inside_loops(&all, Point2::new(x, y));
            }
        }
        let grid = OccupancyGrid::new(width, height, cell_mm, origin, cells)?;
        let count = grid.occupied_count();
        if count == 0 {
            return Err(GeometryError::EmptyShape);
        }
        let raster_area = count as f64 * cell_mm * cell_mm;
        if ((raster_area - area) / area).abs() > AREA_TOLERANCE {
            return Err(GeometryError::InvalidShape(format!(
                "raster area {raster_area:.3} disagrees with polygon area {area:.3}; use a finer cell"
            )));
        }
        Ok(Self { grid, outer, holes, frame: Pose2::identity() })
    }

    /// Vectorizes a raster by tracing cell-edge contours. Diagonal-only
    /// contact does not connect cells; the raster must form one component.
    pub fn from_grid(grid: OccupancyGrid) -> Result<Self, GeometryError> {
        if grid.occupied_count() == 0 {
            return Err(GeometryError::EmptyShape);
        }
        let loops = trace_contours(&grid);
        let mut outer = None;
        let mut holes = Vec::new();
        for l in loops {
            if signed_area(&l) > 0.0 {
                if outer.is_some() {
                    return Err(GeometryError::InvalidShape(
                        "raster has more than one connected component".into(),
                    ));
                }
                outer = Some(l);
            } else {
                holes.push(l);
            }
        }
        let outer = outer.ok_or(GeometryError::EmptyShape)?;
        Ok(Self { grid, outer, holes, frame: Pose2::identity() })
    }

    pub fn with_frame(mut self, frame: Pose2) -> Self {
        self.frame = frame;
        self
    }

    pub fn frame(&self) -> Pose2 {
        self.frame
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn cell_mm(&self) -> f64 {
        self.grid.cell_mm
    }

    /// Outer boundary loop in the shape frame, counterclockwise.
    pub fn outer(&self) -> &[Point2<f64>] {
        &self.outer
    }

    /// Hole loops in the shape frame, clockwise.
    pub fn holes(&self) -> &[Vec<Point2<f64>>] {
        &self.holes
    }

    fn loops(&self) -> Vec<&[Point2<f64>]> {
        let mut all: Vec<&[Point2<f64>]> = vec![&self.outer];
        all.extend(self.holes.iter().map(|h| h.as_slice()));
        all
    }

    /// Region area in mm².
    pub fn area(&self) -> f64 {
        region_area(&self.loops())
    }

    /// Local-frame axis-aligned bounds `(min, max)` of the outer loop.
    pub fn local_bounds(&self) -> (Point2<f64>, Point2<f64>) {
        let (mut lo, mut hi) = (self.outer[0], self.outer[0]);
        for p in &self.outer {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// True if the world point lies inside the region or on its boundary.
    pub fn contains(&self, world: Point2<f64>) -> bool {
        let p = self.frame.inverse_apply(world);
        inside_loops(&self.loops(), p) || self.distance_to_boundary_local(p) < 1e-9
    }

    /// Distance from a shape-frame point to the region, 0 inside.
    pub(crate) fn distance_to_region_local(&self, p: Point2<f64>) -> f64 {
        if inside_loops(&self.loops(), p) {
            0.0
        } else {
            self.distance_to_boundary_local(p)
        }
    }

    fn distance_to_boundary_local(&self, p: Point2<f64>) -> f64 {
        self.loops()
            .iter()
            .flat_map(|l| edges(l))
            .map(|(a, b)| (closest_on_segment(a, b, p) - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Mirror image across the local `y` axis (what the camera sees when the
    /// part lies on its other face).
    pub fn mirrored(&self) -> Self {
        let flip = |l: &Vec<Point2<f64>>| -> Vec<Point2<f64>> {
            l.iter().rev().map(|p| Point2::new(-p.x, p.y)).collect()
        };
        let g = &self.grid;
        let mut cells = vec![false; g.cells.len()];
        for r in 0..g.height {
            for c in 0..g.width {
                cells[r * g.width + (g.width - 1 - c)] = g.cells[r * g.width + c];
            }
        }
        let grid = OccupancyGrid {
            width: g.width,
            height: g.height,
            cell_mm: g.cell_mm,
            origin: Point2::new(-(g.origin.x + g.width as f64 * g.cell_mm), g.origin.y),
            cells,
        };
        Self {
            grid,
            outer: flip(&self.outer),
            holes: self.holes.iter().map(flip).collect(),
            frame: self.frame,
        }
    }

    /// Densified loops in the local frame, one sample list per loop.
    fn sampled_loops(&self) -> Vec<Vec<Point2<f64>>> {
        self.loops().iter().map(|l| densify(l, self.grid.cell_mm)).collect()
    }

    fn centroid_local(&self) -> Point2<f64> {
        let mut a = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for l in self.loops() {
            for (p, q) in edges(l) {
                let cr = p.x * q.y - q.x * p.y;
                a += cr;
                cx += (p.x + q.x) * cr;
                cy += (p.y + q.y) * cr;
            }
        }
        Point2::new(cx / (3.0 * a), cy / (3.0 * a))
    }
}

/// Area-weighted first moment of the region.
pub fn centroid(shape: &PlanarShape) -> Result<Centroid, GeometryError> {
    if shape.grid.occupied_count() == 0 {
        return Err(GeometryError::EmptyShape);
    }
    Ok(Centroid { c_geo: shape.frame.apply(shape.centroid_local()) })
}

/// Boundary samples (outer loop first, then holes) at spacing of at most one cell.
pub fn boundary(shape: &PlanarShape) -> Result<Vec<Point2<f64>>, GeometryError> {
    if shape.grid.occupied_count() == 0 {
        return Err(GeometryError::EmptyShape);
    }
    Ok(shape
        .sampled_loops()
        .into_iter()
        .flatten()
        .map(|p| shape.frame.apply(p))
        .collect())
}

/// Nearest point of material to the centroid. For regions containing their
/// centroid this is the centroid itself.
pub fn stability_anchor(shape: &PlanarShape) -> Result<AffordanceObservation, GeometryError> {
    if shape.grid.occupied_count() == 0 {
        return Err(GeometryError::EmptyShape);
    }
    let c = shape.centroid_local();
    let anchor = if inside_loops(&shape.loops(), c) {
        c
    } else {
        shape
            .loops()
            .iter()
            .flat_map(|l| edges(l))
            .map(|(a, b)| closest_on_segment(a, b, c))
            .min_by(|p, q| (p - c).norm().total_cmp(&(q - c).norm()))
            .expect("shape has at least one edge")
    };
    Ok(AffordanceObservation {
        cls: AffordanceClass::Front,
        anchor: shape.frame.apply(anchor),
        unit: AnchorUnit::Millimeter,
        timestamp: 0.0,
    })
}

/// Boundary sample farthest from the centroid. Ties (within 1e-9 relative)
/// go to the smallest polar angle about the centroid, measured in the shape
/// frame so the choice is attached to the body.
pub fn pivot_anchor(shape: &PlanarShape) -> Result<AffordanceObservation, GeometryError> {
    if shape.grid.occupied_count() == 0 {
        return Err(GeometryError::EmptyShape);
    }
    let c = shape.centroid_local();
    let mut best: Option<(f64, f64, Point2<f64>)> = None;
    for p in shape.sampled_loops().into_iter().flatten() {
        let d = (p - c).norm();
        let ang = polar_angle(p - c);
        best = match best {
            None => Some((d, ang, p)),
            Some((bd, ba, bp)) => {
                let tol = 1e-9 * (1.0 + bd);
                if d > bd + tol || ((d - bd).abs() <= tol && ang < ba) {
                    Some((d, ang, p))
                } else {
                    Some((bd, ba, bp))
                }
            }
        };
    }
    let (_, _, p) = best.expect("boundary is non-empty");
    Ok(AffordanceObservation {
        cls: AffordanceClass::Back,
        anchor: shape.frame.apply(p),
        unit: AnchorUnit::Millimeter,
        timestamp: 0.0,
    })
}

/// Unit tangent of the boundary at `anchor`, oriented with the centroid on its left.
pub fn rim_tangent(shape: &PlanarShape, anchor: Point2<f64>) -> Result<Vector2<f64>, GeometryError> {
    let local = shape.frame.inverse_apply(anchor);
    let loops = shape.sampled_loops();
    let mut best: Option<(f64, usize, usize)> = None;
    for (li, l) in loops.iter().enumerate() {
        for (i, p) in l.iter().enumerate() {
            let d = (p - local).norm();
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, li, i));
            }
        }
    }
    let (_, li, i) = best.ok_or(GeometryError::EmptyShape)?;
    let dist = shape.distance_to_boundary_local(local);
    if dist > shape.grid.cell_mm {
        return Err(GeometryError::AnchorOffBoundary { distance_mm: dist });
    }
    let l = &loops[li];
    let n = l.len();
    let k = TANGENT_STENCIL.min((n - 1) / 2).max(1);
    let fwd = l[(i + k) % n];
    let back = l[(i + n - k) % n];
    let mut t = fwd - back;
    let norm = t.norm();
    if norm == 0.0 {
        return Err(GeometryError::InvalidShape("degenerate boundary near anchor".into()));
    }
    t /= norm;
    let to_c = shape.centroid_local() - l[i];
    if t.x * to_c.y - t.y * to_c.x < 0.0 {
        t = -t;
    }
    Ok(shape.frame.rotate(t))
}

/// Polar angle in `[0, 2π)`.
fn polar_angle(v: Vector2<f64>) -> f64 {
    let a = v.y.atan2(v.x);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

fn edges(l: &[Point2<f64>]) -> impl Iterator<Item = (Point2<f64>, Point2<f64>)> + '_ {
    (0..l.len()).map(move |i| (l[i], l[(i + 1) % l.len()]))
}

fn signed_area(l: &[Point2<f64>]) -> f64 {
    0.5 * edges(l).map(|(p, q)| p.x * q.y - q.x * p.y).sum::<f64>()
}

fn region_area(loops: &[&[Point2<f64>]]) -> f64 {
    loops.iter().map(|l| signed_area(l)).sum()
}

fn normalize_loop(mut l: Vec<Point2<f64>>, ccw: bool) -> Result<Vec<Point2<f64>>, GeometryError> {
    if l.len() > 1 && l.first() == l.last() {
        l.pop();
    }
    l.dedup();
    if l.len() < 3 {
        return Err(GeometryError::InvalidShape("loop needs at least 3 vertices".into()));
    }
    if l.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(GeometryError::InvalidShape("non-finite vertex".into()));
    }
    let a = signed_area(&l);
    if a == 0.0 {
        return Err(GeometryError::InvalidShape("loop has zero area".into()));
    }
    if (a > 0.0) != ccw {
        l.reverse();
    }
    Ok(l)
}

fn inside_loops(loops: &[&[Point2<f64>]], p: Point2<f64>) -> bool {
    let mut inside = false;
    for l in loops {
        for (a, b) in edges(l) {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
    }
    inside
}

pub(crate) fn closest_on_segment(a: Point2<f64>, b: Point2<f64>, p: Point2<f64>) -> Point2<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

fn densify(l: &[Point2<f64>], spacing: f64) -> Vec<Point2<f64>> {
    let mut out = Vec::new();
    for (a, b) in edges(l) {
        let n = ((b - a).norm() / spacing).ceil().max(1.0) as usize;
        for k in 0..n {
            out.push(a + (b - a) * (k as f64 / n as f64));
        }
    }
    out
}

fn segments_cross(a: Point2<f64>, b: Point2<f64>, c: Point2<f64>, d: Point2<f64>) -> bool {
    let orient = |p: Point2<f64>, q: Point2<f64>, r: Point2<f64>| {
        (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x)
    };
    let on_seg = |p: Point2<f64>, q: Point2<f64>, r: Point2<f64>| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_seg(c, d, a))
        || (d2 == 0.0 && on_seg(c, d, b))
        || (d3 == 0.0 && on_seg(a, b, c))
        || (d4 == 0.0 && on_seg(a, b, d))
}

fn loops_are_simple(loops: &[&[Point2<f64>]]) -> bool {
    let segs: Vec<(usize, usize, Point2<f64>, Point2<f64>)> = loops
        .iter()
        .enumerate()
        .flat_map(|(li, l)| edges(l).enumerate().map(move |(i, (a, b))| (li, i, a, b)))
        .collect();
    for (x, &(la, ia, a, b)) in segs.iter().enumerate() {
        for &(lb, ib, c, d) in &segs[x + 1..] {
            if la == lb {
                let n = loops[la].len();
                if ib == ia + 1 || (ia == 0 && ib == n - 1) {
                    continue;
                }
            }
            if segments_cross(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Traces cell-edge contours with occupied cells on the left, so outer loops
/// come out counterclockwise and holes clockwise. At pinch vertices the left
/// turn is taken, which keeps diagonal neighbours apart.
fn trace_contours(grid: &OccupancyGrid) -> Vec<Vec<Point2<f64>>> {
    type V = (i64, i64);
    let mut out_edges: HashMap<V, Vec<V>> = HashMap::new();
    let mut count = 0usize;
    for (c, r) in grid.occupied_cells() {
        let (c, r) = (c as i64, r as i64);
        let mut add = |from: V, to: V| {
            out_edges.entry(from).or_default().push(to);
            count += 1;
        };
        if !grid.get(c, r - 1) {
            add((c, r), (c + 1, r));
        }
        if !grid.get(c + 1, r) {
            add((c + 1, r), (c + 1, r + 1));
        }
        if !grid.get(c, r + 1) {
            add((c + 1, r + 1), (c, r + 1));
        }
        if !grid.get(c - 1, r) {
            add((c, r + 1), (c, r));
        }
    }
    let mut starts: Vec<V> = out_edges.keys().copied().collect();
    starts.sort_unstable();
    let mut loops = Vec::new();
    let mut used = 0usize;
    for s in starts {
        while let Some(first) = out_edges.get_mut(&s).and_then(|v| v.pop()) {
            used += 1;
            let mut verts = vec![s];
            let mut prev = s;
            let mut cur = first;
            while cur != s {
                verts.push(cur);
                let din = (cur.0 - prev.0, cur.1 - prev.1);
                let cands = out_edges.get_mut(&cur).expect("contour edges always chain");
                let pick = if cands.len() == 1 {
                    0
                } else {
                    let left = (-din.1, din.0);
                    cands
                        .iter()
                        .position(|n| (n.0 - cur.0, n.1 - cur.1) == left)
                        .unwrap_or(0)
                };
                let next = cands.swap_remove(pick);
                used += 1;
                prev = cur;
                cur = next;
            }
            let pts = simplify_collinear(&verts);
            loops.push(pts.into_iter().map(|(c, r)| grid.vertex(c, r)).collect());
        }
    }
    debug_assert_eq!(used, count);
    loops
}

fn simplify_collinear(v: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let n = v.len();
    (0..n)
        .filter(|&i| {
            let a = v[(i + n - 1) % n];
            let b = v[i];
            let c = v[(i + 1) % n];
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
        })
        .map(|i| v[i])
        .collect()
}

/// Parses the shape file format: a `width height cell_mm` header followed by
/// `height` rows of `0`/`1` characters, top row first.
pub fn parse_shape_file(text: &str) -> Result<OccupancyGrid, GeometryError> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| LineError::new(1, "missing header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(LineError::new(hl, "header must be: width height cell_mm").into());
    }
    let width: usize = parse_num(toks[0], hl, "width")?;
    let height: usize = parse_num(toks[1], hl, "height")?;
    let cell_mm = parse_f64(toks[2], hl, "cell_mm")?;
    if width == 0 || height == 0 || width > 8192 || height > 8192 {
        return Err(LineError::new(hl, "dimensions must be in 1..=8192").into());
    }
    if cell_mm <= 0.0 {
        return Err(LineError::new(hl, "cell_mm must be positive").into());
    }
    let mut cells = vec![false; width * height];
    let mut row_idx = 0usize;
    for (ln, row) in lines {
        if row_idx >= height {
            return Err(LineError::new(ln, "more rows than declared height").into());
        }
        if row.len() != width {
            return Err(LineError::new(ln, format!("row has {} cells, expected {width}", row.len())).into());
        }
        let r = height - 1 - row_idx;
        for (c, ch) in row.bytes().enumerate() {
            cells[r * width + c] = match ch {
                b'0' => false,
                b'1' => true,
                _ => return Err(LineError::new(ln, "cells must be 0 or 1").into()),
            };
        }
        row_idx += 1;
    }
    if row_idx != height {
        return Err(LineError::new(hl, format!("expected {height} rows, found {row_idx}")).into());
    }
    OccupancyGrid::new(width, height, cell_mm, Point2::origin(), cells)
}

pub fn write_shape_file(grid: &OccupancyGrid) -> String {
    let mut out = format!("{} {} {}\n", grid.width, grid.height, grid.cell_mm);
    for r in (0..grid.height).rev() {
        for c in 0..grid.width {
            out.push(if grid.cells[r * grid.width + c] { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Exports the boundary loops in world millimetres; hole loops follow the
/// outer loop, each introduced by a `# hole` line.
pub fn polygon_csv(shape: &PlanarShape) -> String {
    let mut out = String::from("x_mm,y_mm\n");
    for (i, l) in shape.loops().iter().enumerate() {
        if i > 0 {
            out.push_str("# hole\n");
        }
        for p in l.iter() {
            let w = shape.frame.apply(*p);
            let _ = writeln!(out, "{},{}", w.x, w.y);
        }
    }
    out
}

/// Regular polygon approximating a disk, for tests and synthetic parts.
pub fn disk_polygon(center: Point2<f64>, radius: f64, segments: usize) -> Vec<Point2<f64>> {
    (0..segments)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / segments as f64;
            Point2::new(center.x + radius * a.cos(), center.y + radius * a.sin())
        })
        .collect()
}

pub fn rect_polygon(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point2<f64>> {
    vec![
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ]
}
