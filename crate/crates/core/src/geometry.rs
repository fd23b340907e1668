//! Mask geometry: border following, largest-component selection, direct
//! least-squares ellipse fitting and minimum-area rectangles.
//!
//! Coordinates are pixel centers: pixel `(x, y)` sits at `(x as f64, y as f64)`
//! with `y` growing downward.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Calibration, Modality};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mask has no foreground")]
    NoForeground,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point set is degenerate (collinear or singular scatter)")]
    Degenerate,
    #[error("fitted conic is not an ellipse")]
    NotAnEllipse,
    #[error("no measurement is defined for modality `{0}`")]
    UnsupportedModality(Modality),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Rotates about the origin by `deg` degrees.
    pub fn rotated(self, deg: f64) -> Point {
        let (s, c) = deg.to_radians().sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// A closed border of one 8-connected foreground component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub points: Vec<Point>,
}

impl Contour {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Shoelace sum over the closed polygon; positive when counterclockwise
    /// in a y-up frame.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.points)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

pub fn shoelace(points: &[Point]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, p) in points.iter().enumerate() {
        let q = points[(i + 1) % points.len()];
        sum += p.x * q.y - q.x * p.y;
    }
    sum / 2.0
}

// Clockwise on screen (y down): E, SE, S, SW, W, NW, N, NE.
const DIRS: [(isize, isize); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
const EAST: usize = 0;
const WEST: usize = 4;

fn dir_index(dx: isize, dy: isize) -> usize {
    DIRS.iter().position(|&d| d == (dx, dy)).expect("neighbor offset")
}

/// Outer borders of every 8-connected foreground component, by
/// Suzuki–Abe border following.
///
/// Each contour lists pixel centers in order, closed implicitly, and runs
/// counterclockwise as displayed (y down), i.e. its [`Contour::signed_area`]
/// is nonpositive. A lone pixel yields a one-point contour.
pub fn extract_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (w, h) = (mask.width(), mask.height());
    let pw = w + 2;
    let ph = h + 2;
    let mut f = vec![0i32; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                f[(y + 1) * pw + x + 1] = 1;
            }
        }
    }
    let idx = |x: isize, y: isize| y as usize * pw + x as usize;
    let mut nbd = 1i32;
    let mut out = Vec::new();

    for y in 1..(ph - 1) as isize {
        for x in 1..(pw - 1) as isize {
            let v = f[idx(x, y)];
            if v == 0 {
                continue;
            }
            let (outer, from) = if v == 1 && f[idx(x - 1, y)] == 0 {
                (true, WEST)
            } else if v >= 1 && f[idx(x + 1, y)] == 0 {
                (false, EAST)
            } else {
                continue;
            };
            nbd += 1;
            let points = follow_border(&mut f, pw, (x, y), from, nbd);
            if outer {
                out.push(finish_contour(points));
            }
        }
    }
    out
}

fn follow_border(f: &mut [i32], pw: usize, start: (isize, isize), from: usize, nbd: i32) -> Vec<(isize, isize)> {
    let at = |f: &[i32], x: isize, y: isize| f[y as usize * pw + x as usize];
    let (x0, y0) = start;

    // clockwise search for the first nonzero neighbor
    let first = (0..8).map(|k| (from + k) % 8).find(|&d| {
        let (dx, dy) = DIRS[d];
        at(f, x0 + dx, y0 + dy) != 0
    });
    let Some(d1) = first else {
        f[y0 as usize * pw + x0 as usize] = -nbd;
        return vec![start];
    };
    let p1 = (x0 + DIRS[d1].0, y0 + DIRS[d1].1);
    let mut prev = p1;
    let mut cur = start;
    let mut points = Vec::new();
    loop {
        let back = dir_index(prev.0 - cur.0, prev.1 - cur.1);
        let mut east_zero = false;
        let mut next = prev;
        // counterclockwise from the element after `prev`
        for k in 1..=8 {
            let d = (back + 8 - k) % 8;
            let (dx, dy) = DIRS[d];
            let (nx, ny) = (cur.0 + dx, cur.1 + dy);
            if at(f, nx, ny) != 0 {
                next = (nx, ny);
                break;
            }
            if d == EAST {
                east_zero = true;
            }
        }
        let cell = &mut f[cur.1 as usize * pw + cur.0 as usize];
        if east_zero {
            *cell = -nbd;
        } else if *cell == 1 {
            *cell = nbd;
        }
        points.push(cur);
        if next == start && cur == p1 {
            break;
        }
        prev = cur;
        cur = next;
    }
    points
}

fn finish_contour(raw: Vec<(isize, isize)>) -> Contour {
    let mut points: Vec<Point> = Vec::with_capacity(raw.len());
    for (x, y) in raw {
        let p = Point::new((x - 1) as f64, (y - 1) as f64);
        if points.last() != Some(&p) {
            points.push(p);
        }
    }
    while points.len() > 1 && points.first() == points.last() {
        points.pop();
    }
    if shoelace(&points) > 0.0 {
        points[1..].reverse();
    }
    Contour::new(points)
}

/// The contour enclosing the largest area; ties keep the first in scan order.
pub fn largest_contour(contours: &[Contour]) -> Result<&Contour, GeometryError> {
    let mut best: Option<(&Contour, f64)> = None;
    for c in contours {
        let area = c.area();
        if best.is_none_or(|(_, a)| area > a) {
            best = Some((c, area));
        }
    }
    best.map(|(c, _)| c).ok_or(GeometryError::NoForeground)
}

/// Center, semi-axes (`semi_major >= semi_minor`) and the major-axis
/// direction in degrees, in `[0, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseFit {
    pub center: Point,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub orientation_deg: f64,
}

/// Conic `A x^2 + B xy + C y^2 + D x + E y + F = 0`, scaled so `4AC - B^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conic(pub [f64; 6]);

/// Direct least-squares ellipse fit with the ellipse-specific constraint
/// `4AC - B^2 = 1`, solved in the partitioned (scatter-matrix) form on
/// centered and scaled coordinates.
pub fn fit_ellipse(points: &[Point]) -> Result<EllipseFit, GeometryError> {
    if points.len() < 5 {
        return Err(GeometryError::TooFewPoints {
            needed: 5,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let spread = (points.iter().map(|p| (p.x - mx).powi(2) + (p.y - my).powi(2)).sum::<f64>() / (2.0 * n)).sqrt();
    if !(spread > 0.0) {
        return Err(GeometryError::Degenerate);
    }

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let x = (p.x - mx) / spread;
        let y = (p.y - my) / spread;
        let quad = Vector3::new(x * x, x * y, y * y);
        let lin = Vector3::new(x, y, 1.0);
        s1 += quad * quad.transpose();
        s2 += quad * lin.transpose();
        s3 += lin * lin.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or(GeometryError::Degenerate)?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // premultiply by inv([[0, 0, 2], [0, -1, 0], [2, 0, 0]])
    let reduced = Matrix3::from_rows(&[
        (m.row(2) / 2.0).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) / 2.0).into_owned(),
    ]);
    if !reduced.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::Degenerate);
    }

    let mut best: Option<(f64, Vector3<f64>)> = None;
    for lambda in reduced.complex_eigenvalues().iter() {
        if lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let Some(v) = null_vector(&(reduced - Matrix3::identity() * lambda.re)) else {
            continue;
        };
        let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
        if constraint <= 0.0 {
            continue;
        }
        let v = v / constraint.sqrt();
        if best.as_ref().is_none_or(|(l, _)| lambda.re.abs() < l.abs()) {
            best = Some((lambda.re, v));
        }
    }
    let (_, quad) = best.ok_or(GeometryError::NotAnEllipse)?;
    let lin = t * quad;
    let conic = Conic([quad[0], quad[1], quad[2], lin[0], lin[1], lin[2]]);
    let unit = conic_to_ellipse(&conic)?;
    Ok(EllipseFit {
        center: Point::new(mx + spread * unit.center.x, my + spread * unit.center.y),
        semi_major: spread * unit.semi_major,
        semi_minor: spread * unit.semi_minor,
        orientation_deg: unit.orientation_deg,
    })
}

/// Unit vector spanning the (numerical) null space of a rank-2 matrix.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let candidates = [r[0].cross(&r[1]), r[0].cross(&r[2]), r[1].cross(&r[2])];
    let best = candidates
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("three candidates");
    let norm = best.norm();
    (norm > 0.0 && norm.is_finite()).then(|| best / norm)
}

/// Converts general conic coefficients to center, semi-axes and angle.
pub fn conic_to_ellipse(conic: &Conic) -> Result<EllipseFit, GeometryError> {
    let [mut a, mut b, mut c, mut d, mut e, mut f] = conic.0;
    if a + c < 0.0 {
        [a, b, c, d, e, f] = [-a, -b, -c, -d, -e, -f];
    }
    let det = 4.0 * a * c - b * b;
    if !(det > 0.0) {
        return Err(GeometryError::NotAnEllipse);
    }
    let x0 = (b * e - 2.0 * c * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + (d * x0 + e * y0) / 2.0;
    let mean = (a + c) / 2.0;
    let root = (((a - c) / 2.0).powi(2) + (b / 2.0).powi(2)).sqrt();
    let (small, large) = (mean - root, mean + root);
    if !(small > 0.0 && f0 < 0.0) {
        return Err(GeometryError::NotAnEllipse);
    }
    let semi_major = (-f0 / small).sqrt();
    let semi_minor = (-f0 / large).sqrt();
    if !(semi_major.is_finite() && semi_minor > 0.0) {
        return Err(GeometryError::NotAnEllipse);
    }
    let theta = 0.5 * b.atan2(a - c) + std::f64::consts::FRAC_PI_2;
    Ok(EllipseFit {
        center: Point::new(x0, y0),
        semi_major,
        semi_minor,
        orientation_deg: theta.to_degrees().rem_euclid(180.0),
    })
}

/// `2 pi b + 4 (a - b)` for semi-axes `a >= b`.
pub fn ellipse_perimeter(semi_major: f64, semi_minor: f64) -> f64 {
    2.0 * std::f64::consts::PI * semi_minor + 4.0 * (semi_major - semi_minor)
}

pub fn ellipse_circumference_px(fit: &EllipseFit) -> f64 {
    ellipse_perimeter(fit.semi_major, fit.semi_minor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Point,
    pub side_long: f64,
    pub side_short: f64,
    /// Direction of the long side in degrees, in `[0, 180)`.
    pub orientation_deg: f64,
}

impl OrientedRect {
    pub fn area(&self) -> f64 {
        self.side_long * self.side_short
    }
}

/// Convex hull by Andrew's monotone chain, counterclockwise in a y-up
/// frame, without collinear points.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(a)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        // all points collinear: keep the two extremes
        return vec![pts[0], pts[pts.len() - 1]];
    }
    hull
}

fn rect_from_extents(u: Point, umin: f64, umax: f64, nmin: f64, nmax: f64) -> OrientedRect {
    let n = Point::new(-u.y, u.x);
    let (cu, cn) = ((umin + umax) / 2.0, (nmin + nmax) / 2.0);
    let center = Point::new(u.x * cu + n.x * cn, u.y * cu + n.y * cn);
    let (len_u, len_n) = (umax - umin, nmax - nmin);
    let (side_long, side_short, dir) = if len_u >= len_n { (len_u, len_n, u) } else { (len_n, len_u, n) };
    OrientedRect {
        center,
        side_long,
        side_short,
        orientation_deg: dir.y.atan2(dir.x).to_degrees().rem_euclid(180.0),
    }
}

/// Minimum-area enclosing rectangle by rotating calipers over the convex hull.
///
/// One side of the optimum is collinear with a hull edge, so each edge is
/// tried once while the three opposing support points advance monotonically.
pub fn min_area_rect(points: &[Point]) -> Result<OrientedRect, GeometryError> {
    let hull = convex_hull(points);
    match hull.len() {
        0 => return Err(GeometryError::TooFewPoints { needed: 1, got: 0 }),
        1 => {
            return Ok(OrientedRect {
                center: hull[0],
                side_long: 0.0,
                side_short: 0.0,
                orientation_deg: 0.0,
            })
        }
        2 => {
            let d = hull[1].sub(hull[0]);
            let len = d.norm();
            return Ok(OrientedRect {
                center: Point::new((hull[0].x + hull[1].x) / 2.0, (hull[0].y + hull[1].y) / 2.0),
                side_long: len,
                side_short: 0.0,
                orientation_deg: d.y.atan2(d.x).to_degrees().rem_euclid(180.0),
            });
        }
        _ => {}
    }
    let h = hull.len();
    let edge_dir = |i: usize| {
        let d = hull[(i + 1) % h].sub(hull[i]);
        let len = d.norm();
        Point::new(d.x / len, d.y / len)
    };
    let u0 = edge_dir(0);
    let n0 = Point::new(-u0.y, u0.x);
    let argmax = |f: &dyn Fn(Point) -> f64| (0..h).max_by(|&a, &b| f(hull[a]).total_cmp(&f(hull[b]))).expect("non-empty hull");
    let mut right = argmax(&|p| p.dot(u0));
    let mut top = argmax(&|p| p.dot(n0));
    let mut left = argmax(&|p| -p.dot(u0));

    let mut best: Option<OrientedRect> = None;
    for i in 0..h {
        let u = edge_dir(i);
        let n = Point::new(-u.y, u.x);
        for _ in 0..h {
            if hull[(right + 1) % h].dot(u) >= hull[right].dot(u) {
                right = (right + 1) % h;
            } else {
                break;
            }
        }
        for _ in 0..h {
            if hull[(top + 1) % h].dot(n) >= hull[top].dot(n) {
                top = (top + 1) % h;
            } else {
                break;
            }
        }
        for _ in 0..h {
            if hull[(left + 1) % h].dot(u) <= hull[left].dot(u) {
                left = (left + 1) % h;
            } else {
                break;
            }
        }
        let rect = rect_from_extents(u, hull[left].dot(u), hull[right].dot(u), hull[i].dot(n), hull[top].dot(n));
        if best.as_ref().is_none_or(|b| better_rect(&rect, b)) {
            best = Some(rect);
        }
    }
    Ok(best.expect("hull has edges"))
}

/// Smaller area wins; areas equal up to rounding (e.g. the three edges of an
/// acute triangle) are broken by the shorter long side, which keeps the
/// chosen lengths independent of how the point set is rotated.
fn better_rect(candidate: &OrientedRect, best: &OrientedRect) -> bool {
    let (a, b) = (candidate.area(), best.area());
    let tol = 1e-10 * a.max(b).max(f64::MIN_POSITIVE);
    if (a - b).abs() > tol {
        a < b
    } else {
        candidate.side_long < best.side_long - 1e-12 * best.side_long
    }
}

pub fn femur_length_px(rect: &OrientedRect) -> f64 {
    rect.side_long
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    HeadCircumference,
    FemurLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum MeasurementFit {
    Ellipse(EllipseFit),
    Rect(OrientedRect),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub value_px: f64,
    pub value_mm: f64,
    pub fit: MeasurementFit,
}

/// Largest outer contour, then an ellipse perimeter (head) or the long side
/// of the minimum-area rectangle (femur), converted to millimetres.
pub fn measure(mask: &BinaryMask, modality: Modality, calibration: Calibration) -> Result<Measurement, GeometryError> {
    if !matches!(modality, Modality::Head | Modality::Femur) {
        return Err(GeometryError::UnsupportedModality(modality));
    }
    let contours = extract_contours(mask);
    let contour = largest_contour(&contours)?;
    let (kind, value_px, fit) = match modality {
        Modality::Head => {
            let fit = fit_ellipse(&contour.points)?;
            (MeasurementKind::HeadCircumference, ellipse_circumference_px(&fit), MeasurementFit::Ellipse(fit))
        }
        _ => {
            let rect = min_area_rect(&contour.points)?;
            (MeasurementKind::FemurLength, femur_length_px(&rect), MeasurementFit::Rect(rect))
        }
    };
    Ok(Measurement {
        kind,
        value_px,
        value_mm: calibration.to_mm(value_px),
        fit,
    })
}
