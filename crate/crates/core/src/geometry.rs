//! Planar primitives: convex hulls, polygon clipping and minimum-area rectangles.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Bearing from the origin in degrees, in `[0, 360)`.
    pub fn bearing_deg(self) -> f64 {
        let d = self.y.atan2(self.x).to_degrees();
        let d = if d < 0.0 { d + 360.0 } else { d };
        if d >= 360.0 {
            0.0
        } else {
            d
        }
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    0.5 * acc
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point2, a: Point2, b: Point2| (a - o).cross(b - o);
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Sutherland–Hodgman clipping of `subject` against the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b - a;
        let inside = |p: Point2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let edge = b - a;
    let dp = edge.cross(p - a);
    let dq = edge.cross(q - a);
    let t = dp / (dp - dq);
    p + (q - p) * t
}

/// Rectangle produced by rotating calipers: `axis` is a unit direction,
/// `extent_axis`/`extent_normal` are full side lengths along `axis` and its normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaliperRect {
    pub center: Point2,
    pub axis: Point2,
    pub extent_axis: f64,
    pub extent_normal: f64,
}

impl CaliperRect {
    pub fn area(&self) -> f64 {
        self.extent_axis * self.extent_normal
    }
}

/// Bounding rectangle of `hull` whose side is parallel to `axis`.
pub fn rect_along(hull: &[Point2], axis: Point2) -> CaliperRect {
    let normal = Point2::new(-axis.y, axis.x);
    let (mut lo_a, mut hi_a, mut lo_n, mut hi_n) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &p in hull {
        let a = p.dot(axis);
        let n = p.dot(normal);
        lo_a = lo_a.min(a);
        hi_a = hi_a.max(a);
        lo_n = lo_n.min(n);
        hi_n = hi_n.max(n);
    }
    let center = axis * (0.5 * (lo_a + hi_a)) + normal * (0.5 * (lo_n + hi_n));
    CaliperRect {
        center,
        axis,
        extent_axis: hi_a - lo_a,
        extent_normal: hi_n - lo_n,
    }
}

/// Minimum-area enclosing rectangle of a convex CCW hull (>= 3 vertices),
/// trying each hull-edge orientation.
pub fn min_area_rect(hull: &[Point2]) -> CaliperRect {
    let n = hull.len();
    let mut best: Option<CaliperRect> = None;
    for i in 0..n {
        let e = hull[(i + 1) % n] - hull[i];
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let r = rect_along(hull, e * (1.0 / len));
        if best.is_none_or(|b| r.area() < b.area()) {
            best = Some(r);
        }
    }
    best.expect("hull with at least one non-degenerate edge")
}

/// Wrap an angle in degrees to `(-180, 180]`.
pub fn wrap_deg(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Wrap an angle in radians to `(-π, π]`.
pub fn wrap_rad(r: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (r + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(c: Point2, s: f64) -> Vec<Point2> {
        let h = s / 2.0;
        vec![
            Point2::new(c.x - h, c.y - h),
            Point2::new(c.x + h, c.y - h),
            Point2::new(c.x + h, c.y + h),
            Point2::new(c.x - h, c.y + h),
        ]
    }

    #[test]
    fn hull_drops_interior_and_collinear() {
        let mut pts = square(Point2::default(), 2.0);
        pts.push(Point2::new(0.0, 0.0));
        pts.push(Point2::new(1.0, 0.0));
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert!(signed_area(&h) > 0.0);
        assert!((signed_area(&h) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn clip_half_overlap() {
        let a = square(Point2::new(0.0, 0.0), 1.0);
        let b = square(Point2::new(0.5, 0.0), 1.0);
        let inter = clip_convex(&a, &b);
        assert!((signed_area(&inter) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_disjoint_is_empty() {
        let a = square(Point2::new(0.0, 0.0), 1.0);
        let b = square(Point2::new(5.0, 0.0), 1.0);
        assert!(signed_area(&clip_convex(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn min_rect_of_rotated_rectangle() {
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let pts: Vec<Point2> = [(-2.0, -1.0), (2.0, -1.0), (2.0, 1.0), (-2.0, 1.0)]
            .iter()
            .map(|&(x, y)| Point2::new(c * x - s * y + 3.0, s * x + c * y - 1.0))
            .collect();
        let r = min_area_rect(&convex_hull(&pts));
        assert!((r.area() - 8.0).abs() < 1e-9);
        assert!((r.center.x - 3.0).abs() < 1e-9 && (r.center.y + 1.0).abs() < 1e-9);
    }

    #[test]
    fn wraps() {
        assert_eq!(wrap_deg(190.0), -170.0);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert!((wrap_rad(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(Point2::new(1.0, -1e-300).bearing_deg(), 0.0);
    }
}
