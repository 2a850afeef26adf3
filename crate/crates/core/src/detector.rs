//! Geometric detector over a fusion input: gate the concatenated Lidar cloud
//! to one sweep per bearing, cluster, fit prior-sized boxes, then confirm each
//! box against the Radar BEV map, optionally shifted by the predicted travel
//! over the pair's temporal gap.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{convex_hull, min_area_rect, rect_along, CaliperRect, Point2};
use crate::pairing::{ConcatLidarFrame, PairedFrameSet};
use crate::scene::OrientedBox;
use crate::sensors::{radar_to_bev, BevGrid, BevParams};
use crate::timebase::{ns_to_secs, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationMode {
    None,
    PerOffset,
    Mixed,
}

impl CompensationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CompensationMode::None => "none",
            CompensationMode::PerOffset => "per_offset",
            CompensationMode::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for CompensationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "per_offset" => Ok(Self::PerOffset),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Parameter(format!(
                "unknown mode {other:?}; expected none, per_offset or mixed"
            ))),
        }
    }
}

/// Scoring parameters of one dispatch branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchParams {
    pub radar_weight: f64,
    pub search_radius: f64,
    /// Multipliers on the predicted (dx, dy) travel.
    pub displacement_scale: [f64; 2],
}

impl Default for BranchParams {
    fn default() -> Self {
        Self {
            radar_weight: 0.4,
            search_radius: 1.0,
            displacement_scale: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchEntry {
    pub offset: u32,
    #[serde(flatten)]
    pub params: BranchParams,
}

fn d_cell() -> f64 {
    0.25
}
fn d_min_points() -> usize {
    5
}
fn d_prior() -> [f64; 2] {
    [4.5, 2.0]
}
fn d_saturation() -> f64 {
    15.0
}
fn d_merge_gap() -> f64 {
    1.0
}
fn d_shift_step() -> f64 {
    0.25
}
fn d_sample_spacing() -> f64 {
    0.5
}
fn d_deadband() -> f64 {
    0.5
}
fn d_assoc() -> f64 {
    1.5
}
fn d_max_speed() -> f64 {
    20.0
}
fn d_target() -> f64 {
    1.0
}
fn d_mode() -> CompensationMode {
    CompensationMode::None
}
fn d_bev() -> BevParams {
    BevParams {
        cell_size: 0.25,
        half_extent: 50.0,
    }
}

/// Detector configuration. Keys are documented in the README.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    #[serde(default = "d_cell")]
    pub cell_size: f64,
    #[serde(default = "d_min_points")]
    pub min_points: usize,
    /// Fragments closer than this are merged into one object.
    #[serde(default = "d_merge_gap")]
    pub merge_gap: f64,
    /// Vehicle length and width the fitted boxes are completed to.
    #[serde(default = "d_prior")]
    pub prior_size: [f64; 2],
    /// Point count at which the Lidar score reaches 1 − 1/e.
    #[serde(default = "d_saturation")]
    pub lidar_saturation: f64,
    #[serde(default = "d_bev")]
    pub radar_bev: BevParams,
    #[serde(default = "d_shift_step")]
    pub shift_step: f64,
    #[serde(default = "d_sample_spacing")]
    pub sample_spacing: f64,
    /// Intensity that counts as full confirmation.
    #[serde(default = "d_target")]
    pub target_return: f64,
    /// Estimated speeds below this are treated as zero.
    #[serde(default = "d_deadband")]
    pub velocity_deadband: f64,
    /// Association gate around the constant-velocity prediction.
    #[serde(default = "d_assoc")]
    pub association_radius: f64,
    #[serde(default = "d_max_speed")]
    pub max_speed: f64,
    #[serde(default = "d_mode")]
    pub mode: CompensationMode,
    #[serde(default)]
    pub default_branch: BranchParams,
    #[serde(default)]
    pub branches: Vec<BranchEntry>,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            cell_size: d_cell(),
            min_points: d_min_points(),
            merge_gap: d_merge_gap(),
            prior_size: d_prior(),
            lidar_saturation: d_saturation(),
            radar_bev: d_bev(),
            shift_step: d_shift_step(),
            sample_spacing: d_sample_spacing(),
            target_return: d_target(),
            velocity_deadband: d_deadband(),
            association_radius: d_assoc(),
            max_speed: d_max_speed(),
            mode: CompensationMode::None,
            default_branch: BranchParams::default(),
            branches: Vec::new(),
        }
    }
}

impl BranchParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.radar_weight) {
            return Err(Error::Parameter(format!(
                "radar_weight must lie in [0, 1], got {}",
                self.radar_weight
            )));
        }
        if !(self.search_radius >= 0.0) || !self.displacement_scale.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(Error::Parameter("search radius and displacement scales must be >= 0".into()));
        }
        Ok(())
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cell_size", self.cell_size),
            ("shift_step", self.shift_step),
            ("sample_spacing", self.sample_spacing),
            ("target_return", self.target_return),
            ("lidar_saturation", self.lidar_saturation),
            ("prior length", self.prior_size[0]),
            ("prior width", self.prior_size[1]),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.min_points == 0 {
            return Err(Error::Parameter("min_points must be >= 1".into()));
        }
        self.default_branch.validate()?;
        let mut seen = HashSet::new();
        for b in &self.branches {
            b.params.validate()?;
            if !seen.insert(b.offset) {
                return Err(Error::Parameter(format!("duplicate branch for offset {}", b.offset)));
            }
        }
        if self.mode == CompensationMode::PerOffset && self.branches.is_empty() {
            return Err(Error::Parameter("per_offset mode needs at least one branch".into()));
        }
        Ok(())
    }

    pub fn branch(&self, offset: u32) -> Option<&BranchParams> {
        self.branches.iter().find(|b| b.offset == offset).map(|b| &b.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Which parameters scored a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispatch {
    pub mode: CompensationMode,
    /// Branch key used in per_offset mode.
    pub branch: Option<u32>,
    /// Lidar periods of travel compensated.
    pub gap_offset: u32,
    pub params: BranchParams,
}

impl DetectorParams {
    pub fn dispatch(&self, offset: u32) -> Dispatch {
        match self.mode {
            CompensationMode::None => Dispatch {
                mode: self.mode,
                branch: None,
                gap_offset: 0,
                params: self.default_branch,
            },
            CompensationMode::Mixed => Dispatch {
                mode: self.mode,
                branch: None,
                gap_offset: offset,
                params: self.default_branch,
            },
            CompensationMode::PerOffset => match self.branch(offset) {
                Some(p) => Dispatch {
                    mode: self.mode,
                    branch: Some(offset),
                    gap_offset: offset,
                    params: *p,
                },
                None => Dispatch {
                    mode: self.mode,
                    branch: None,
                    gap_offset: offset,
                    params: self.default_branch,
                },
            },
        }
    }

    /// Force the branch keyed `key` whatever the input offset.
    pub fn forced_dispatch(&self, key: u32) -> Result<Dispatch> {
        let params = *self
            .branch(key)
            .ok_or_else(|| Error::Parameter(format!("no branch for offset {key}")))?;
        Ok(Dispatch {
            mode: CompensationMode::PerOffset,
            branch: Some(key),
            gap_offset: key,
            params,
        })
    }
}

fn cell_key(p: Point2, cell: f64) -> (i64, i64) {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
}

/// 8-connected components of occupied cells, each as point indices in input
/// order; components ordered by their smallest cell.
pub fn connected_components(points: &[Point2], cell_size: f64) -> Vec<Vec<usize>> {
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_key(*p, cell_size)).or_default().push(i);
    }
    let mut seen: HashSet<(i64, i64)> = HashSet::new();
    let mut out = Vec::new();
    for &start in cells.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            members.extend_from_slice(&cells[&c]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let n = (c.0 + dx, c.1 + dy);
                    if cells.contains_key(&n) && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Connected components with fewer than `min_points` points removed.
pub fn cluster_points(points: &[Point2], cell_size: f64, min_points: usize) -> Result<Vec<Vec<usize>>> {
    if !(cell_size > 0.0) {
        return Err(Error::Parameter(format!("cell size must be > 0, got {cell_size}")));
    }
    Ok(connected_components(points, cell_size)
        .into_iter()
        .filter(|c| c.len() >= min_points)
        .collect())
}

/// Merge components whose closest points are within `gap` (single linkage).
fn merge_fragments(points: &[Point2], comps: Vec<Vec<usize>>, gap: f64) -> Vec<Vec<usize>> {
    let n = comps.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let bounds: Vec<(Point2, Point2)> = comps
        .iter()
        .map(|c| {
            let mut lo = Point2::new(f64::MAX, f64::MAX);
            let mut hi = Point2::new(f64::MIN, f64::MIN);
            for &i in c {
                lo = Point2::new(lo.x.min(points[i].x), lo.y.min(points[i].y));
                hi = Point2::new(hi.x.max(points[i].x), hi.y.max(points[i].y));
            }
            (lo, hi)
        })
        .collect();
    for a in 0..n {
        for b in a + 1..n {
            let (la, ha) = bounds[a];
            let (lb, hb) = bounds[b];
            if la.x - hb.x > gap || lb.x - ha.x > gap || la.y - hb.y > gap || lb.y - ha.y > gap {
                continue;
            }
            let close = comps[a]
                .iter()
                .any(|&i| comps[b].iter().any(|&j| (points[i] - points[j]).norm() <= gap));
            if close {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in comps.into_iter().enumerate() {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().extend(c);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect()
}

/// Minimum-area rectangle around the cluster.
pub fn fit_oriented_box(points: &[Point2]) -> Result<OrientedBox> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} distinct non-collinear points, need 3",
            hull.len()
        )));
    }
    Ok(rect_to_box(&min_area_rect(&hull)))
}

fn rect_to_box(r: &CaliperRect) -> OrientedBox {
    OrientedBox {
        cx: r.center.x,
        cy: r.center.y,
        length: r.extent_axis,
        width: r.extent_normal,
        yaw: r.axis.y.atan2(r.axis.x),
    }
}

/// Edge-closeness score of `points` against the bounding rectangle along
/// `axis`: each point counts by the inverse of its distance to the nearer
/// side in each direction, so surfaces lying on two sides score highest.
fn closeness(points: &[Point2], axis: Point2) -> f64 {
    let normal = Point2::new(-axis.y, axis.x);
    let mut score = 0.0;
    let axes = [axis, normal];
    let bounds: Vec<(f64, f64)> = axes
        .iter()
        .map(|d| {
            points
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.dot(*d)), hi.max(p.dot(*d))))
        })
        .collect();
    for p in points {
        let d = axes
            .iter()
            .zip(&bounds)
            .map(|(a, (lo, hi))| {
                let s = p.dot(*a);
                (s - lo).min(hi - s)
            })
            .fold(f64::MAX, f64::min);
        score += 1.0 / d.max(0.01);
    }
    score
}

/// Box orientation in `[0, π/2)` whose rectangle sides best hug the points:
/// a one-degree scan refined to a twentieth of a degree, nearest first.
fn l_shape_axis(points: &[Point2]) -> Point2 {
    let dir = |deg: f64| {
        let r = deg.to_radians();
        Point2::new(r.cos(), r.sin())
    };
    let pick = |candidates: &mut dyn Iterator<Item = f64>| {
        let mut best = (f64::MIN, 0.0);
        for deg in candidates {
            let c = closeness(points, dir(deg));
            if c > best.0 {
                best = (c, deg);
            }
        }
        best.1
    };
    let coarse = pick(&mut (0..90).map(|d| d as f64));
    dir(pick(&mut (0..=40).map(|k| coarse + ((k + 1) / 2) as f64 * if k % 2 == 1 { 0.05 } else { -0.05 })))
}

/// Complete a partial outline to the prior size, growing each side away from
/// the sensor so the visible faces stay in place.
pub fn regularize_to_prior(points: &[Point2], prior: [f64; 2]) -> Option<OrientedBox> {
    let hull = convex_hull(points);
    let rect = match hull.len() {
        0 => return None,
        1 | 2 => {
            let d = if hull.len() == 2 { hull[1] - hull[0] } else { Point2::new(1.0, 0.0) };
            let n = d.norm();
            let axis = if n > 0.0 { d * (1.0 / n) } else { Point2::new(1.0, 0.0) };
            rect_along(&hull, axis)
        }
        _ => rect_along(&hull, l_shape_axis(points)),
    };
    let (len, wid) = (prior[0], prior[1]);
    let (mut u, mut eu, mut en) = (rect.axis, rect.extent_axis, rect.extent_normal);
    if en > eu {
        u = Point2::new(-u.y, u.x);
        std::mem::swap(&mut eu, &mut en);
    }
    let n = Point2::new(-u.y, u.x);
    // a lone short face is taken as the front or rear
    let (len_axis, wid_axis) = if en < 0.5 && eu < 0.5 * (len + wid) { (n, u) } else { (u, n) };
    let mut center = Point2::default();
    for (axis, target) in [(len_axis, len), (wid_axis, wid)] {
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for p in &hull {
            let s = p.dot(axis);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let mid = if hi - lo >= target {
            0.5 * (lo + hi)
        } else if rect.center.dot(axis) >= 0.0 {
            lo + 0.5 * target
        } else {
            hi - 0.5 * target
        };
        center = center + axis * mid;
    }
    Some(OrientedBox {
        cx: center.x,
        cy: center.y,
        length: len,
        width: wid,
        yaw: crate::geometry::wrap_rad(len_axis.y.atan2(len_axis.x)),
    })
}

/// A fitted object in one concatenated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectCandidate {
    pub bbox: OrientedBox,
    pub n_points: usize,
    /// Capture time of the sweep the object was fitted from, at its bearing.
    pub t_ns: Nanos,
}

/// Objects in a concatenated frame. Each bearing is first restricted to its
/// reference sweep; each object is then refitted from the single sweep that
/// supplied most of its points.
pub fn extract_objects(frame: &ConcatLidarFrame, params: &DetectorParams) -> Vec<ObjectCandidate> {
    let n = frame.points.len();
    if n == 0 {
        return Vec::new();
    }
    let mut slot_of_az: HashMap<u32, usize> = HashMap::new();
    let mut gated = Vec::new();
    for i in 0..n {
        let az = frame.points[i].azimuth_deg;
        let slot = *slot_of_az
            .entry(az.to_bits())
            .or_insert_with(|| frame.reference_slot(az as f64));
        if frame.point_source[i] as usize == slot {
            gated.push(i);
        }
    }
    let pos: Vec<Point2> = gated.iter().map(|&i| frame.points[i].position()).collect();
    let comps = merge_fragments(&pos, connected_components(&pos, params.cell_size), params.merge_gap);
    let all_pos: Vec<Point2> = frame.points.iter().map(|p| p.position()).collect();
    let mut by_slot: BTreeMap<u16, Vec<(usize, (i64, i64))>> = BTreeMap::new();
    for i in 0..n {
        by_slot
            .entry(frame.point_source[i])
            .or_default()
            .push((i, cell_key(all_pos[i], params.cell_size)));
    }
    let reach = (params.merge_gap / params.cell_size).ceil() as i64 + 1;
    let mut out = Vec::new();
    for comp in comps {
        if comp.len() < params.min_points {
            continue;
        }
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &k in &comp {
            *counts.entry(frame.point_source[gated[k]]).or_default() += 1;
        }
        let slot = counts.iter().max_by_key(|(s, c)| (**c, std::cmp::Reverse(**s))).map(|(s, _)| *s).unwrap();
        // occupied cells dilated by `reach`, on a local dense mask
        let cells: Vec<(i64, i64)> = comp.iter().map(|&k| cell_key(pos[k], params.cell_size)).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for c in &cells {
            x0 = x0.min(c.0 - reach);
            y0 = y0.min(c.1 - reach);
            x1 = x1.max(c.0 + reach);
            y1 = y1.max(c.1 + reach);
        }
        let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut mask = vec![false; w * h];
        for c in &cells {
            for x in (c.0 - reach)..=(c.0 + reach) {
                let row = (x - x0) as usize * h;
                let lo = (c.1 - reach - y0) as usize;
                mask[row + lo..=row + lo + 2 * reach as usize].fill(true);
            }
        }
        let mut members: Vec<usize> = by_slot[&slot]
            .iter()
            .filter(|(_, c)| {
                c.0 >= x0 && c.0 <= x1 && c.1 >= y0 && c.1 <= y1 && mask[(c.0 - x0) as usize * h + (c.1 - y0) as usize]
            })
            .map(|(i, _)| *i)
            .collect();
        members.sort_unstable();
        if members.len() < params.min_points {
            continue;
        }
        let pts: Vec<Point2> = members.iter().map(|&i| all_pos[i]).collect();
        let Some(bbox) = regularize_to_prior(&pts, params.prior_size) else { continue };
        let t_ns = frame.slot_capture_ns(slot as usize, bbox.center().bearing_deg());
        out.push(ObjectCandidate {
            bbox,
            n_points: members.len(),
            t_ns,
        });
    }
    out
}

/// Mean intensity at interior sample points of `bbox` translated by
/// `displacement`, divided by `target_return` and clamped to [0, 1].
pub fn radar_confirmation(
    bbox: &OrientedBox,
    grid: &BevGrid,
    displacement: (f64, f64),
    spacing: f64,
    target_return: f64,
) -> f64 {
    let samples = interior_samples(bbox, spacing);
    confirm_samples(&samples, grid, Point2::new(displacement.0, displacement.1), target_return)
}

fn interior_samples(bbox: &OrientedBox, spacing: f64) -> Vec<Point2> {
    let nl = (bbox.length / spacing).ceil().max(1.0) as usize;
    let nw = (bbox.width / spacing).ceil().max(1.0) as usize;
    let (u, v) = bbox.axes();
    let c = bbox.center();
    let mut out = Vec::with_capacity(nl * nw);
    for i in 0..nl {
        for j in 0..nw {
            let a = ((i as f64 + 0.5) / nl as f64 - 0.5) * bbox.length;
            let b = ((j as f64 + 0.5) / nw as f64 - 0.5) * bbox.width;
            out.push(c + u * a + v * b);
        }
    }
    out
}

fn confirm_samples(samples: &[Point2], grid: &BevGrid, shift: Point2, target_return: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&p| grid.sample(p + shift) as f64).sum();
    (sum / samples.len() as f64 / target_return).clamp(0.0, 1.0)
}

/// Lattice shifts (in units of `step`) within `radius` of the origin.
fn lattice_disc(radius: f64, step: f64) -> Vec<(i32, i32)> {
    let k = (radius / step + 1e-9).floor() as i32;
    let mut out = Vec::new();
    for i in -k..=k {
        for j in -k..=k {
            if ((i * i + j * j) as f64) * step * step <= radius * radius + 1e-9 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Range of shifts a feature table must answer: any search radius up to
/// `max_radius` around the travel of any gap up to `max_gap` Lidar periods
/// scaled by at most `max_scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftWindow {
    pub max_radius: f64,
    pub max_gap: u32,
    pub max_scale: f64,
}

impl ShiftWindow {
    pub fn for_dispatch(d: &Dispatch) -> Self {
        Self {
            max_radius: d.params.search_radius,
            max_gap: d.gap_offset,
            max_scale: d.params.displacement_scale[0].max(d.params.displacement_scale[1]).max(0.0),
        }
    }
}

/// Confirmation at every lattice shift in a rectangle of shift cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTable {
    i0: i32,
    j0: i32,
    ni: usize,
    nj: usize,
    values: Vec<f32>,
}

impl ShiftTable {
    fn build(
        bbox: &OrientedBox,
        grid: &BevGrid,
        travel_unit: Point2,
        window: &ShiftWindow,
        params: &DetectorParams,
    ) -> Self {
        let step = params.shift_step;
        let samples = interior_samples(bbox, params.sample_spacing);
        let far = travel_unit * (window.max_gap as f64 * window.max_scale);
        let k = (window.max_radius / step + 1e-9).floor() as i32 + 1;
        let lo_x = ((-far.x).min(0.0) / step).floor() as i32 - k;
        let hi_x = ((-far.x).max(0.0) / step).ceil() as i32 + k;
        let lo_y = ((-far.y).min(0.0) / step).floor() as i32 - k;
        let hi_y = ((-far.y).max(0.0) / step).ceil() as i32 + k;
        let (ni, nj) = ((hi_x - lo_x + 1) as usize, (hi_y - lo_y + 1) as usize);
        let mut values = Vec::with_capacity(ni * nj);
        for i in lo_x..=hi_x {
            for j in lo_y..=hi_y {
                let shift = Point2::new(i as f64 * step, j as f64 * step);
                values.push(confirm_samples(&samples, grid, shift, params.target_return) as f32);
            }
        }
        Self {
            i0: lo_x,
            j0: lo_y,
            ni,
            nj,
            values,
        }
    }

    fn at(&self, i: i32, j: i32) -> f64 {
        let (a, b) = (i - self.i0, j - self.j0);
        if a < 0 || b < 0 || a as usize >= self.ni || b as usize >= self.nj {
            debug_assert!(false, "shift ({i}, {j}) outside feature window");
            return 0.0;
        }
        self.values[a as usize * self.nj + b as usize] as f64
    }

    /// Mean confirmation over lattice shifts within `radius` of `-travel`.
    pub fn pooled(&self, travel: Point2, radius: f64, step: f64) -> f64 {
        let c = ((-travel.x / step).round() as i32, (-travel.y / step).round() as i32);
        let disc = lattice_disc(radius, step);
        disc.iter().map(|&(i, j)| self.at(c.0 + i, c.1 + j)).sum::<f64>() / disc.len() as f64
    }
}

/// Velocity of `obj` from constant-velocity association backwards through
/// `history` (oldest first). `None` when no history object associates.
pub fn estimate_velocity(
    obj: &ObjectCandidate,
    history: &[Vec<ObjectCandidate>],
    params: &DetectorParams,
) -> Option<Point2> {
    let mut track = vec![(ns_to_secs(obj.t_ns), obj.bbox.center())];
    let (axis, _) = obj.bbox.axes();
    let mut velocity: Option<Point2> = None;
    for frame in history.iter().rev() {
        let (t_last, c_last) = *track.last().unwrap();
        let mut best: Option<(f64, Point2, f64)> = None;
        for cand in frame {
            let t = ns_to_secs(cand.t_ns);
            let dt = t_last - t;
            if dt <= 0.0 {
                continue;
            }
            let c = cand.bbox.center();
            let cost = match velocity {
                Some(v) => {
                    let d = (c - (c_last - v * dt)).norm();
                    (d <= params.association_radius).then_some(d)
                }
                None => {
                    let d = c_last - c;
                    let along = d.dot(axis).abs();
                    let across = d.cross(axis).abs();
                    (across <= params.association_radius && along <= params.max_speed * dt + params.association_radius)
                        .then_some(across + 0.1 * along)
                }
            };
            if let Some(cost) = cost {
                if best.is_none_or(|b| cost < b.0) {
                    best = Some((cost, c, t));
                }
            }
        }
        let Some((_, c, t)) = best else { break };
        track.push((t, c));
        velocity = Some(least_squares_velocity(&track));
    }
    velocity
}

fn least_squares_velocity(track: &[(f64, Point2)]) -> Point2 {
    let n = track.len() as f64;
    let tm = track.iter().map(|(t, _)| t).sum::<f64>() / n;
    let cm = track.iter().fold(Point2::default(), |a, (_, c)| a + *c) * (1.0 / n);
    let mut stt = 0.0;
    let mut sc = Point2::default();
    for (t, c) in track {
        stt += (t - tm) * (t - tm);
        sc = sc + (*c - cm) * (t - tm);
    }
    if stt > 0.0 {
        sc * (1.0 / stt)
    } else {
        Point2::default()
    }
}

/// Predicted travel during `gap_offset` Lidar periods, `v̂ · gap · P_l`.
/// The flag is false when no history associated.
pub fn estimate_displacement(
    paired: &PairedFrameSet,
    obj: &ObjectCandidate,
    params: &DetectorParams,
    gap_offset: u32,
) -> ((f64, f64), bool) {
    let history: Vec<Vec<ObjectCandidate>> = paired.history.iter().map(|h| extract_objects(&h.lidar, params)).collect();
    let v = estimate_velocity(obj, &history, params);
    let travel = travel_of(v, params, gap_offset, ns_to_secs(paired.lidar_period_ns));
    ((travel.x, travel.y), v.is_some())
}

fn travel_of(v: Option<Point2>, params: &DetectorParams, gap_offset: u32, lidar_period: f64) -> Point2 {
    match v {
        Some(v) if v.norm() >= params.velocity_deadband => v * (gap_offset as f64 * lidar_period),
        _ => Point2::default(),
    }
}

/// Branch-independent per-object state, shared across calibration cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatures {
    pub bbox: OrientedBox,
    pub lidar_score: f64,
    pub velocity: Option<Point2>,
    pub shifts: ShiftTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub offset: u32,
    pub lidar_period_s: f64,
    pub objects: Vec<ObjectFeatures>,
}

/// Everything `detect` computes before branch parameters are applied, with
/// Radar responses tabulated over `window`.
pub fn extract_features(paired: &PairedFrameSet, params: &DetectorParams, window: &ShiftWindow) -> Result<FrameFeatures> {
    let current = extract_objects(&paired.current.lidar, params);
    let history: Vec<Vec<ObjectCandidate>> = paired.history.iter().map(|h| extract_objects(&h.lidar, params)).collect();
    let radar = radar_to_bev(&paired.current.radar, &params.radar_bev)?;
    let lidar_period_s = ns_to_secs(paired.lidar_period_ns);
    let objects = current
        .iter()
        .map(|o| {
            let velocity = estimate_velocity(o, &history, params);
            let unit = travel_of(velocity, params, 1, lidar_period_s);
            ObjectFeatures {
                bbox: o.bbox,
                lidar_score: 1.0 - (-(o.n_points as f64) / params.lidar_saturation).exp(),
                velocity,
                shifts: ShiftTable::build(&o.bbox, &radar, unit, window, params),
            }
        })
        .collect();
    Ok(FrameFeatures {
        offset: paired.offset,
        lidar_period_s,
        objects,
    })
}

/// Confidence of every object in input order.
pub fn object_confidences(features: &FrameFeatures, dispatch: &Dispatch, params: &DetectorParams) -> Vec<f64> {
    let b = &dispatch.params;
    features
        .objects
        .iter()
        .map(|o| {
            let t = travel_of(o.velocity, params, dispatch.gap_offset, features.lidar_period_s);
            let t = Point2::new(t.x * b.displacement_scale[0], t.y * b.displacement_scale[1]);
            let confirmation = o.shifts.pooled(t, b.search_radius, params.shift_step);
            ((1.0 - b.radar_weight) * o.lidar_score + b.radar_weight * confirmation).clamp(0.0, 1.0)
        })
        .collect()
}

/// Detections sorted by descending confidence (stable).
pub fn score_features(features: &FrameFeatures, dispatch: &Dispatch, params: &DetectorParams) -> Vec<Detection> {
    let conf = object_confidences(features, dispatch, params);
    let mut dets: Vec<Detection> = features
        .objects
        .iter()
        .zip(conf)
        .map(|(o, confidence)| Detection {
            bbox: o.bbox,
            confidence,
        })
        .collect();
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets
}

pub fn detect_instrumented(paired: &PairedFrameSet, params: &DetectorParams) -> Result<(Vec<Detection>, Dispatch)> {
    let dispatch = params.dispatch(paired.offset);
    let features = extract_features(paired, params, &ShiftWindow::for_dispatch(&dispatch))?;
    Ok((score_features(&features, &dispatch, params), dispatch))
}

pub fn detect(paired: &PairedFrameSet, params: &DetectorParams) -> Result<Vec<Detection>> {
    detect_instrumented(paired, params).map(|(d, _)| d)
}
