//! Azimuth-progressive sweep samplers. Every Lidar ray and every Radar azimuth
//! bin is captured at its own instant within the sweep, so moving objects are
//! imaged at slightly different positions across one frame.

use std::io::{Cursor, Read};
use std::sync::{Arc, Mutex};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::scene::Scenario;
use crate::timebase::{ns_to_secs, Nanos, SweepSchedule};

/// One sweep interval `[start_ns, end_ns)` of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sweep {
    pub index: i64,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
}

impl Sweep {
    pub fn of(schedule: &SweepSchedule, index: i64) -> Self {
        Self {
            index,
            start_ns: schedule.start_ns(index),
            end_ns: schedule.completion_ns(index),
        }
    }

    pub fn period_ns(&self) -> Nanos {
        self.end_ns - self.start_ns
    }
}

fn d_rays() -> u32 {
    1080
}
fn d_lidar_sigma() -> f64 {
    0.03
}
fn d_max_range() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarParams {
    #[serde(default = "d_rays")]
    pub rays_per_sweep: u32,
    #[serde(default = "d_lidar_sigma")]
    pub range_noise_sigma: f64,
    #[serde(default = "d_max_range")]
    pub max_range: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        Self {
            rays_per_sweep: d_rays(),
            range_noise_sigma: d_lidar_sigma(),
            max_range: d_max_range(),
        }
    }
}

fn d_az_bins() -> u32 {
    400
}
fn d_range_bins() -> u32 {
    256
}
fn d_range_res() -> f64 {
    0.5
}
fn d_beam_sigma() -> f64 {
    0.45
}
fn d_beam_samples() -> u32 {
    5
}
fn d_speckle() -> f64 {
    0.05
}
fn d_target_return() -> f64 {
    1.0
}

/// Radar sampler settings. Intensities are in arbitrary units where a vehicle
/// fully filling a bin returns `target_return`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarParams {
    #[serde(default = "d_az_bins")]
    pub azimuth_bins: u32,
    #[serde(default = "d_range_bins")]
    pub range_bins: u32,
    #[serde(default = "d_range_res")]
    pub range_resolution: f64,
    #[serde(default = "d_beam_sigma")]
    pub beam_sigma_deg: f64,
    #[serde(default = "d_beam_samples")]
    pub beam_samples: u32,
    /// Upper bound of the uniform speckle added to every bin.
    #[serde(default = "d_speckle")]
    pub speckle_max: f64,
    #[serde(default = "d_target_return")]
    pub target_return: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        Self {
            azimuth_bins: d_az_bins(),
            range_bins: d_range_bins(),
            range_resolution: d_range_res(),
            beam_sigma_deg: d_beam_sigma(),
            beam_samples: d_beam_samples(),
            speckle_max: d_speckle(),
            target_return: d_target_return(),
        }
    }
}

impl RadarParams {
    pub fn noiseless(&self) -> Self {
        Self {
            speckle_max: 0.0,
            ..self.clone()
        }
    }
}

/// One Lidar return. `capture_dt` is seconds since the owning frame's start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub azimuth_deg: f32,
    pub capture_dt: f32,
}

impl LidarPoint {
    pub fn position(&self) -> Point2 {
        Point2::new(self.x as f64, self.y as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarRawFrame {
    pub sweep_index: i64,
    pub t_start_ns: Nanos,
    pub t_end_ns: Nanos,
    pub points: Vec<LidarPoint>,
}

impl LidarRawFrame {
    pub fn capture_t(&self, p: &LidarPoint) -> f64 {
        ns_to_secs(self.t_start_ns) + p.capture_dt as f64
    }
}

/// Polar intensity sweep, row-major `[azimuth][range]`.
///
/// Bin `a` is captured at `capture_origin + (a + 0.5)/A · period`, plus one
/// period when `a < rollover_bin`. Raw sweeps have `rollover_bin = 0`;
/// reconstructed sweeps take their leading bins from the following sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarRawFrame {
    pub sweep_index: i64,
    pub t_start_ns: Nanos,
    pub t_end_ns: Nanos,
    pub azimuth_bins: u32,
    pub range_bins: u32,
    pub range_resolution: f32,
    pub capture_origin_ns: Nanos,
    pub rollover_bin: u32,
    pub intensity: Vec<f32>,
}

impl RadarRawFrame {
    pub fn period_ns(&self) -> Nanos {
        self.t_end_ns - self.t_start_ns
    }

    pub fn bin_capture_ns(&self, a: u32) -> Nanos {
        let p = self.period_ns() as i128;
        let a_i = a as i128;
        let base = self.capture_origin_ns as i128 + ((2 * a_i + 1) * p) / (2 * self.azimuth_bins as i128);
        let t = if a < self.rollover_bin { base + p } else { base };
        t as Nanos
    }

    pub fn row(&self, a: u32) -> &[f32] {
        let r = self.range_bins as usize;
        &self.intensity[a as usize * r..(a as usize + 1) * r]
    }

    pub fn azimuth_step_deg(&self) -> f64 {
        360.0 / self.azimuth_bins as f64
    }

    pub fn total_intensity(&self) -> f64 {
        self.intensity.iter().map(|&v| v as f64).sum()
    }
}

const SALT_LIDAR: u64 = 0x4c49_4441_5200_0001;
const SALT_RADAR: u64 = 0x5241_4441_5200_0002;

/// Per-sweep RNG stream; independent of generation order.
fn sweep_rng(seed: u64, salt: u64, index: i64) -> ChaCha8Rng {
    let mut z = seed ^ salt ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn check_interval(scenario: &Scenario, sweep: &Sweep) -> Result<()> {
    if sweep.end_ns <= sweep.start_ns {
        return Err(Error::Parameter("sweep interval must have positive length".into()));
    }
    scenario.check_time(ns_to_secs(sweep.start_ns))?;
    scenario.check_time(ns_to_secs(sweep.end_ns))
}

/// Cast `rays_per_sweep` rays uniformly over `[0°, 360°)`, ray `k` at
/// `start + k/N · period`, against the world at that instant. Nearest hit wins.
pub fn scan_lidar(scenario: &Scenario, sweep: &Sweep, params: &LidarParams) -> Result<LidarRawFrame> {
    check_interval(scenario, sweep)?;
    let n = params.rays_per_sweep.max(1) as i64;
    let period = sweep.period_ns();
    let mut rng = sweep_rng(scenario.seed, SALT_LIDAR, sweep.index);
    let noise = (params.range_noise_sigma > 0.0)
        .then(|| Normal::new(0.0, params.range_noise_sigma).expect("finite sigma"));
    let mut points = Vec::new();
    for k in 0..n {
        let offset_ns = (k as i128 * period as i128 / n as i128) as Nanos;
        let t = ns_to_secs(sweep.start_ns + offset_ns);
        let az = 360.0 * k as f64 / n as f64;
        let dir = Point2::new(az.to_radians().cos(), az.to_radians().sin());
        let hit = scenario
            .reflectors_at(t)
            .iter()
            .filter_map(|r| r.bbox.ray_chord(dir).map(|(t0, _)| t0))
            .min_by(f64::total_cmp);
        let Some(range) = hit else { continue };
        let range = match &noise {
            Some(d) => range + d.sample(&mut rng),
            None => range,
        };
        if range <= 0.0 || range > params.max_range {
            continue;
        }
        points.push(LidarPoint {
            x: (range * dir.x) as f32,
            y: (range * dir.y) as f32,
            azimuth_deg: az as f32,
            capture_dt: ns_to_secs(offset_ns) as f32,
        });
    }
    Ok(LidarRawFrame {
        sweep_index: sweep.index,
        t_start_ns: sweep.start_ns,
        t_end_ns: sweep.end_ns,
        points,
    })
}

/// Fill each azimuth bin, at its own capture instant, with the returns of every
/// object whose footprint the beam crosses (additive, no occlusion), then add
/// uniform speckle.
pub fn scan_radar(scenario: &Scenario, sweep: &Sweep, params: &RadarParams) -> Result<RadarRawFrame> {
    check_interval(scenario, sweep)?;
    if params.azimuth_bins == 0 || params.range_bins == 0 || !(params.range_resolution > 0.0) {
        return Err(Error::Parameter("radar grid dimensions must be positive".into()));
    }
    let a_bins = params.azimuth_bins;
    let r_bins = params.range_bins as usize;
    let res = params.range_resolution;
    let mut frame = RadarRawFrame {
        sweep_index: sweep.index,
        t_start_ns: sweep.start_ns,
        t_end_ns: sweep.end_ns,
        azimuth_bins: a_bins,
        range_bins: params.range_bins,
        range_resolution: res as f32,
        capture_origin_ns: sweep.start_ns,
        rollover_bin: 0,
        intensity: vec![0.0; a_bins as usize * r_bins],
    };
    let beam = beam_pattern(params);
    let step = 360.0 / a_bins as f64;
    let mut row = vec![0.0f64; r_bins];
    for a in 0..a_bins {
        let t = ns_to_secs(frame.bin_capture_ns(a));
        let reflectors = scenario.reflectors_at(t);
        row.iter_mut().for_each(|v| *v = 0.0);
        let center = (a as f64 + 0.5) * step;
        for &(off, w) in &beam {
            let az = (center + off).to_radians();
            let dir = Point2::new(az.cos(), az.sin());
            for r in &reflectors {
                let Some((r0, r1)) = r.bbox.ray_chord(dir) else { continue };
                let gain = w * r.reflectivity.unwrap_or(params.target_return);
                let b0 = (r0 / res).floor().max(0.0) as usize;
                let b1 = ((r1 / res).ceil() as usize).min(r_bins);
                for (b, cell) in row.iter_mut().enumerate().take(b1).skip(b0) {
                    let lo = (b as f64 * res).max(r0);
                    let hi = ((b + 1) as f64 * res).min(r1);
                    if hi > lo {
                        *cell += gain * (hi - lo) / res;
                    }
                }
            }
        }
        let base = a as usize * r_bins;
        for (b, v) in row.iter().enumerate() {
            frame.intensity[base + b] = *v as f32;
        }
    }
    if params.speckle_max > 0.0 {
        let mut rng = sweep_rng(scenario.seed, SALT_RADAR, sweep.index);
        for v in frame.intensity.iter_mut() {
            *v += rng.random_range(0.0..params.speckle_max) as f32;
        }
    }
    Ok(frame)
}

/// Beam sample offsets (degrees) and normalized Gaussian weights.
fn beam_pattern(params: &RadarParams) -> Vec<(f64, f64)> {
    let k = params.beam_samples.max(1);
    if k == 1 || params.beam_sigma_deg <= 0.0 {
        return vec![(0.0, 1.0)];
    }
    let sigma = params.beam_sigma_deg;
    let raw: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let off = -2.0 * sigma + 4.0 * sigma * i as f64 / (k - 1) as f64;
            (off, (-0.5 * (off / sigma).powi(2)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.into_iter().map(|(o, w)| (o, w / total)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevParams {
    pub cell_size: f64,
    pub half_extent: f64,
}

impl Default for BevParams {
    fn default() -> Self {
        Self {
            cell_size: 0.25,
            half_extent: 50.0,
        }
    }
}

/// Square Cartesian intensity grid, row-major `[iy][ix]`, covering
/// `[-half_extent, half_extent)` on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub cell_size: f64,
    pub half_extent: f64,
    pub cells_per_side: usize,
    pub data: Vec<f32>,
}

impl BevGrid {
    pub fn zeros(params: &BevParams) -> Result<Self> {
        if !(params.cell_size > 0.0) || !(params.half_extent > 0.0) {
            return Err(Error::Parameter(format!(
                "BEV cell size and half extent must be > 0, got {params:?}"
            )));
        }
        let n = (2.0 * params.half_extent / params.cell_size).ceil() as usize;
        Ok(Self {
            cell_size: params.cell_size,
            half_extent: params.half_extent,
            cells_per_side: n,
            data: vec![0.0; n * n],
        })
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point2 {
        Point2::new(
            -self.half_extent + (ix as f64 + 0.5) * self.cell_size,
            -self.half_extent + (iy as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_of(&self, p: Point2) -> Option<(usize, usize)> {
        let ix = ((p.x + self.half_extent) / self.cell_size).floor();
        let iy = ((p.y + self.half_extent) / self.cell_size).floor();
        let n = self.cells_per_side as f64;
        (ix >= 0.0 && iy >= 0.0 && ix < n && iy < n).then_some((ix as usize, iy as usize))
    }

    /// Intensity of the cell containing `p`; zero outside the grid.
    pub fn sample(&self, p: Point2) -> f32 {
        self.cell_of(p)
            .map_or(0.0, |(ix, iy)| self.data[iy * self.cells_per_side + ix])
    }

    pub fn get(&self, ix: usize, iy: usize) -> f32 {
        self.data[iy * self.cells_per_side + ix]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

type LookupKey = (u64, u64, u32, u32, u32);

static BEV_LOOKUP: Mutex<Vec<(LookupKey, Arc<Vec<u32>>)>> = Mutex::new(Vec::new());

/// Flat polar index of the bin containing each cell center, `u32::MAX` past
/// the last range bin. Shared between frames of the same geometry.
fn bev_lookup(grid: &BevGrid, frame: &RadarRawFrame) -> Arc<Vec<u32>> {
    let key = (
        grid.cell_size.to_bits(),
        grid.half_extent.to_bits(),
        frame.azimuth_bins,
        frame.range_bins,
        frame.range_resolution.to_bits(),
    );
    let mut cache = BEV_LOOKUP.lock().unwrap_or_else(|e| e.into_inner());
    if let Some((_, table)) = cache.iter().find(|(k, _)| *k == key) {
        return table.clone();
    }
    let n = grid.cells_per_side;
    let step = frame.azimuth_step_deg();
    let res = frame.range_resolution as f64;
    let mut table = vec![u32::MAX; n * n];
    for iy in 0..n {
        for ix in 0..n {
            let c = grid.cell_center(ix, iy);
            let b = (c.norm() / res).floor() as usize;
            if b >= frame.range_bins as usize {
                continue;
            }
            let a = ((c.bearing_deg() / step).floor() as u32).min(frame.azimuth_bins - 1);
            table[iy * n + ix] = a * frame.range_bins + b as u32;
        }
    }
    let table = Arc::new(table);
    cache.push((key, table.clone()));
    table
}

/// Nearest-bin resampling: each cell takes the polar bin containing its center.
pub fn radar_to_bev(frame: &RadarRawFrame, params: &BevParams) -> Result<BevGrid> {
    let mut grid = BevGrid::zeros(params)?;
    if frame.intensity.len() != frame.azimuth_bins as usize * frame.range_bins as usize {
        return Err(Error::Structural("radar intensity does not match its bin layout".into()));
    }
    let table = bev_lookup(&grid, frame);
    for (cell, &k) in grid.data.iter_mut().zip(table.iter()) {
        if k != u32::MAX {
            *cell = frame.intensity[k as usize];
        }
    }
    Ok(grid)
}

const MAGIC: &[u8; 8] = b"TFUSFRM\0";
const VERSION: u16 = 1;
const KIND_LIDAR: u8 = 1;
const KIND_RADAR: u8 = 2;

fn write_header(out: &mut Vec<u8>, kind: u8, index: i64, t0: Nanos, t1: Nanos) {
    out.extend_from_slice(MAGIC);
    out.write_u16::<LittleEndian>(VERSION).unwrap();
    out.write_u8(kind).unwrap();
    out.write_u8(0).unwrap();
    out.write_i64::<LittleEndian>(index).unwrap();
    out.write_i64::<LittleEndian>(t0).unwrap();
    out.write_i64::<LittleEndian>(t1).unwrap();
}

fn read_header(cur: &mut Cursor<&[u8]>, want: u8) -> Result<(i64, Nanos, Nanos)> {
    let fmt = |e: std::io::Error| Error::Format(e.to_string());
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = cur.read_u16::<LittleEndian>().map_err(fmt)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = cur.read_u8().map_err(fmt)?;
    if kind != want {
        return Err(Error::Format(format!("expected sensor kind {want}, found {kind}")));
    }
    cur.read_u8().map_err(fmt)?;
    let index = cur.read_i64::<LittleEndian>().map_err(fmt)?;
    let t0 = cur.read_i64::<LittleEndian>().map_err(fmt)?;
    let t1 = cur.read_i64::<LittleEndian>().map_err(fmt)?;
    Ok((index, t0, t1))
}

fn read_f32s(cur: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f32>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if remaining != n * 4 {
        return Err(Error::Format(format!(
            "payload holds {remaining} bytes, header declares {}",
            n * 4
        )));
    }
    let mut v = vec![0f32; n];
    cur.read_f32_into::<LittleEndian>(&mut v)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(v)
}

impl LidarRawFrame {
    /// Container bytes: header, point count, then `(x, y, azimuth, capture_dt)` f32 records.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(44 + self.points.len() * 16);
        write_header(&mut out, KIND_LIDAR, self.sweep_index, self.t_start_ns, self.t_end_ns);
        out.write_u32::<LittleEndian>(self.points.len() as u32).unwrap();
        for p in &self.points {
            for v in [p.x, p.y, p.azimuth_deg, p.capture_dt] {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let (sweep_index, t_start_ns, t_end_ns) = read_header(&mut cur, KIND_LIDAR)?;
        let n = cur
            .read_u32::<LittleEndian>()
            .map_err(|e| Error::Format(e.to_string()))? as usize;
        let raw = read_f32s(&mut cur, n * 4)?;
        let points = raw
            .chunks_exact(4)
            .map(|c| LidarPoint {
                x: c[0],
                y: c[1],
                azimuth_deg: c[2],
                capture_dt: c[3],
            })
            .collect();
        Ok(Self {
            sweep_index,
            t_start_ns,
            t_end_ns,
            points,
        })
    }
}

impl RadarRawFrame {
    /// Container bytes: header, grid dimensions, range resolution, capture
    /// metadata, then the row-major f32 grid.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.intensity.len() * 4);
        write_header(&mut out, KIND_RADAR, self.sweep_index, self.t_start_ns, self.t_end_ns);
        out.write_u32::<LittleEndian>(self.azimuth_bins).unwrap();
        out.write_u32::<LittleEndian>(self.range_bins).unwrap();
        out.write_f32::<LittleEndian>(self.range_resolution).unwrap();
        out.write_i64::<LittleEndian>(self.capture_origin_ns).unwrap();
        out.write_u32::<LittleEndian>(self.rollover_bin).unwrap();
        for &v in &self.intensity {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(e.to_string());
        let mut cur = Cursor::new(bytes);
        let (sweep_index, t_start_ns, t_end_ns) = read_header(&mut cur, KIND_RADAR)?;
        let azimuth_bins = cur.read_u32::<LittleEndian>().map_err(fmt)?;
        let range_bins = cur.read_u32::<LittleEndian>().map_err(fmt)?;
        let range_resolution = cur.read_f32::<LittleEndian>().map_err(fmt)?;
        let capture_origin_ns = cur.read_i64::<LittleEndian>().map_err(fmt)?;
        let rollover_bin = cur.read_u32::<LittleEndian>().map_err(fmt)?;
        if azimuth_bins == 0 || rollover_bin > azimuth_bins {
            return Err(Error::Format("inconsistent radar dimensions".into()));
        }
        let intensity = read_f32s(&mut cur, azimuth_bins as usize * range_bins as usize)?;
        Ok(Self {
            sweep_index,
            t_start_ns,
            t_end_ns,
            azimuth_bins,
            range_bins,
            range_resolution,
            capture_origin_ns,
            rollover_bin,
            intensity,
        })
    }
}
