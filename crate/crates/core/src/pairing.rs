//! Concatenated Lidar frames, trigger-time pairing with the latest Radar sweep,
//! history selection and aligned Radar reconstruction.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_deg;
use crate::scene::Scenario;
use crate::sensors::{scan_lidar, scan_radar, LidarParams, LidarPoint, LidarRawFrame, RadarParams, RadarRawFrame, Sweep};
use crate::timebase::{
    compute_offset, compute_ratio, fusion_triggers, ns_to_secs, warmup_bound, FusionPolicy, Nanos, SweepSchedule,
};

/// Union of azimuth wedges cut from consecutive Lidar sweeps. Wedge `j` is
/// centered on the bearing a Radar sweep ending at `t_end_ns` points at
/// during sweep `j`'s mid-time.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatLidarFrame {
    pub t_end_ns: Nanos,
    pub radar_period_ns: Nanos,
    pub sector_width_deg: f64,
    /// Source sweeps, oldest first.
    pub sources: Vec<Sweep>,
    /// `capture_dt` is relative to [`ConcatLidarFrame::t_start_ns`].
    pub points: Vec<LidarPoint>,
    /// Index into `sources` for each point.
    pub point_source: Vec<u16>,
}

impl ConcatLidarFrame {
    pub fn t_start_ns(&self) -> Nanos {
        self.sources[0].start_ns
    }

    pub fn source_indices(&self) -> Vec<i64> {
        self.sources.iter().map(|s| s.index).collect()
    }

    pub fn capture_ns(&self, i: usize) -> Nanos {
        self.t_start_ns() + (self.points[i].capture_dt as f64 * 1e9).round() as Nanos
    }

    pub fn capture_t(&self, i: usize) -> f64 {
        ns_to_secs(self.t_start_ns()) + self.points[i].capture_dt as f64
    }

    pub fn sector_center_deg(&self, slot: usize) -> f64 {
        sector_center(&self.sources[slot], self.t_end_ns, self.radar_period_ns)
    }

    pub fn in_sector(&self, slot: usize, azimuth_deg: f64) -> bool {
        in_sector(self.sector_center_deg(slot), self.sector_width_deg, azimuth_deg)
    }

    /// Instant a Radar sweep spanning `[t_end - P_r, t_end)` images `azimuth_deg`.
    pub fn radar_sync_ns(&self, azimuth_deg: f64) -> Nanos {
        let frac = azimuth_deg.rem_euclid(360.0) / 360.0;
        self.t_end_ns - self.radar_period_ns + (frac * self.radar_period_ns as f64).round() as Nanos
    }

    /// Among sweeps whose wedge covers `azimuth_deg`, the one capturing that
    /// bearing closest to [`Self::radar_sync_ns`]. Earlier sweep wins a tie.
    pub fn reference_slot(&self, azimuth_deg: f64) -> usize {
        let target = self.radar_sync_ns(azimuth_deg);
        let dist = |j: usize| (self.slot_capture_ns(j, azimuth_deg) - target).abs();
        let covering: Vec<usize> = (0..self.sources.len()).filter(|&j| self.in_sector(j, azimuth_deg)).collect();
        let pool: Vec<usize> = if covering.is_empty() {
            (0..self.sources.len()).collect()
        } else {
            covering
        };
        pool.into_iter().min_by_key(|&j| (dist(j), j)).unwrap_or(0)
    }

    pub fn slot_capture_ns(&self, slot: usize, azimuth_deg: f64) -> Nanos {
        let s = &self.sources[slot];
        let frac = azimuth_deg.rem_euclid(360.0) / 360.0;
        s.start_ns + (frac * s.period_ns() as f64).round() as Nanos
    }

    /// Capture instant of `azimuth_deg` in the reference sweep.
    pub fn reference_capture_ns(&self, azimuth_deg: f64) -> Nanos {
        self.slot_capture_ns(self.reference_slot(azimuth_deg), azimuth_deg)
    }

    /// Keep only points captured inside `[t0, t1)`.
    pub fn restricted_to(&self, t0: Nanos, t1: Nanos) -> Self {
        let mut out = Self {
            points: Vec::new(),
            point_source: Vec::new(),
            ..self.clone()
        };
        for i in 0..self.points.len() {
            let t = self.capture_ns(i);
            if t >= t0 && t < t1 {
                out.points.push(self.points[i]);
                out.point_source.push(self.point_source[i]);
            }
        }
        out
    }
}

fn sector_center(sweep: &Sweep, t_end: Nanos, radar_period: Nanos) -> f64 {
    let mid2 = sweep.start_ns as i128 + sweep.end_ns as i128;
    let rel2 = mid2 - 2 * (t_end as i128 - radar_period as i128);
    (360.0 * rel2 as f64 / (2 * radar_period as i128) as f64).rem_euclid(360.0)
}

fn in_sector(center: f64, width: f64, azimuth: f64) -> bool {
    width >= 360.0 || wrap_deg(azimuth - center).abs() <= width / 2.0 + 1e-9
}

/// Merge wedges of `frames` (consecutive, oldest first). `expected` is the
/// required frame count, usually `ratio + 1`.
pub fn concat_lidar(
    frames: &[&LidarRawFrame],
    sector_width_deg: f64,
    radar_period_ns: Nanos,
    expected: usize,
) -> Result<ConcatLidarFrame> {
    if frames.len() != expected || frames.is_empty() {
        return Err(Error::Structural(format!(
            "concatenation needs {expected} Lidar frames, got {}",
            frames.len()
        )));
    }
    if !(sector_width_deg > 0.0 && sector_width_deg <= 360.0) {
        return Err(Error::Parameter(format!(
            "sector width must lie in (0, 360], got {sector_width_deg}"
        )));
    }
    for w in frames.windows(2) {
        if w[1].sweep_index != w[0].sweep_index + 1 || w[1].t_start_ns != w[0].t_end_ns {
            return Err(Error::Structural(format!(
                "Lidar frames {} and {} are not consecutive",
                w[0].sweep_index, w[1].sweep_index
            )));
        }
    }
    let t_end_ns = frames[frames.len() - 1].t_end_ns;
    let t0 = frames[0].t_start_ns;
    let sources: Vec<Sweep> = frames
        .iter()
        .map(|f| Sweep {
            index: f.sweep_index,
            start_ns: f.t_start_ns,
            end_ns: f.t_end_ns,
        })
        .collect();
    let mut points = Vec::new();
    let mut point_source = Vec::new();
    for (j, f) in frames.iter().enumerate() {
        let center = sector_center(&sources[j], t_end_ns, radar_period_ns);
        let shift = ns_to_secs(f.t_start_ns - t0);
        for p in f.points.iter().filter(|p| in_sector(center, sector_width_deg, p.azimuth_deg as f64)) {
            points.push(LidarPoint {
                capture_dt: (shift + p.capture_dt as f64) as f32,
                ..*p
            });
            point_source.push(j as u16);
        }
    }
    Ok(ConcatLidarFrame {
        t_end_ns,
        radar_period_ns,
        sector_width_deg,
        sources,
        points,
        point_source,
    })
}

/// Which source sweep supplies each azimuth bin of an aligned reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinSource {
    Prev,
    Next,
}

fn check_reconstruction(r_prev: &RadarRawFrame, r_next: &RadarRawFrame, window: (Nanos, Nanos)) -> Result<()> {
    let (ts, te) = window;
    if r_next.sweep_index != r_prev.sweep_index + 1 || r_next.t_start_ns != r_prev.t_end_ns {
        return Err(Error::Structural(format!(
            "Radar sweeps {} and {} are not adjacent",
            r_prev.sweep_index, r_next.sweep_index
        )));
    }
    if r_prev.rollover_bin != 0 || r_next.rollover_bin != 0 {
        return Err(Error::Structural("reconstruction sources must be raw sweeps".into()));
    }
    if r_prev.azimuth_bins != r_next.azimuth_bins
        || r_prev.range_bins != r_next.range_bins
        || r_prev.period_ns() != r_next.period_ns()
    {
        return Err(Error::Structural("Radar sweeps differ in layout".into()));
    }
    if te - ts != r_prev.period_ns() || ts < r_prev.t_start_ns || ts >= r_prev.t_end_ns {
        return Err(Error::Structural(format!(
            "window [{ts}, {te}) ns is not a Radar period starting inside sweep {}",
            r_prev.sweep_index
        )));
    }
    Ok(())
}

/// Per-bin provenance for the window: bins captured before `window.0` in
/// `r_prev` are replaced by the next sweep's capture of the same bin.
pub fn reconstruction_sources(r_prev: &RadarRawFrame, window: (Nanos, Nanos)) -> Vec<BinSource> {
    (0..r_prev.azimuth_bins)
        .map(|a| {
            if r_prev.bin_capture_ns(a) < window.0 {
                BinSource::Next
            } else {
                BinSource::Prev
            }
        })
        .collect()
}

/// Rebuild a Radar sweep over `window` (one Radar period) from two adjacent sweeps.
pub fn reconstruct_aligned_radar(
    r_prev: &RadarRawFrame,
    r_next: &RadarRawFrame,
    window: (Nanos, Nanos),
) -> Result<RadarRawFrame> {
    check_reconstruction(r_prev, r_next, window)?;
    let sources = reconstruction_sources(r_prev, window);
    let rollover = sources.iter().take_while(|s| **s == BinSource::Next).count() as u32;
    let mut intensity = Vec::with_capacity(r_prev.intensity.len());
    for (a, src) in sources.iter().enumerate() {
        let row = match src {
            BinSource::Prev => r_prev.row(a as u32),
            BinSource::Next => r_next.row(a as u32),
        };
        intensity.extend_from_slice(row);
    }
    Ok(RadarRawFrame {
        sweep_index: r_prev.sweep_index,
        t_start_ns: window.0,
        t_end_ns: window.1,
        azimuth_bins: r_prev.azimuth_bins,
        range_bins: r_prev.range_bins,
        range_resolution: r_prev.range_resolution,
        capture_origin_ns: r_prev.t_start_ns,
        rollover_bin: rollover,
        intensity,
    })
}

/// One (concatenated Lidar, Radar) pair at a fusion window.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub trigger_ns: Nanos,
    pub offset: u32,
    pub lidar: Arc<ConcatLidarFrame>,
    pub radar: Arc<RadarRawFrame>,
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedFrameSet {
    pub trigger_ns: Nanos,
    pub offset: u32,
    pub current: FramePair,
    /// Oldest first.
    pub history: Vec<FramePair>,
    pub policy_tag: String,
    pub lidar_period_ns: Nanos,
    pub radar_period_ns: Nanos,
}

impl PairedFrameSet {
    pub fn trigger_t(&self) -> f64 {
        ns_to_secs(self.trigger_ns)
    }
}

/// History windows `trigger - k·stride·P_r` for k = num_history..1, oldest first.
pub fn history_times(trigger_ns: Nanos, num_history: u32, stride: u32, radar_period_ns: Nanos) -> Vec<Nanos> {
    (1..=num_history as i64)
        .rev()
        .map(|k| trigger_ns - k * stride as i64 * radar_period_ns)
        .collect()
}

/// Pick the pairs at the history windows of `trigger_ns` from past windows
/// keyed by their trigger time.
pub fn select_history(
    past: &BTreeMap<Nanos, FramePair>,
    trigger_ns: Nanos,
    num_history: u32,
    stride: u32,
    radar_period_ns: Nanos,
) -> Result<Vec<FramePair>> {
    history_times(trigger_ns, num_history, stride, radar_period_ns)
        .into_iter()
        .map(|t| {
            past.get(&t).cloned().ok_or_else(|| {
                Error::StreamNotWarm(format!("no fusion window buffered at t={}s", ns_to_secs(t)))
            })
        })
        .collect()
}

/// Bounded buffer of frames keyed by consecutive sweep index.
#[derive(Debug, Clone)]
pub struct FrameRing<T> {
    capacity: usize,
    first_index: i64,
    frames: VecDeque<Arc<T>>,
}

impl<T> FrameRing<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            first_index: 0,
            frames: VecDeque::new(),
        }
    }

    pub fn push(&mut self, index: i64, frame: T) -> Result<()> {
        if !self.frames.is_empty() && index != self.first_index + self.frames.len() as i64 {
            return Err(Error::Structural(format!("frame {index} pushed out of order")));
        }
        if self.frames.is_empty() {
            self.first_index = index;
        }
        self.frames.push_back(Arc::new(frame));
        if self.frames.len() > self.capacity {
            self.frames.pop_front();
            self.first_index += 1;
        }
        Ok(())
    }

    pub fn get(&self, index: i64) -> Option<&Arc<T>> {
        let off = index - self.first_index;
        (off >= 0).then(|| self.frames.get(off as usize)).flatten()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Sensor timing and sampler settings for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSetup {
    pub lidar: SweepSchedule,
    pub radar: SweepSchedule,
    pub lidar_params: LidarParams,
    pub radar_params: RadarParams,
    /// Pair each window with the Radar sweep completed at or before
    /// `t - lag·P_l` instead of the latest one at `t`.
    pub radar_lag: Option<u32>,
}

impl StreamSetup {
    pub fn ratio(&self) -> Result<u32> {
        compute_ratio(self.lidar.frequency(), self.radar.frequency())
    }

    /// First trigger time admissible under `policy`, including the pinned lag.
    pub fn warmup_ns(&self, policy: &FusionPolicy) -> Result<Nanos> {
        let ratio = self.ratio()?;
        let lag = self.radar_lag.unwrap_or(0) as i64 * self.lidar.period_ns();
        let base = warmup_bound(&self.lidar, &self.radar, policy, ratio);
        let back = (policy.num_history * policy.history_stride) as i64 * self.radar.period_ns();
        let radar_first = self.radar.completion_ns(self.radar.first_index());
        let mut need = base.max(radar_first + lag + back);
        if policy.history_alignment && policy.num_history > 0 {
            // the oldest window must start inside a buffered sweep
            let oldest_start = radar_first - self.radar.period_ns();
            need = need.max(oldest_start + self.radar.period_ns() + back);
        }
        Ok(need)
    }
}

/// Incremental sweep producer plus fusion-window assembler.
pub struct FusionStream<'a> {
    scenario: &'a Scenario,
    setup: StreamSetup,
    policy: FusionPolicy,
    ratio: u32,
    concat: usize,
    lidar: FrameRing<LidarRawFrame>,
    radar: FrameRing<RadarRawFrame>,
    next_lidar: i64,
    next_radar: i64,
    windows: BTreeMap<Nanos, FramePair>,
}

impl<'a> FusionStream<'a> {
    pub fn new(scenario: &'a Scenario, setup: StreamSetup, policy: FusionPolicy) -> Result<Self> {
        let ratio = setup.ratio()?;
        policy.validate(ratio)?;
        let concat = policy.concat_count(ratio) as usize;
        let per_radar = (setup.radar.period_ns() + setup.lidar.period_ns() - 1) / setup.lidar.period_ns();
        let span = (1 + policy.num_history * policy.history_stride) as usize;
        let lidar_cap = per_radar as usize * span + concat.max(per_radar as usize + 1) - per_radar as usize + 1;
        let radar_cap = ratio as usize * span + 2;
        Ok(Self {
            scenario,
            next_lidar: setup.lidar.first_index(),
            next_radar: setup.radar.first_index(),
            setup,
            policy,
            ratio,
            concat,
            lidar: FrameRing::new(lidar_cap),
            radar: FrameRing::new(radar_cap),
            windows: BTreeMap::new(),
        })
    }

    pub fn ratio(&self) -> u32 {
        self.ratio
    }

    pub fn setup(&self) -> &StreamSetup {
        &self.setup
    }

    pub fn lidar_ring(&self) -> &FrameRing<LidarRawFrame> {
        &self.lidar
    }

    pub fn radar_ring(&self) -> &FrameRing<RadarRawFrame> {
        &self.radar
    }

    /// Simulate every sweep completing at or before `t`.
    pub fn advance_to(&mut self, t: Nanos) -> Result<()> {
        while self.setup.lidar.completion_ns(self.next_lidar) <= t {
            let sweep = Sweep::of(&self.setup.lidar, self.next_lidar);
            let frame = scan_lidar(self.scenario, &sweep, &self.setup.lidar_params)?;
            self.lidar.push(sweep.index, frame)?;
            self.next_lidar += 1;
        }
        while self.setup.radar.completion_ns(self.next_radar) <= t {
            let sweep = Sweep::of(&self.setup.radar, self.next_radar);
            let frame = scan_radar(self.scenario, &sweep, &self.setup.radar_params)?;
            self.radar.push(sweep.index, frame)?;
            self.next_radar += 1;
        }
        Ok(())
    }

    fn not_warm(what: &str, t: Nanos) -> Error {
        Error::StreamNotWarm(format!("{what} not available at t={}s", ns_to_secs(t)))
    }

    fn concat_at(&self, t: Nanos) -> Result<ConcatLidarFrame> {
        let newest = self
            .setup
            .lidar
            .latest_completed(t)
            .ok_or_else(|| Self::not_warm("Lidar sweep", t))?;
        let oldest = newest - self.concat as i64 + 1;
        let frames: Vec<&LidarRawFrame> = (oldest..=newest)
            .map(|i| self.lidar.get(i).map(|f| f.as_ref()))
            .collect::<Option<_>>()
            .ok_or_else(|| Self::not_warm("concatenation source", t))?;
        concat_lidar(&frames, self.policy.sector_width_deg, self.setup.radar.period_ns(), self.concat)
    }

    fn radar_index_at(&self, t: Nanos) -> Result<i64> {
        let lag = self.setup.radar_lag.unwrap_or(0) as i64 * self.setup.lidar.period_ns();
        self.setup
            .radar
            .latest_completed(t - lag)
            .ok_or_else(|| Self::not_warm("Radar sweep", t))
    }

    fn offset_at(&self, t: Nanos) -> Result<u32> {
        match self.setup.radar_lag {
            Some(o) => Ok(o),
            None => compute_offset(t, &self.setup.radar, &self.setup.lidar),
        }
    }

    fn window_pair(&mut self, t: Nanos) -> Result<FramePair> {
        if let Some(p) = self.windows.get(&t) {
            return Ok(p.clone());
        }
        let lidar = Arc::new(self.concat_at(t)?);
        let r = self.radar_index_at(t)?;
        let radar = self.radar.get(r).cloned().ok_or_else(|| Self::not_warm("Radar sweep", t))?;
        let pair = FramePair {
            trigger_ns: t,
            offset: self.offset_at(t)?,
            lidar,
            radar,
            aligned: false,
        };
        self.windows.insert(t, pair.clone());
        Ok(pair)
    }

    fn aligned(&self, mut pair: FramePair, now: Nanos) -> Result<FramePair> {
        let p_r = self.setup.radar.period_ns();
        let window = (pair.trigger_ns - p_r, pair.trigger_ns);
        let prev = self
            .setup
            .radar
            .sweep_containing(window.0)
            .ok_or_else(|| Self::not_warm("aligned Radar window", window.0))?;
        let newest = self.radar_index_at(now)?;
        if prev + 1 > newest {
            return Err(Self::not_warm("Radar sweep following the aligned window", now));
        }
        let get = |i: i64| self.radar.get(i).ok_or_else(|| Self::not_warm("Radar sweep", now));
        let rebuilt = reconstruct_aligned_radar(get(prev)?, get(prev + 1)?, window)?;
        pair.radar = Arc::new(rebuilt);
        if self.policy.align_lidar_window {
            pair.lidar = Arc::new(pair.lidar.restricted_to(window.0, window.1));
        }
        pair.aligned = true;
        Ok(pair)
    }

    /// Assemble the fusion input at `trigger_ns`. Sweeps are simulated as needed.
    pub fn pair_at(&mut self, trigger_ns: Nanos) -> Result<PairedFrameSet> {
        self.advance_to(trigger_ns)?;
        let p_r = self.setup.radar.period_ns();
        for t in history_times(trigger_ns, self.policy.num_history, self.policy.history_stride, p_r) {
            self.window_pair(t)?;
        }
        let current = self.window_pair(trigger_ns)?;
        let mut history = select_history(
            &self.windows,
            trigger_ns,
            self.policy.num_history,
            self.policy.history_stride,
            p_r,
        )?;
        if self.policy.history_alignment {
            history = history
                .into_iter()
                .map(|h| self.aligned(h, trigger_ns))
                .collect::<Result<_>>()?;
        }
        let keep_from = trigger_ns - (self.policy.num_history * self.policy.history_stride) as i64 * p_r;
        self.windows = self.windows.split_off(&keep_from);
        Ok(PairedFrameSet {
            trigger_ns,
            offset: current.offset,
            current,
            history,
            policy_tag: self.policy.tag(),
            lidar_period_ns: self.setup.lidar.period_ns(),
            radar_period_ns: p_r,
        })
    }
}

/// One fusion input per trigger from the warm-up bound up to `horizon_ns`.
pub fn stream_fusion(
    scenario: &Scenario,
    setup: &StreamSetup,
    policy: &FusionPolicy,
    horizon_ns: Nanos,
) -> Result<Vec<PairedFrameSet>> {
    let mut stream = FusionStream::new(scenario, setup.clone(), policy.clone())?;
    let warm = setup.warmup_ns(policy)?;
    if horizon_ns <= warm {
        return Err(Error::StreamNotWarm(format!(
            "horizon {}s does not exceed warm-up {}s",
            ns_to_secs(horizon_ns),
            ns_to_secs(warm)
        )));
    }
    let triggers = fusion_triggers(&setup.lidar, policy.alpha, stream.ratio(), horizon_ns, warm)?;
    triggers.into_iter().map(|t| stream.pair_at(t)).collect()
}

pub fn lidar_file_name(index: i64) -> String {
    format!("lidar_{index:06}.tfr")
}

pub fn radar_file_name(index: i64) -> String {
    format!("radar_{index:06}.tfr")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub trigger_ns: Nanos,
    pub offset: u32,
    pub lidar_frames: Vec<String>,
    pub radar_frames: Vec<String>,
    /// Reconstruction window when the Radar frame is aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_window_ns: Option<[Nanos; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub trigger_ns: Nanos,
    pub trigger_t: f64,
    pub offset: u32,
    pub policy: String,
    pub current: ManifestPair,
    pub history: Vec<ManifestPair>,
}

impl ManifestPair {
    fn of(pair: &FramePair) -> Self {
        let (radar_frames, aligned_window_ns) = if pair.aligned {
            let r = &pair.radar;
            (
                vec![radar_file_name(r.sweep_index), radar_file_name(r.sweep_index + 1)],
                Some([r.t_start_ns, r.t_end_ns]),
            )
        } else {
            (vec![radar_file_name(pair.radar.sweep_index)], None)
        };
        Self {
            trigger_ns: pair.trigger_ns,
            offset: pair.offset,
            lidar_frames: pair.lidar.sources.iter().map(|s| lidar_file_name(s.index)).collect(),
            radar_frames,
            aligned_window_ns,
        }
    }
}

impl ManifestEntry {
    pub fn of(set: &PairedFrameSet) -> Self {
        Self {
            trigger_ns: set.trigger_ns,
            trigger_t: set.trigger_t(),
            offset: set.offset,
            policy: set.policy_tag.clone(),
            current: ManifestPair::of(&set.current),
            history: set.history.iter().map(ManifestPair::of).collect(),
        }
    }
}
