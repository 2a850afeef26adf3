//! Sweep schedules and the fusion timing arithmetic built on them.
//!
//! All instants are integer nanoseconds since scenario start so that
//! completion/trigger coincidences are decided exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer nanoseconds since scenario start.
pub type Nanos = i64;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

pub fn secs_to_ns(secs: f64) -> Nanos {
    (secs * NANOS_PER_SEC as f64).round() as Nanos
}

pub fn ns_to_secs(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_SEC as f64
}

/// Periodic sweep-completion timing of one rotating sensor.
///
/// Sweep `i` occupies `[phase + (i-1)·period, phase + i·period)` and completes
/// at `phase + i·period`. Only sweeps that start at or after `t = 0` exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SweepSchedule {
    period_ns: Nanos,
    phase_ns: Nanos,
}

impl SweepSchedule {
    pub fn from_frequency(hz: f64, phase_secs: f64) -> Result<Self> {
        if !(hz.is_finite() && hz > 0.0) {
            return Err(Error::Parameter(format!("sweep frequency must be > 0, got {hz}")));
        }
        Self::from_ns((NANOS_PER_SEC as f64 / hz).round() as Nanos, secs_to_ns(phase_secs))
    }

    pub fn from_ns(period_ns: Nanos, phase_ns: Nanos) -> Result<Self> {
        if period_ns <= 0 {
            return Err(Error::Parameter(format!("sweep period must be > 0 ns, got {period_ns}")));
        }
        Ok(Self { period_ns, phase_ns })
    }

    pub fn period_ns(&self) -> Nanos {
        self.period_ns
    }

    pub fn phase_ns(&self) -> Nanos {
        self.phase_ns
    }

    pub fn period_secs(&self) -> f64 {
        ns_to_secs(self.period_ns)
    }

    pub fn frequency(&self) -> f64 {
        NANOS_PER_SEC as f64 / self.period_ns as f64
    }

    pub fn with_phase_ns(&self, phase_ns: Nanos) -> Self {
        Self { phase_ns, ..*self }
    }

    pub fn completion_ns(&self, index: i64) -> Nanos {
        self.phase_ns + index * self.period_ns
    }

    pub fn start_ns(&self, index: i64) -> Nanos {
        self.completion_ns(index - 1)
    }

    /// Smallest sweep index whose interval starts at or after `t = 0`.
    pub fn first_index(&self) -> i64 {
        1 + ceil_div(-self.phase_ns, self.period_ns)
    }

    /// Latest existing sweep completed at or before `t`.
    pub fn latest_completed(&self, t: Nanos) -> Option<i64> {
        let idx = (t - self.phase_ns).div_euclid(self.period_ns);
        (idx >= self.first_index()).then_some(idx)
    }

    /// The existing sweep whose interval contains `t`.
    pub fn sweep_containing(&self, t: Nanos) -> Option<i64> {
        let idx = (t - self.phase_ns).div_euclid(self.period_ns) + 1;
        (idx >= self.first_index()).then_some(idx)
    }

    /// Capture instant of `azimuth_deg` within sweep `index`.
    pub fn capture_ns(&self, index: i64, azimuth_deg: f64) -> Nanos {
        let frac = azimuth_deg.rem_euclid(360.0) / 360.0;
        self.start_ns(index) + (frac * self.period_ns as f64).round() as Nanos
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

fn default_alpha() -> u32 {
    1
}
fn default_num_history() -> u32 {
    4
}
fn default_stride() -> u32 {
    1
}
fn default_true() -> bool {
    true
}
fn default_sector() -> f64 {
    120.0
}

/// Scheduling policy for timely fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPolicy {
    /// Lidar periods between fusion triggers.
    #[serde(default = "default_alpha")]
    pub alpha: u32,
    #[serde(default = "default_num_history")]
    pub num_history: u32,
    /// 1 = consecutive history windows, 2 = every other window.
    #[serde(default = "default_stride")]
    pub history_stride: u32,
    /// Replace history Radar sweeps with reconstructions cut to the Lidar window.
    #[serde(default)]
    pub history_alignment: bool,
    /// When aligning, also drop history Lidar points outside the aligned window.
    #[serde(default = "default_true")]
    pub align_lidar_window: bool,
    /// Raw Lidar sweeps per concatenated frame; `None` means `ratio + 1`.
    #[serde(default)]
    pub concat_frames: Option<u32>,
    #[serde(default = "default_sector")]
    pub sector_width_deg: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        Self {
            alpha: 1,
            num_history: 4,
            history_stride: 1,
            history_alignment: false,
            align_lidar_window: true,
            concat_frames: None,
            sector_width_deg: 120.0,
        }
    }
}

impl FusionPolicy {
    pub fn validate(&self, ratio: u32) -> Result<()> {
        if self.alpha == 0 || self.alpha > ratio {
            return Err(Error::Policy(format!(
                "alpha must satisfy 1 <= alpha <= ratio ({ratio}), got {}",
                self.alpha
            )));
        }
        if !matches!(self.history_stride, 1 | 2) {
            return Err(Error::Policy(format!(
                "history_stride must be 1 or 2, got {}",
                self.history_stride
            )));
        }
        if !(self.sector_width_deg > 0.0 && self.sector_width_deg <= 360.0) {
            return Err(Error::Policy(format!(
                "sector width must lie in (0, 360], got {}",
                self.sector_width_deg
            )));
        }
        if self.concat_frames == Some(0) {
            return Err(Error::Policy("concat_frames must be >= 1".into()));
        }
        Ok(())
    }

    pub fn concat_count(&self, ratio: u32) -> u32 {
        self.concat_frames.unwrap_or(ratio + 1)
    }

    /// Short tag used in manifests and reports, e.g. `h4s1` or `h2s2a`.
    pub fn tag(&self) -> String {
        format!(
            "h{}s{}{}",
            self.num_history,
            self.history_stride,
            if self.history_alignment { "a" } else { "" }
        )
    }
}

/// Number of Lidar sweeps per Radar sweep, `floor(f_lidar / f_radar)`.
pub fn compute_ratio(f_lidar: f64, f_radar: f64) -> Result<u32> {
    if !(f_radar > 0.0 && f_lidar >= f_radar && f_lidar.is_finite()) {
        return Err(Error::FrequencyOrder {
            lidar: f_lidar,
            radar: f_radar,
        });
    }
    // Relative guard so that e.g. 0.3/0.1 floors to 3.
    Ok((f_lidar / f_radar * (1.0 + 1e-12)).floor() as u32)
}

pub fn fusion_frequency(f_lidar: f64, alpha: u32, ratio: u32) -> Result<f64> {
    if alpha == 0 || alpha > ratio {
        return Err(Error::Policy(format!(
            "alpha must satisfy 1 <= alpha <= ratio ({ratio}), got {alpha}"
        )));
    }
    Ok(f_lidar / alpha as f64)
}

/// Every `alpha`-th Lidar completion in `[warmup, horizon)`, starting from the
/// earliest completion at or after `warmup`.
pub fn fusion_triggers(
    lidar: &SweepSchedule,
    alpha: u32,
    ratio: u32,
    horizon_ns: Nanos,
    warmup_ns: Nanos,
) -> Result<Vec<Nanos>> {
    fusion_frequency(lidar.frequency(), alpha, ratio)?;
    if horizon_ns <= 0 {
        return Err(Error::Parameter("horizon must be > 0".into()));
    }
    let mut idx = lidar.first_index().max(ceil_div(warmup_ns - lidar.phase_ns(), lidar.period_ns()));
    let mut out = Vec::new();
    loop {
        let t = lidar.completion_ns(idx);
        if t >= horizon_ns {
            break;
        }
        out.push(t);
        idx += alpha as i64;
    }
    Ok(out)
}

/// Number of complete Lidar periods between the latest Radar completion at or
/// before `trigger` and the trigger itself. A Radar completion exactly at the
/// trigger yields 0.
pub fn compute_offset(trigger: Nanos, radar: &SweepSchedule, lidar: &SweepSchedule) -> Result<u32> {
    let r = radar.latest_completed(trigger).ok_or_else(|| {
        Error::StreamNotWarm(format!("no radar sweep completed by t={}s", ns_to_secs(trigger)))
    })?;
    let gap = trigger - radar.completion_ns(r);
    Ok((gap / lidar.period_ns()) as u32)
}

/// Earliest instant at which a fusion may fire under `policy`: the concatenated
/// Lidar frame and one Radar sweep must exist for the current window and for
/// every history window `num_history·stride` Radar periods back.
pub fn warmup_bound(
    lidar: &SweepSchedule,
    radar: &SweepSchedule,
    policy: &FusionPolicy,
    ratio: u32,
) -> Nanos {
    let concat = policy.concat_count(ratio) as i64;
    let lidar_ready = lidar.completion_ns(lidar.first_index() + concat - 1);
    let radar_ready = radar.completion_ns(radar.first_index());
    let mut window_ready = lidar_ready.max(radar_ready);
    if policy.history_alignment && policy.num_history > 0 {
        // reconstruction needs the sweep containing the window start
        window_ready = window_ready.max(radar.start_ns(radar.first_index()) + radar.period_ns());
    }
    window_ready + (policy.num_history * policy.history_stride) as i64 * radar.period_ns()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(hz: f64, phase: f64) -> SweepSchedule {
        SweepSchedule::from_frequency(hz, phase).unwrap()
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compute_ratio(20.0, 4.0).unwrap(), 5);
        assert_eq!(compute_ratio(10.0, 10.0).unwrap(), 1);
        assert_eq!(compute_ratio(13.0, 4.0).unwrap(), 3);
        assert!(matches!(compute_ratio(4.0, 20.0), Err(Error::FrequencyOrder { .. })));
        assert!(compute_ratio(4.0, 0.0).is_err());
    }

    #[test]
    fn fusion_frequency_examples() {
        assert_eq!(fusion_frequency(20.0, 1, 5).unwrap(), 20.0);
        assert_eq!(fusion_frequency(20.0, 3, 5).unwrap(), 20.0 / 3.0);
        assert!(matches!(fusion_frequency(20.0, 6, 5), Err(Error::Policy(_))));
        assert!(fusion_frequency(20.0, 0, 5).is_err());
    }

    #[test]
    fn fusion_frequency_decreases_with_alpha() {
        let f: Vec<f64> = (1..=5).map(|a| fusion_frequency(20.0, a, 5).unwrap()).collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn triggers_with_warmup() {
        let l = sched(20.0, 0.0);
        let t = fusion_triggers(&l, 1, 5, secs_to_ns(0.5), secs_to_ns(0.3)).unwrap();
        let want: Vec<Nanos> = [0.30, 0.35, 0.40, 0.45].iter().map(|s| secs_to_ns(*s)).collect();
        assert_eq!(t, want);
        assert!(matches!(
            fusion_triggers(&l, 20, 5, secs_to_ns(0.5), 0),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn triggers_single_sensor_stream() {
        let s = sched(4.0, 0.0);
        let t = fusion_triggers(&s, 1, 1, secs_to_ns(1.0), 0).unwrap();
        let want: Vec<Nanos> = [0.25, 0.5, 0.75].iter().map(|s| secs_to_ns(*s)).collect();
        assert_eq!(t, want);
    }

    #[test]
    fn trigger_spacing_is_alpha_periods() {
        let l = sched(20.0, 0.013);
        for alpha in 1..=5 {
            let t = fusion_triggers(&l, alpha, 5, secs_to_ns(3.0), secs_to_ns(0.4)).unwrap();
            assert!(t.windows(2).all(|w| w[1] - w[0] == alpha as i64 * l.period_ns()));
        }
    }

    #[test]
    fn offset_examples() {
        let r = sched(4.0, 0.0);
        let l = sched(20.0, 0.0);
        assert_eq!(compute_offset(secs_to_ns(0.25), &r, &l).unwrap(), 0);
        assert_eq!(compute_offset(secs_to_ns(0.40), &r, &l).unwrap(), 3);
        let r_shift = sched(4.0, 0.01);
        assert_eq!(compute_offset(secs_to_ns(0.50), &r_shift, &l).unwrap(), 4);
        assert!(matches!(
            compute_offset(secs_to_ns(0.2), &r, &l),
            Err(Error::StreamNotWarm(_))
        ));
    }

    #[test]
    fn offsets_cycle_over_a_radar_period() {
        let r = sched(4.0, 0.0);
        let l = sched(20.0, 0.0);
        let offs: Vec<u32> = (10..20)
            .map(|k| compute_offset(l.completion_ns(k), &r, &l).unwrap())
            .collect();
        assert_eq!(offs, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn first_index_respects_time_origin() {
        assert_eq!(sched(4.0, 0.0).first_index(), 1);
        // sweep 1 of a phase -0.1 s schedule would start at -0.35 s
        let s = sched(4.0, -0.1);
        assert_eq!(s.first_index(), 2);
        assert!(s.start_ns(s.first_index()) >= 0);
        assert!(s.start_ns(s.first_index() - 1) < 0);
        assert_eq!(s.latest_completed(secs_to_ns(0.3)), None);
        assert_eq!(s.latest_completed(secs_to_ns(0.4)), Some(2));
    }

    #[test]
    fn warmup_examples() {
        let l = sched(20.0, 0.0);
        let r = sched(4.0, 0.0);
        let none = FusionPolicy { num_history: 0, ..Default::default() };
        assert_eq!(warmup_bound(&l, &r, &none, 5), secs_to_ns(0.30));
        assert_eq!(warmup_bound(&l, &r, &FusionPolicy::default(), 5), secs_to_ns(1.30));
        let skip = FusionPolicy { num_history: 2, history_stride: 2, ..Default::default() };
        assert_eq!(warmup_bound(&l, &r, &skip, 5), secs_to_ns(1.30));
    }

    #[test]
    fn policy_validation() {
        assert!(FusionPolicy::default().validate(5).is_ok());
        assert!(FusionPolicy { alpha: 6, ..Default::default() }.validate(5).is_err());
        assert!(FusionPolicy { history_stride: 3, ..Default::default() }.validate(5).is_err());
        assert!(FusionPolicy { sector_width_deg: 0.0, ..Default::default() }.validate(5).is_err());
    }
}
