//! Synthetic bird's-eye-view world: moving vehicles, static clutter and exact
//! ground truth at any instant. The sensor rig sits at the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_convex, signed_area, wrap_rad, Point2};

/// Oriented rectangle in the ground plane. `yaw` is the heading of the length axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Result<Self> {
        let b = Self {
            cx,
            cy,
            length,
            width,
            yaw: wrap_rad(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.length, self.width, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.length <= 0.0 || self.width <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "box needs finite fields and positive size, got {}x{}",
                self.length, self.width
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Unit vectors along the length and width axes.
    pub fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.yaw.sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Point2; 4] {
        let (u, v) = self.axes();
        let c = self.center();
        let hl = u * (0.5 * self.length);
        let hw = v * (0.5 * self.width);
        [c - hl - hw, c + hl - hw, c + hl + hw, c - hl + hw]
    }

    /// Coordinates of `p` in the box frame (length axis, width axis).
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (u, v) = self.axes();
        let d = p - self.center();
        Point2::new(d.dot(u), d.dot(v))
    }

    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.length + tol && l.y.abs() <= 0.5 * self.width + tol
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Entry and exit distances of the ray from the origin along unit `dir`,
    /// or `None` if the ray misses. Slab test in the box frame.
    pub fn ray_chord(&self, dir: Point2) -> Option<(f64, f64)> {
        let o = self.to_local(Point2::default());
        let (u, v) = self.axes();
        let d = Point2::new(dir.dot(u), dir.dot(v));
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (oc, dc, half) in [(o.x, d.x, 0.5 * self.length), (o.y, d.y, 0.5 * self.width)] {
            if dc.abs() < 1e-15 {
                if oc.abs() > half {
                    return None;
                }
            } else {
                let a = (-half - oc) / dc;
                let b = (half - oc) / dc;
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        (t1 >= t0 && t1 > 0.0).then(|| (t0.max(0.0), t1))
    }

    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        signed_area(&clip_convex(&self.corners(), &other.corners())) > 1e-12
    }
}

/// A vehicle with constant translational velocity and constant yaw rate
/// (translation and rotation are decoupled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleTrack {
    pub id: u32,
    pub center: [f64; 2],
    /// `[length, width]`
    pub size: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
}

impl VehicleTrack {
    pub fn box_at(&self, t: f64) -> OrientedBox {
        OrientedBox {
            cx: self.center[0] + self.velocity[0] * t,
            cy: self.center[1] + self.velocity[1] * t,
            length: self.size[0],
            width: self.size[1],
            yaw: wrap_rad(self.yaw + self.yaw_rate * t),
        }
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }
}

/// Static non-vehicle structure visible to both sensors. Radar returns scale
/// with `reflectivity`; vehicles reflect at the Radar's target return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterObject {
    pub id: u32,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub yaw: f64,
    pub reflectivity: f64,
}

impl ClutterObject {
    pub fn bbox(&self) -> OrientedBox {
        OrientedBox {
            cx: self.center[0],
            cy: self.center[1],
            length: self.size[0],
            width: self.size[1],
            yaw: wrap_rad(self.yaw),
        }
    }
}

/// Anything a sensor ray can hit at a given instant.
#[derive(Debug, Clone, Copy)]
pub struct Reflector {
    pub bbox: OrientedBox,
    /// `None` means "vehicle": use the Radar's target return.
    pub reflectivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    /// Half-extent of the square world in meters.
    pub bounds: f64,
    pub seed: u64,
    pub vehicles: Vec<VehicleTrack>,
    #[serde(default)]
    pub clutter: Vec<ClutterObject>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Parameter(format!("duration must be > 0, got {}", self.duration)));
        }
        let boxes: Vec<OrientedBox> = self
            .vehicles
            .iter()
            .map(|v| v.box_at(0.0))
            .chain(self.clutter.iter().map(|c| c.bbox()))
            .collect();
        for b in &boxes {
            b.validate()?;
        }
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if boxes[i].overlaps(&boxes[j]) {
                    return Err(Error::Parameter(format!("objects {i} and {j} overlap at t=0")));
                }
            }
        }
        Ok(())
    }

    /// Vehicle boxes at `t`, in vehicle order.
    pub fn ground_truth_at(&self, t: f64) -> Result<Vec<OrientedBox>> {
        self.check_time(t)?;
        Ok(self.vehicles.iter().map(|v| v.box_at(t)).collect())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::Range(format!(
                "t={t} outside scenario duration [0, {}]",
                self.duration
            )));
        }
        Ok(())
    }

    /// Vehicles and clutter at `t` without a range check.
    pub fn reflectors_at(&self, t: f64) -> Vec<Reflector> {
        self.vehicles
            .iter()
            .map(|v| Reflector {
                bbox: v.box_at(t),
                reflectivity: None,
            })
            .chain(self.clutter.iter().map(|c| Reflector {
                bbox: c.bbox(),
                reflectivity: Some(c.reflectivity),
            }))
            .collect()
    }

    pub fn is_static(&self) -> bool {
        self.vehicles
            .iter()
            .all(|v| v.velocity == [0.0, 0.0] && v.yaw_rate == 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }
}

fn d_duration() -> f64 {
    3.0
}
fn d_bounds() -> f64 {
    60.0
}
fn d_vehicle_count() -> [u32; 2] {
    [3, 8]
}
fn d_speed() -> [f64; 2] {
    [5.0, 15.0]
}
fn d_length() -> [f64; 2] {
    [4.5, 4.5]
}
fn d_width() -> [f64; 2] {
    [2.0, 2.0]
}
fn d_yaw_rate() -> [f64; 2] {
    [-0.05, 0.05]
}
fn d_range() -> [f64; 2] {
    [6.0, 45.0]
}
fn d_clutter_count() -> [u32; 2] {
    [5, 10]
}
fn d_clutter_length() -> [f64; 2] {
    [3.5, 5.5]
}
fn d_clutter_width() -> [f64; 2] {
    [1.5, 2.5]
}
fn d_clutter_reflectivity() -> [f64; 2] {
    [0.3, 0.95]
}
fn d_min_separation() -> f64 {
    7.0
}
fn d_max_attempts() -> u32 {
    5000
}

/// Random scenario generator settings. Ranges are inclusive `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "d_duration")]
    pub duration: f64,
    #[serde(default = "d_bounds")]
    pub bounds: f64,
    #[serde(default = "d_vehicle_count")]
    pub vehicle_count: [u32; 2],
    #[serde(default = "d_speed")]
    pub speed: [f64; 2],
    #[serde(default = "d_length")]
    pub length: [f64; 2],
    #[serde(default = "d_width")]
    pub width: [f64; 2],
    #[serde(default = "d_yaw_rate")]
    pub yaw_rate: [f64; 2],
    /// Allowed distance from the sensor for object centers over the whole duration.
    #[serde(default = "d_range")]
    pub range: [f64; 2],
    #[serde(default = "d_clutter_count")]
    pub clutter_count: [u32; 2],
    #[serde(default = "d_clutter_length")]
    pub clutter_length: [f64; 2],
    #[serde(default = "d_clutter_width")]
    pub clutter_width: [f64; 2],
    #[serde(default = "d_clutter_reflectivity")]
    pub clutter_reflectivity: [f64; 2],
    /// Minimum center distance between any two objects at all times.
    #[serde(default = "d_min_separation")]
    pub min_separation: f64,
    #[serde(default = "d_max_attempts")]
    pub max_attempts: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: d_duration(),
            bounds: d_bounds(),
            vehicle_count: d_vehicle_count(),
            speed: d_speed(),
            length: d_length(),
            width: d_width(),
            yaw_rate: d_yaw_rate(),
            range: d_range(),
            clutter_count: d_clutter_count(),
            clutter_length: d_clutter_length(),
            clutter_width: d_clutter_width(),
            clutter_reflectivity: d_clutter_reflectivity(),
            min_separation: d_min_separation(),
            max_attempts: d_max_attempts(),
        }
    }
}

impl ScenarioConfig {
    /// Same layout statistics with every vehicle parked.
    pub fn parked(&self) -> Self {
        Self {
            speed: [0.0, 0.0],
            yaw_rate: [0.0, 0.0],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered_f = |name: &str, r: [f64; 2], min: f64| {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= min) {
                return Err(Error::Parameter(format!("{name} range {r:?} is invalid")));
            }
            Ok(())
        };
        ordered_f("speed", self.speed, 0.0)?;
        ordered_f("length", self.length, f64::MIN_POSITIVE)?;
        ordered_f("width", self.width, f64::MIN_POSITIVE)?;
        ordered_f("yaw_rate", self.yaw_rate, f64::MIN)?;
        ordered_f("range", self.range, 0.0)?;
        ordered_f("clutter_length", self.clutter_length, f64::MIN_POSITIVE)?;
        ordered_f("clutter_width", self.clutter_width, f64::MIN_POSITIVE)?;
        ordered_f("clutter_reflectivity", self.clutter_reflectivity, 0.0)?;
        if self.vehicle_count[0] > self.vehicle_count[1] || self.clutter_count[0] > self.clutter_count[1] {
            return Err(Error::Parameter("count ranges must be ordered".into()));
        }
        if !(self.duration > 0.0 && self.bounds > 0.0) {
            return Err(Error::Parameter("duration and bounds must be > 0".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Deterministic scenario for `(config, seed)`. Objects are placed by
/// rejection sampling so they stay inside the range window and apart from each
/// other for the whole duration.
pub fn random_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_vehicles = rng.random_range(config.vehicle_count[0]..=config.vehicle_count[1]);
    let n_clutter = rng.random_range(config.clutter_count[0]..=config.clutter_count[1]);
    let checkpoints: Vec<f64> = (0..=12).map(|k| config.duration * k as f64 / 12.0).collect();

    // center trajectories of already placed objects, sampled at checkpoints
    let mut placed: Vec<Vec<Point2>> = Vec::new();
    let mut placed_boxes: Vec<OrientedBox> = Vec::new();

    let mut try_place = |rng: &mut ChaCha8Rng,
                         velocity: [f64; 2],
                         size: [f64; 2],
                         yaw: f64|
     -> Option<[f64; 2]> {
        for _ in 0..config.max_attempts {
            let r = sample(rng, config.range);
            let bearing = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let c0 = Point2::new(r * bearing.cos(), r * bearing.sin());
            let track: Vec<Point2> = checkpoints
                .iter()
                .map(|&t| c0 + Point2::new(velocity[0], velocity[1]) * t)
                .collect();
            let margin = 0.5 * size[0].hypot(size[1]);
            let inside = track.iter().all(|p| {
                let d = p.norm();
                d >= config.range[0]
                    && d <= config.range[1]
                    && p.x.abs() + margin <= config.bounds
                    && p.y.abs() + margin <= config.bounds
            });
            if !inside {
                continue;
            }
            let apart = placed.iter().all(|other| {
                other
                    .iter()
                    .zip(&track)
                    .all(|(a, b)| (*a - *b).norm() >= config.min_separation)
            });
            if !apart {
                continue;
            }
            let b0 = OrientedBox {
                cx: c0.x,
                cy: c0.y,
                length: size[0],
                width: size[1],
                yaw,
            };
            if placed_boxes.iter().any(|o| o.overlaps(&b0)) {
                continue;
            }
            placed.push(track);
            placed_boxes.push(b0);
            return Some([c0.x, c0.y]);
        }
        None
    };

    let mut vehicles = Vec::with_capacity(n_vehicles as usize);
    for id in 0..n_vehicles {
        let speed = sample(&mut rng, config.speed);
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let size = [sample(&mut rng, config.length), sample(&mut rng, config.width)];
        let yaw_rate = sample(&mut rng, config.yaw_rate);
        let velocity = [speed * heading.cos(), speed * heading.sin()];
        let center = try_place(&mut rng, velocity, size, heading).ok_or_else(|| {
            Error::Generation(format!(
                "could not place vehicle {id} after {} attempts",
                config.max_attempts
            ))
        })?;
        vehicles.push(VehicleTrack {
            id,
            center,
            size,
            yaw: wrap_rad(heading),
            velocity,
            yaw_rate,
        });
    }
    let mut clutter = Vec::with_capacity(n_clutter as usize);
    for id in 0..n_clutter {
        let size = [
            sample(&mut rng, config.clutter_length),
            sample(&mut rng, config.clutter_width),
        ];
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let reflectivity = sample(&mut rng, config.clutter_reflectivity);
        let center = try_place(&mut rng, [0.0, 0.0], size, yaw).ok_or_else(|| {
            Error::Generation(format!(
                "could not place clutter {id} after {} attempts",
                config.max_attempts
            ))
        })?;
        clutter.push(ClutterObject {
            id,
            center,
            size,
            yaw: wrap_rad(yaw),
            reflectivity,
        });
    }
    let sc = Scenario {
        duration: config.duration,
        bounds: config.bounds,
        seed,
        vehicles,
        clutter,
    };
    sc.validate()?;
    Ok(sc)
}
