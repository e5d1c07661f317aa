//! Observation/forecast data model, the synthetic highway generator, and the
//! JSON-Lines scenario format.
//!
//! World frame: a straight road along +x with lane centres at `y = i * lane_width`.
//! Every scenario is translated so the ego sits at the origin at the last
//! observed step; axes stay aligned with the road.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const EGO_ID: u32 = 0;
pub const NUM_AGENT_TYPES: usize = 3;
/// Per-agent features before the context vector is appended.
pub const STATE_FEATURES: usize = 5 + NUM_AGENT_TYPES;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Agent slots including the ego.
    pub n_max: usize,
    pub lanes: usize,
    pub lane_width: f64,
    pub speed_limit: f64,
    pub context_len: usize,
    /// Std-dev (m) of position noise on observed steps.
    pub obs_noise: f64,
    pub seed: u64,
    pub count: usize,
    pub profile: String,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            t_h: 15,
            t_f: 25,
            dt: 0.2,
            n_max: 20,
            lanes: 3,
            lane_width: 3.75,
            speed_limit: 33.0,
            context_len: 8,
            obs_noise: 0.02,
            seed: 7,
            count: 192,
            profile: "mixed".into(),
            val_count: 48,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(CoreError::Config(format!("data.{f}: {m}")));
        if self.t_h < 2 {
            return bad("t_h", "need at least 2 observed steps");
        }
        if self.t_f < 1 {
            return bad("t_f", "must be positive");
        }
        if self.dt <= 0.0 {
            return bad("dt", "must be positive");
        }
        if self.n_max < 1 {
            return bad("n_max", "must be positive");
        }
        if self.lanes < 1 || self.lane_width <= 0.0 {
            return bad("lanes", "need at least one lane of positive width");
        }
        if self.context_len < CONTEXT_FIELDS {
            return bad("context_len", &format!("must be at least {CONTEXT_FIELDS}"));
        }
        Profile::parse(&self.profile)?;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        STATE_FEATURES + self.context_len
    }

    pub fn horizon_s(&self) -> f64 {
        self.t_f as f64 * self.dt
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
    pub a: f64,
    #[serde(rename = "type")]
    pub agent_type: u8,
}

impl AgentState {
    pub fn velocity(&self) -> [f64; 2] {
        [self.v * self.theta.cos(), self.v * self.theta.sin()]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ego: AgentState,
    pub neighbors: Vec<(u32, AgentState)>,
    pub context: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationWindow {
    pub scenes: Vec<Scene>,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(into = "u8", try_from = "u8")]
pub enum Maneuver {
    LaneKeep,
    LeftChange,
    RightChange,
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::LaneKeep, Maneuver::LeftChange, Maneuver::RightChange];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::LaneKeep => "lane-keep",
            Maneuver::LeftChange => "left-LC",
            Maneuver::RightChange => "right-LC",
        }
    }
}

impl From<Maneuver> for u8 {
    fn from(m: Maneuver) -> u8 {
        m as u8
    }
}

impl TryFrom<u8> for Maneuver {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Maneuver::ALL.get(v as usize).copied().ok_or_else(|| format!("unknown maneuver label {v}"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ForecastMode {
    pub traj: Vec<[f64; 2]>,
    pub prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MultimodalForecast {
    pub modes: Vec<ForecastMode>,
}

impl MultimodalForecast {
    pub fn validate(&self, t_f: usize) -> Result<()> {
        let field = |f: &str, m: String| Err(CoreError::Validation { field: f.into(), msg: m });
        if self.modes.is_empty() {
            return field("forecast.modes", "no modes".into());
        }
        let mut total = 0.0;
        for (k, m) in self.modes.iter().enumerate() {
            if !(m.prob >= 0.0) {
                return field("forecast.modes.prob", format!("mode {k} has probability {}", m.prob));
            }
            if m.traj.len() != t_f {
                return field("forecast.modes.traj", format!("mode {k} has {} waypoints, expected {t_f}", m.traj.len()));
            }
            total += m.prob;
        }
        if (total - 1.0).abs() > 1e-6 {
            return field("forecast.modes.prob", format!("probabilities sum to {total}, expected 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentFuture {
    pub id: u32,
    pub traj: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub window: ObservationWindow,
    /// Ground-truth futures; the ego's entry has id 0.
    pub futures: Vec<AgentFuture>,
    pub label: Maneuver,
    pub forecast: Option<MultimodalForecast>,
    pub seed: u64,
}

impl Scenario {
    pub fn last(&self) -> &Scene {
        self.window.scenes.last().expect("validated window is non-empty")
    }

    pub fn future_of(&self, id: u32) -> Option<&[[f64; 2]]> {
        self.futures.iter().find(|f| f.id == id).map(|f| f.traj.as_slice())
    }

    pub fn ego_future(&self) -> &[[f64; 2]] {
        self.future_of(EGO_ID).expect("validated scenario has an ego future")
    }

    /// Road edges `(right, left)` in the scenario frame at the last step.
    pub fn road_edges(&self) -> (f64, f64) {
        let c = &self.last().context;
        let ego_y = self.last().ego.y;
        (ego_y - c[CTX_DIST_RIGHT], ego_y + c[CTX_DIST_LEFT])
    }

    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        let field = |f: &str, m: String| Err(CoreError::Validation { field: f.into(), msg: m });
        if self.window.scenes.len() != cfg.t_h {
            return field("obs", format!("{} steps, expected {}", self.window.scenes.len(), cfg.t_h));
        }
        if !(self.window.dt > 0.0) || (self.window.dt - cfg.dt).abs() > 1e-12 {
            return field("dt", format!("{} does not match configured {}", self.window.dt, cfg.dt));
        }
        for (t, s) in self.window.scenes.iter().enumerate() {
            let mut ids = vec![EGO_ID];
            for (id, a) in std::iter::once((EGO_ID, &s.ego)).chain(s.neighbors.iter().map(|(i, a)| (*i, a))) {
                if !(a.v >= 0.0) {
                    return field("obs.v", format!("step {t} agent {id}: speed {} < 0", a.v));
                }
                if !(a.theta > -PI && a.theta <= PI) {
                    return field("obs.theta", format!("step {t} agent {id}: heading {} outside (-pi, pi]", a.theta));
                }
                if (a.agent_type as usize) >= NUM_AGENT_TYPES {
                    return field("obs.type", format!("step {t} agent {id}: unknown type {}", a.agent_type));
                }
                if ![a.x, a.y, a.a].iter().all(|v| v.is_finite()) {
                    return field("obs", format!("step {t} agent {id}: non-finite state"));
                }
            }
            for (id, _) in &s.neighbors {
                if ids.contains(id) {
                    return field("obs.id", format!("step {t}: duplicate agent id {id}"));
                }
                ids.push(*id);
            }
            if s.context.len() != cfg.context_len {
                return field("context", format!("step {t}: length {}, expected {}", s.context.len(), cfg.context_len));
            }
        }
        if self.future_of(EGO_ID).is_none() {
            return field("future", "missing ego future".into());
        }
        for f in &self.futures {
            if f.traj.len() != cfg.t_f {
                return field("future.traj", format!("agent {}: {} waypoints, expected {}", f.id, f.traj.len(), cfg.t_f));
            }
        }
        if let Some(fc) = &self.forecast {
            fc.validate(cfg.t_f)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub seed: Option<u64>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

// Context vector layout; any remaining slots are zero.
pub const CTX_LANE_OFFSET: usize = 0;
pub const CTX_LANE_WIDTH: usize = 1;
pub const CTX_DIST_LEFT: usize = 2;
pub const CTX_DIST_RIGHT: usize = 3;
pub const CTX_SPEED_LIMIT: usize = 4;
pub const CTX_LANES: usize = 5;
pub const CTX_LANE_INDEX: usize = 6;
pub const CTX_ROAD_HEADING: usize = 7;
pub const CONTEXT_FIELDS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    LaneKeep,
    LeftChange,
    RightChange,
    CutIn,
    DenseMerge,
    Mixed,
}

impl Profile {
    pub const NAMES: [&'static str; 6] = ["lane-keep", "left-LC", "right-LC", "cut-in", "dense-merge", "mixed"];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "lane-keep" => Profile::LaneKeep,
            "left-LC" => Profile::LeftChange,
            "right-LC" => Profile::RightChange,
            "cut-in" => Profile::CutIn,
            "dense-merge" => Profile::DenseMerge,
            "mixed" => Profile::Mixed,
            other => {
                return Err(CoreError::Config(format!(
                    "unknown profile `{other}`; valid profiles: {}",
                    Profile::NAMES.join(", ")
                )))
            }
        })
    }
}

/// Road descriptor for an agent at world lateral position `y` (lane 0 centred on 0).
pub fn road_context(y: f64, cfg: &DataConfig) -> Vec<f64> {
    let w = cfg.lane_width;
    let lane = (y / w).round().clamp(0.0, (cfg.lanes - 1) as f64);
    let mut c = vec![0.0; cfg.context_len];
    c[CTX_LANE_OFFSET] = y - lane * w;
    c[CTX_LANE_WIDTH] = w;
    c[CTX_DIST_LEFT] = (cfg.lanes as f64 - 0.5) * w - y;
    c[CTX_DIST_RIGHT] = y + 0.5 * w;
    c[CTX_SPEED_LIMIT] = cfg.speed_limit;
    c[CTX_LANES] = cfg.lanes as f64;
    c[CTX_LANE_INDEX] = lane;
    c[CTX_ROAD_HEADING] = 0.0;
    c
}

/// Smooth 0→1 lateral blend with zero velocity and acceleration at both ends.
pub fn quintic(tau: f64) -> (f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    if tau <= 0.0 || tau >= 1.0 {
        return (t, 0.0);
    }
    let p = 10.0 * t.powi(3) - 15.0 * t.powi(4) + 6.0 * t.powi(5);
    let dp = 30.0 * t.powi(2) - 60.0 * t.powi(3) + 30.0 * t.powi(4);
    (p, dp)
}

/// Closed-form kinematics of one agent in the world frame.
#[derive(Clone, Debug)]
struct Track {
    id: u32,
    agent_type: u8,
    x0: f64,
    v0: f64,
    accel: f64,
    y0: f64,
    /// Lane change: (signed lateral shift, start time, duration).
    change: Option<(f64, f64, f64)>,
    /// Small lateral sway: (amplitude, angular frequency, phase).
    sway: (f64, f64, f64),
}

impl Track {
    fn state(&self, t: f64) -> AgentState {
        let vx = (self.v0 + self.accel * t).max(0.0);
        let x = if self.v0 + self.accel * t >= 0.0 {
            self.x0 + self.v0 * t + 0.5 * self.accel * t * t
        } else {
            let ts = -self.v0 / self.accel;
            self.x0 + self.v0 * ts + 0.5 * self.accel * ts * ts
        };
        let (amp, w, ph) = self.sway;
        let mut y = self.y0 + amp * (w * t + ph).sin();
        let mut vy = amp * w * (w * t + ph).cos();
        if let Some((shift, ts, dur)) = self.change {
            let (p, dp) = quintic((t - ts) / dur);
            y += shift * p;
            vy += shift * dp / dur;
        }
        let v = (vx * vx + vy * vy).sqrt();
        let theta = if v > 1e-9 { wrap_angle(vy.atan2(vx)) } else { 0.0 };
        AgentState { x, y, v, theta, a: if vx > 0.0 { self.accel } else { 0.0 }, agent_type: self.agent_type }
    }

    fn pos(&self, t: f64) -> [f64; 2] {
        let s = self.state(t);
        [s.x, s.y]
    }
}

struct Generator<'a> {
    cfg: &'a DataConfig,
    rng: ChaCha8Rng,
}

const MIN_SEPARATION: f64 = 3.0;

impl Generator<'_> {
    fn lane_y(&self, lane: usize) -> f64 {
        lane as f64 * self.cfg.lane_width
    }

    fn agent_type(&mut self) -> u8 {
        let u: f64 = self.rng.gen();
        if u < 0.8 {
            0
        } else if u < 0.95 {
            1
        } else {
            2
        }
    }

    fn times(&self) -> Vec<f64> {
        let (th, tf, dt) = (self.cfg.t_h as i64, self.cfg.t_f as i64, self.cfg.dt);
        // Half-step grid over the whole window for separation checks.
        (-(th - 1) * 2..=tf * 2).map(|k| k as f64 * dt * 0.5).collect()
    }

    fn separated(&self, a: &Track, others: &[Track], times: &[f64]) -> bool {
        others.iter().all(|o| {
            times.iter().all(|&t| {
                let (p, q) = (a.pos(t), o.pos(t));
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= MIN_SEPARATION
            })
        })
    }

    fn ego(&mut self, profile: Profile) -> (Track, Maneuver) {
        let horizon = self.cfg.horizon_s();
        let lanes = self.cfg.lanes;
        let w = self.cfg.lane_width;
        let sway = (self.rng.gen_range(0.0..0.08), self.rng.gen_range(0.2..0.6), self.rng.gen_range(0.0..2.0 * PI));
        let lc = |g: &mut Self, shift: f64| {
            let dur = g.rng.gen_range(0.6..0.8) * horizon;
            let ts = g.rng.gen_range(0.0..(horizon - dur));
            Some((shift, ts, dur))
        };
        match profile {
            Profile::LaneKeep | Profile::CutIn => {
                let lane = self.rng.gen_range(0..lanes);
                let accel = if profile == Profile::CutIn { self.rng.gen_range(-1.5..-0.5) } else { self.rng.gen_range(-0.4..0.4) };
                let t = Track {
                    id: EGO_ID,
                    agent_type: 0,
                    x0: 0.0,
                    v0: self.rng.gen_range(20.0..30.0),
                    accel,
                    y0: self.lane_y(lane),
                    change: None,
                    sway,
                };
                (t, Maneuver::LaneKeep)
            }
            Profile::LeftChange | Profile::RightChange => {
                let left = profile == Profile::LeftChange;
                let lane = if lanes == 1 {
                    0
                } else if left {
                    self.rng.gen_range(0..lanes - 1)
                } else {
                    self.rng.gen_range(1..lanes)
                };
                let change = lc(self, if left { w } else { -w });
                let t = Track {
                    id: EGO_ID,
                    agent_type: 0,
                    x0: 0.0,
                    v0: self.rng.gen_range(20.0..30.0),
                    accel: self.rng.gen_range(-0.3..0.3),
                    y0: self.lane_y(lane),
                    change,
                    sway: (0.0, 0.0, 0.0),
                };
                (t, if left { Maneuver::LeftChange } else { Maneuver::RightChange })
            }
            Profile::DenseMerge => {
                let change = lc(self, w);
                let t = Track {
                    id: EGO_ID,
                    agent_type: 0,
                    x0: 0.0,
                    v0: self.rng.gen_range(12.0..18.0),
                    accel: self.rng.gen_range(-0.3..0.3),
                    y0: self.lane_y(0),
                    change,
                    sway: (0.0, 0.0, 0.0),
                };
                (t, Maneuver::LeftChange)
            }
            Profile::Mixed => unreachable!("mixed is resolved per scenario"),
        }
    }

    fn neighbor(&mut self, id: u32, ego: &Track, dense: bool) -> Track {
        let lanes = self.cfg.lanes;
        let horizon = self.cfg.horizon_s();
        let hist = (self.cfg.t_h - 1) as f64 * self.cfg.dt;
        let lane = if dense && lanes > 1 { self.rng.gen_range(1..lanes) } else { self.rng.gen_range(0..lanes) };
        let spread = if dense { 60.0 } else { 45.0 };
        let dv = if dense { 2.0 } else { 4.0 };
        let change = if lanes > 1 && self.rng.gen_bool(0.15) {
            let up = lane + 1 < lanes && (lane == 0 || self.rng.gen_bool(0.5));
            let shift = if up { self.cfg.lane_width } else { -self.cfg.lane_width };
            let dur = self.rng.gen_range(2.5..4.0);
            Some((shift, self.rng.gen_range(-hist..horizon - 1.0), dur))
        } else {
            None
        };
        Track {
            id,
            agent_type: self.agent_type(),
            x0: self.rng.gen_range(-spread..spread),
            v0: (ego.v0 + self.rng.gen_range(-dv..dv)).max(2.0),
            accel: self.rng.gen_range(-0.3..0.3),
            y0: self.lane_y(lane),
            change,
            sway: (self.rng.gen_range(0.0..0.1), self.rng.gen_range(0.2..0.6), self.rng.gen_range(0.0..2.0 * PI)),
        }
    }

    fn cut_in(&mut self, ego: &Track) -> Option<Track> {
        let ego_lane = (ego.y0 / self.cfg.lane_width).round() as usize;
        let mut sides = vec![];
        if ego_lane + 1 < self.cfg.lanes {
            sides.push(ego_lane + 1);
        }
        if ego_lane > 0 {
            sides.push(ego_lane - 1);
        }
        if sides.is_empty() {
            return None;
        }
        let lane = sides[self.rng.gen_range(0..sides.len())];
        let shift = ego.y0 - self.lane_y(lane);
        Some(Track {
            id: 1,
            agent_type: 0,
            x0: self.rng.gen_range(10.0..20.0),
            v0: ego.v0 + self.rng.gen_range(-1.0..1.0),
            accel: 0.0,
            y0: self.lane_y(lane),
            change: Some((shift, self.rng.gen_range(-0.5..1.0), self.rng.gen_range(2.0..3.0))),
            sway: (0.0, 0.0, 0.0),
        })
    }

    fn scenario(&mut self, profile: Profile, seed: u64) -> Scenario {
        let profile = if profile == Profile::Mixed {
            [Profile::LaneKeep, Profile::LeftChange, Profile::RightChange, Profile::CutIn, Profile::DenseMerge]
                [self.rng.gen_range(0..5)]
        } else {
            profile
        };
        let (ego, label) = self.ego(profile);
        let times = self.times();
        let dense = profile == Profile::DenseMerge;
        let max_nb = self.cfg.n_max.saturating_sub(1);
        let target = if dense {
            self.rng.gen_range(max_nb.min(12)..=max_nb)
        } else {
            self.rng.gen_range(max_nb.min(3)..=max_nb.min(8))
        };
        let mut tracks = vec![ego.clone()];
        if profile == Profile::CutIn {
            if let Some(c) = self.cut_in(&ego) {
                if self.separated(&c, &tracks, &times) {
                    tracks.push(c);
                }
            }
        }
        let mut attempts = 0;
        while tracks.len() - 1 < target && attempts < 60 * target.max(1) {
            attempts += 1;
            let nb = self.neighbor(tracks.len() as u32, &ego, dense);
            if self.separated(&nb, &tracks, &times) {
                tracks.push(nb);
            }
        }

        let noise = Normal::new(0.0, self.cfg.obs_noise.max(0.0)).expect("finite std-dev");
        let origin = ego.state(0.0);
        let (ox, oy) = (origin.x, origin.y);
        let dt = self.cfg.dt;
        let mut scenes = Vec::with_capacity(self.cfg.t_h);
        for k in 0..self.cfg.t_h {
            let t = (k as f64 - (self.cfg.t_h - 1) as f64) * dt;
            let mut states: Vec<(u32, AgentState)> = tracks
                .iter()
                .map(|tr| {
                    let mut s = tr.state(t);
                    if self.cfg.obs_noise > 0.0 {
                        s.x += noise.sample(&mut self.rng);
                        s.y += noise.sample(&mut self.rng);
                    }
                    (tr.id, s)
                })
                .collect();
            let ego_world = ego.state(t);
            let context = road_context(ego_world.y, self.cfg);
            for (_, s) in states.iter_mut() {
                s.x -= ox;
                s.y -= oy;
            }
            let (_, ego_state) = states.remove(0);
            scenes.push(Scene { ego: ego_state, neighbors: states, context });
        }
        // The ego sits exactly at the origin at the last observed step.
        let last = scenes.last_mut().expect("t_h >= 2");
        last.ego.x = 0.0;
        last.ego.y = 0.0;
        let futures = tracks
            .iter()
            .map(|tr| AgentFuture {
                id: tr.id,
                traj: (1..=self.cfg.t_f)
                    .map(|j| {
                        let p = tr.pos(j as f64 * dt);
                        [p[0] - ox, p[1] - oy]
                    })
                    .collect(),
            })
            .collect();
        Scenario { window: ObservationWindow { scenes, dt }, futures, label, forecast: None, seed }
    }
}

/// Deterministic synthetic scenarios for `profile`.
pub fn generate_synthetic(seed: u64, count: usize, profile: &str, cfg: &DataConfig) -> Result<ScenarioSet> {
    let profile = Profile::parse(profile)?;
    if count == 0 {
        return Err(CoreError::Config("count must be at least 1".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = (0..count)
        .map(|_| {
            let s = master.next_u64();
            let mut g = Generator { cfg, rng: ChaCha8Rng::seed_from_u64(s) };
            g.scenario(profile, s)
        })
        .collect();
    Ok(ScenarioSet { scenarios, seed: Some(seed) })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: u32,
    #[serde(flatten)]
    state: AgentState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRecord {
    obs: Vec<Vec<AgentRecord>>,
    context: Vec<Vec<f64>>,
    future: Vec<AgentFuture>,
    label: Maneuver,
    dt: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forecast: Option<MultimodalForecast>,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            obs: s
                .window
                .scenes
                .iter()
                .map(|sc| {
                    std::iter::once(AgentRecord { id: EGO_ID, state: sc.ego })
                        .chain(sc.neighbors.iter().map(|(id, st)| AgentRecord { id: *id, state: *st }))
                        .collect()
                })
                .collect(),
            context: s.window.scenes.iter().map(|sc| sc.context.clone()).collect(),
            future: s.futures.clone(),
            label: s.label,
            dt: s.window.dt,
            seed: s.seed,
            forecast: s.forecast.clone(),
        }
    }
}

impl ScenarioRecord {
    fn into_scenario(self) -> Result<Scenario> {
        let field = |f: &str, m: String| CoreError::Validation { field: f.into(), msg: m };
        if self.context.len() != self.obs.len() {
            return Err(field("context", format!("{} steps but obs has {}", self.context.len(), self.obs.len())));
        }
        let mut scenes = Vec::with_capacity(self.obs.len());
        for (t, (agents, context)) in self.obs.into_iter().zip(self.context).enumerate() {
            let mut it = agents.into_iter();
            let ego = match it.next() {
                Some(r) if r.id == EGO_ID => r.state,
                _ => return Err(field("obs.id", format!("step {t}: first record must be the ego (id {EGO_ID})"))),
            };
            let neighbors = it.map(|r| (r.id, r.state)).collect();
            scenes.push(Scene { ego, neighbors, context });
        }
        Ok(Scenario {
            window: ObservationWindow { scenes, dt: self.dt },
            futures: self.future,
            label: self.label,
            forecast: self.forecast,
            seed: self.seed,
        })
    }
}

pub fn scenario_to_json(s: &Scenario) -> Result<String> {
    Ok(serde_json::to_string(&ScenarioRecord::from(s))?)
}

pub fn write_scenarios<W: Write>(set: &ScenarioSet, mut w: W) -> Result<()> {
    for s in &set.scenarios {
        writeln!(w, "{}", scenario_to_json(s)?)?;
    }
    Ok(())
}

pub fn save_scenarios(set: &ScenarioSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_scenarios(set, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

pub fn read_scenarios<R: BufRead>(r: R, cfg: &DataConfig) -> Result<ScenarioSet> {
    let mut scenarios = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScenarioRecord =
            serde_json::from_str(&line).map_err(|e| CoreError::Parse { line: i + 1, msg: e.to_string() })?;
        let s = rec.into_scenario()?;
        s.validate(cfg)?;
        scenarios.push(s);
    }
    Ok(ScenarioSet { scenarios, seed: None })
}

pub fn load_scenarios(path: &Path, cfg: &DataConfig) -> Result<ScenarioSet> {
    let f = std::fs::File::open(path)?;
    read_scenarios(BufReader::new(f), cfg)
}

/// Fixed-shape view of one scenario.
#[derive(Clone, Debug)]
pub struct Sample {
    pub t_h: usize,
    pub n: usize,
    /// `[t_h, n, feature_dim]`, zeros on masked slots.
    pub feats: autodiff::Tensor,
    /// `valid[t * n + i]`.
    pub valid: Vec<bool>,
    /// Raw positions, `pos[t * n + i]`.
    pub pos: Vec<[f64; 2]>,
    pub anchor: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    /// `[n][t_f]` ground-truth positions; empty when the slot has no future.
    pub future: Vec<Vec<[f64; 2]>>,
    pub ids: Vec<Option<u32>>,
    pub label: Maneuver,
}

impl Sample {
    pub fn is_valid(&self, t: usize, i: usize) -> bool {
        self.valid[t * self.n + i]
    }

    pub fn valid_last(&self) -> Vec<bool> {
        (0..self.n).map(|i| self.is_valid(self.t_h - 1, i)).collect()
    }

    pub fn num_valid_last(&self) -> usize {
        self.valid_last().iter().filter(|v| **v).count()
    }

    /// Slots with a ground-truth future and a valid last observation.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.is_valid(self.t_h - 1, i) && !self.future[i].is_empty()).collect()
    }
}

const BEARING_SECTORS: f64 = 8.0;

/// Slot order: ego first, then the `n_max - 1` nearest neighbours present at
/// the last step, sorted by bearing sector and then distance.
pub fn slot_order(last: &Scene, n_max: usize) -> Vec<u32> {
    let (ex, ey) = (last.ego.x, last.ego.y);
    let mut nb: Vec<(u32, f64, f64)> = last
        .neighbors
        .iter()
        .map(|(id, s)| {
            let (dx, dy) = (s.x - ex, s.y - ey);
            (*id, (dx * dx + dy * dy).sqrt(), dy.atan2(dx))
        })
        .collect();
    nb.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    nb.truncate(n_max.saturating_sub(1));
    let sector = |bearing: f64| ((bearing + PI) / (2.0 * PI) * BEARING_SECTORS).floor().min(BEARING_SECTORS - 1.0) as i64;
    nb.sort_by(|a, b| sector(a.2).cmp(&sector(b.2)).then(a.1.total_cmp(&b.1)).then(a.0.cmp(&b.0)));
    std::iter::once(EGO_ID).chain(nb.into_iter().map(|x| x.0)).collect()
}

pub fn agent_features(s: &AgentState, context: &[f64], out: &mut [f64]) {
    let [vx, vy] = s.velocity();
    out[0] = s.x / 10.0;
    out[1] = s.y / 10.0;
    out[2] = vx / 10.0;
    out[3] = vy / 10.0;
    out[4] = s.a / 3.0;
    for k in 0..NUM_AGENT_TYPES {
        out[5 + k] = if s.agent_type as usize == k { 1.0 } else { 0.0 };
    }
    for (o, c) in out[STATE_FEATURES..].iter_mut().zip(context) {
        *o = c / 10.0;
    }
}

pub fn tensorize(s: &Scenario, cfg: &DataConfig) -> Sample {
    let (t_h, n) = (s.window.scenes.len(), cfg.n_max);
    let order = slot_order(s.last(), n);
    let d = cfg.feature_dim();
    let mut feats = vec![0.0; t_h * n * d];
    let mut valid = vec![false; t_h * n];
    let mut pos = vec![[0.0; 2]; t_h * n];
    for (t, sc) in s.window.scenes.iter().enumerate() {
        for (slot, id) in order.iter().enumerate() {
            let st = if *id == EGO_ID { Some(&sc.ego) } else { sc.neighbors.iter().find(|(i, _)| i == id).map(|(_, a)| a) };
            if let Some(st) = st {
                let at = t * n + slot;
                valid[at] = true;
                pos[at] = [st.x, st.y];
                agent_features(st, &sc.context, &mut feats[at * d..(at + 1) * d]);
            }
        }
    }
    let last = s.last();
    let mut anchor = vec![[0.0; 2]; n];
    let mut vel = vec![[0.0; 2]; n];
    let mut future = vec![Vec::new(); n];
    let mut ids = vec![None; n];
    for (slot, id) in order.iter().enumerate() {
        let st = if *id == EGO_ID { &last.ego } else { &last.neighbors.iter().find(|(i, _)| i == id).expect("ordered from last step").1 };
        anchor[slot] = [st.x, st.y];
        vel[slot] = st.velocity();
        ids[slot] = Some(*id);
        if let Some(f) = s.future_of(*id) {
            future[slot] = f.to_vec();
        }
    }
    Sample {
        t_h,
        n,
        feats: autodiff::Tensor::new(vec![t_h, n, d], feats).expect("consistent shape"),
        valid,
        pos,
        anchor,
        vel,
        future,
        ids,
        label: s.label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig::default()
    }

    #[test]
    fn lane_keep_heading_is_small() {
        let set = generate_synthetic(7, 10, "lane-keep", &cfg()).unwrap();
        assert_eq!(set.len(), 10);
        for s in &set.scenarios {
            for sc in &s.window.scenes {
                assert!(sc.ego.theta.abs() <= 0.02, "heading {}", sc.ego.theta);
            }
        }
    }

    #[test]
    fn left_change_ends_one_lane_over() {
        let c = cfg();
        let set = generate_synthetic(7, 1, "left-LC", &c).unwrap();
        let s = &set.scenarios[0];
        let end = s.ego_future().last().unwrap();
        assert!((end[1] - c.lane_width).abs() < 1e-9, "lateral {}", end[1]);
        assert_eq!(s.label, Maneuver::LeftChange);
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = cfg();
        let a = generate_synthetic(3, 5, "mixed", &c).unwrap();
        let b = generate_synthetic(3, 5, "mixed", &c).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_scenarios(&a, &mut x).unwrap();
        write_scenarios(&b, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn unknown_profile_names_valid_ones() {
        let err = generate_synthetic(1, 1, "zigzag", &cfg()).unwrap_err();
        assert!(err.to_string().contains("dense-merge"));
    }

    #[test]
    fn quintic_endpoints() {
        assert_eq!(quintic(0.0), (0.0, 0.0));
        assert_eq!(quintic(1.0), (1.0, 0.0));
        assert!((quintic(0.5).0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn slot_order_puts_ego_first_and_truncates() {
        let set = generate_synthetic(11, 1, "dense-merge", &cfg()).unwrap();
        let order = slot_order(set.scenarios[0].last(), 5);
        assert_eq!(order.len(), 5.min(1 + set.scenarios[0].last().neighbors.len()));
        assert_eq!(order[0], EGO_ID);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }
}
