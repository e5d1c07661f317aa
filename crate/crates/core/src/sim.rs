//! Closed-loop replay environment: kinematic bicycle ego, replayed
//! neighbours, the safety / comfort / efficiency reward, and rollout metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, CoreError, Result};
use crate::scene::{
    quintic, road_context, tensorize, AgentFuture, AgentState, DataConfig, Maneuver, ObservationWindow, Sample, Scenario,
    ScenarioSet, Scene, CTX_DIST_RIGHT, EGO_ID,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

/// Physical control: longitudinal acceleration (m/s^2) and steering angle (rad).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub steer: f64,
}

impl Action {
    pub fn clamped(self, cfg: &SimConfig) -> Self {
        Self { accel: self.accel.clamp(-cfg.max_accel, cfg.max_accel), steer: self.steer.clamp(-cfg.max_steer, cfg.max_steer) }
    }

    /// Maps a normalized policy output onto a clamped physical action.
    pub fn from_normalized(u: [f64; 2], cfg: &SimConfig) -> Self {
        Self { accel: u[0] * cfg.accel_scale, steer: u[1] * cfg.steer_scale }.clamped(cfg)
    }

    pub fn to_normalized(self, cfg: &SimConfig) -> [f64; 2] {
        [self.accel / cfg.accel_scale, self.steer / cfg.steer_scale]
    }
}

pub fn step_bicycle(s: BicycleState, a: Action, dt: f64, wheelbase: f64) -> BicycleState {
    BicycleState {
        x: s.x + s.v * s.theta.cos() * dt,
        y: s.y + s.v * s.theta.sin() * dt,
        theta: s.theta + s.v / wheelbase * a.steer.tan() * dt,
        v: (s.v + a.accel * dt).max(0.0),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_safety: f64,
    pub w_comfort: f64,
    pub w_efficiency: f64,
    pub d_safe: f64,
    pub a_max: f64,
    pub lambda_viol: f64,
    pub mu: f64,
    pub nu: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_safety: 0.5, w_comfort: 0.3, w_efficiency: 0.2, d_safe: 4.0, a_max: 3.0, lambda_viol: 2.0, mu: 1.0, nu: 0.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub wheelbase: f64,
    pub max_accel: f64,
    pub max_steer: f64,
    /// Physical units per unit of normalized policy output.
    pub accel_scale: f64,
    pub steer_scale: f64,
    /// Policy decisions per episode.
    pub horizon: usize,
    pub collision_distance: f64,
    pub offroad_margin: f64,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            wheelbase: 2.7,
            max_accel: 5.0,
            max_steer: 0.5,
            accel_scale: 3.0,
            steer_scale: 0.1,
            horizon: 25,
            collision_distance: 1.0,
            offroad_margin: 0.5,
            reward: RewardConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self, data: &DataConfig) -> Result<()> {
        if !(self.dt > 0.0) || !(self.wheelbase > 0.0) {
            return Err(CoreError::Config("sim.dt and sim.wheelbase must be positive".into()));
        }
        let r = &self.reward;
        if [r.w_safety, r.w_comfort, r.w_efficiency].iter().any(|w| !(*w >= 0.0)) {
            return Err(CoreError::Config("sim.reward: weights must be non-negative".into()));
        }
        let k = data.dt / self.dt;
        if (k - k.round()).abs() > 1e-9 || k < 1.0 {
            return Err(CoreError::Config(format!("sim.dt {} must divide the data step {}", self.dt, data.dt)));
        }
        Ok(())
    }

    pub fn substeps(&self, data: &DataConfig) -> usize {
        (data.dt / self.dt).round() as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub safety: f64,
    pub comfort: f64,
    pub efficiency: f64,
    pub total: f64,
}

/// Weighted three-term reward. `d_min` is `None` without neighbours.
#[allow(clippy::too_many_arguments)]
pub fn reward(
    s: &BicycleState,
    a: &Action,
    prev: &Action,
    d_min: Option<f64>,
    violation: bool,
    theta_target: f64,
    dt: f64,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let viol = if violation { cfg.lambda_viol } else { 0.0 };
    let safety = d_min.map_or(0.0, |d| -(-d / cfg.d_safe).exp()) - viol;
    let da = (a.accel - prev.accel).powi(2) + (a.steer - prev.steer).powi(2);
    let comfort = -da - cfg.mu * (a.accel.abs() - cfg.a_max).max(0.0);
    let efficiency = s.v * (s.theta - theta_target).cos() - cfg.nu * dt;
    let total = cfg.w_safety * safety + cfg.w_comfort * comfort + cfg.w_efficiency * efficiency;
    RewardBreakdown { safety, comfort, efficiency, total }
}

/// Piecewise-linear replay of one neighbour from its last observation through its future.
#[derive(Clone, Debug)]
struct ReplayTrack {
    id: u32,
    agent_type: u8,
    points: Vec<[f64; 2]>,
    step: f64,
}

impl ReplayTrack {
    fn segment(&self, t: f64) -> (usize, f64) {
        let u = (t / self.step).max(0.0);
        let last = self.points.len() - 2;
        let k = (u.floor() as usize).min(last);
        (k, u - k as f64)
    }

    fn seg_vel(&self, k: usize) -> [f64; 2] {
        let (p, q) = (self.points[k], self.points[k + 1]);
        [(q[0] - p[0]) / self.step, (q[1] - p[1]) / self.step]
    }

    fn pos(&self, t: f64) -> [f64; 2] {
        let (k, f) = self.segment(t);
        let v = self.seg_vel(k);
        let p = self.points[k];
        [p[0] + v[0] * f * self.step, p[1] + v[1] * f * self.step]
    }

    fn state(&self, t: f64) -> AgentState {
        let (k, _) = self.segment(t);
        let v = self.seg_vel(k);
        let speed = v[0].hypot(v[1]);
        let a = if k > 0 {
            let pv = self.seg_vel(k - 1);
            (speed - pv[0].hypot(pv[1])) / self.step
        } else {
            0.0
        };
        let p = self.pos(t);
        AgentState { x: p[0], y: p[1], v: speed, theta: if speed > 1e-9 { v[1].atan2(v[0]) } else { 0.0 }, a, agent_type: self.agent_type }
    }

    fn velocity(&self, t: f64) -> [f64; 2] {
        self.seg_vel(self.segment(t).0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Collision,
    OffRoad,
}

/// Kinematics of every agent at one decision step, scenario frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Snapshot {
    /// `[x, y, vx, vy]`.
    pub ego: [f64; 4],
    pub neighbors: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition {
    pub state: BicycleState,
    /// Normalized policy output.
    pub action: [f64; 2],
    pub applied: Action,
    pub reward: f64,
    pub components: RewardBreakdown,
    pub value: f64,
    pub log_prob: f64,
    pub done: bool,
    pub snapshot: Snapshot,
    #[serde(skip)]
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpisodeRollout {
    pub steps: Vec<Transition>,
    pub termination: Option<Termination>,
    /// Value of the state after the last step (bootstrap for truncated episodes).
    pub last_value: f64,
}

impl EpisodeRollout {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

pub struct Decision {
    pub action: [f64; 2],
    pub log_prob: f64,
    pub value: f64,
    pub features: Vec<f64>,
}

pub trait Policy {
    fn decide(&self, obs: &Sample, rng: &mut ChaCha8Rng) -> Result<Decision>;
    /// Value of an observation without acting.
    fn value(&self, obs: &Sample) -> Result<f64>;
}

/// Always outputs the zero action.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn decide(&self, _: &Sample, _: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision { action: [0.0, 0.0], log_prob: 0.0, value: 0.0, features: Vec::new() })
    }

    fn value(&self, _: &Sample) -> Result<f64> {
        Ok(0.0)
    }
}

/// A fixed normalized action every step.
pub struct ConstantPolicy(pub [f64; 2]);

impl Policy for ConstantPolicy {
    fn decide(&self, _: &Sample, _: &mut ChaCha8Rng) -> Result<Decision> {
        Ok(Decision { action: self.0, log_prob: 0.0, value: 0.0, features: Vec::new() })
    }

    fn value(&self, _: &Sample) -> Result<f64> {
        Ok(0.0)
    }
}

pub struct Env<'a> {
    pub cfg: &'a SimConfig,
    pub data: &'a DataConfig,
    scenario: &'a Scenario,
    tracks: Vec<ReplayTrack>,
    history: Vec<Scene>,
    /// World lateral position of the scenario frame's origin.
    lateral_origin: f64,
    edges: (f64, f64),
    pub ego: BicycleState,
    prev: Action,
    ego_accel: f64,
    /// Elapsed time since the last observation.
    pub time: f64,
    pub steps: usize,
    pub done: Option<Termination>,
}

impl<'a> Env<'a> {
    pub fn new(scenario: &'a Scenario, cfg: &'a SimConfig, data: &'a DataConfig) -> Self {
        let last = scenario.last();
        let tracks = last
            .neighbors
            .iter()
            .filter_map(|(id, s)| {
                let fut = scenario.future_of(*id)?;
                let mut points = vec![[s.x, s.y]];
                points.extend_from_slice(fut);
                Some(ReplayTrack { id: *id, agent_type: s.agent_type, points, step: data.dt })
            })
            .collect();
        let w = data.lane_width;
        let lateral_origin = last.context[CTX_DIST_RIGHT] - 0.5 * w - last.ego.y;
        let e = &last.ego;
        Self {
            cfg,
            data,
            scenario,
            tracks,
            history: scenario.window.scenes.clone(),
            lateral_origin,
            edges: scenario.road_edges(),
            ego: BicycleState { x: e.x, y: e.y, theta: e.theta, v: e.v },
            prev: Action::default(),
            ego_accel: e.a,
            time: 0.0,
            steps: 0,
            done: None,
        }
    }

    pub fn neighbor_positions(&self, t: f64) -> Vec<[f64; 2]> {
        self.tracks.iter().map(|tr| tr.pos(t)).collect()
    }

    fn d_min_at(&self, ego: [f64; 2], t: f64) -> Option<f64> {
        self.tracks
            .iter()
            .map(|tr| {
                let p = tr.pos(t);
                (p[0] - ego[0]).hypot(p[1] - ego[1])
            })
            .min_by(f64::total_cmp)
    }

    pub fn snapshot(&self) -> Snapshot {
        let e = &self.ego;
        Snapshot {
            ego: [e.x, e.y, e.v * e.theta.cos(), e.v * e.theta.sin()],
            neighbors: self
                .tracks
                .iter()
                .map(|tr| {
                    let p = tr.pos(self.time);
                    let v = tr.velocity(self.time);
                    [p[0], p[1], v[0], v[1]]
                })
                .collect(),
        }
    }

    fn offroad(&self, y: f64) -> bool {
        y < self.edges.0 - self.cfg.offroad_margin || y > self.edges.1 + self.cfg.offroad_margin
    }

    /// Observation window ending now, re-centred on the ego.
    pub fn observation(&self) -> Sample {
        let t_h = self.data.t_h;
        let scenes = &self.history[self.history.len() - t_h..];
        let (ox, oy) = (self.ego.x, self.ego.y);
        let scenes = scenes
            .iter()
            .map(|sc| {
                let shift = |s: &AgentState| AgentState { x: s.x - ox, y: s.y - oy, ..s.clone() };
                Scene {
                    ego: shift(&sc.ego),
                    neighbors: sc.neighbors.iter().map(|(id, s)| (*id, shift(s))).collect(),
                    context: sc.context.clone(),
                }
            })
            .collect();
        let sc = Scenario {
            window: ObservationWindow { scenes, dt: self.data.dt },
            futures: Vec::new(),
            label: self.scenario.label,
            forecast: None,
            seed: self.scenario.seed,
        };
        tensorize(&sc, self.data)
    }

    fn record_scene(&mut self) {
        let e = &self.ego;
        let ego = AgentState { x: e.x, y: e.y, v: e.v, theta: e.theta, a: self.ego_accel, agent_type: 0 };
        let neighbors = self.tracks.iter().map(|tr| (tr.id, tr.state(self.time))).collect();
        let context = road_context(e.y + self.lateral_origin, self.data);
        self.history.push(Scene { ego, neighbors, context });
    }

    /// Applies a normalized action for one decision period.
    pub fn step(&mut self, u: [f64; 2]) -> Result<(RewardBreakdown, Option<Termination>)> {
        if self.done.is_some() {
            return Err(contract("step on a finished episode"));
        }
        let a = Action::from_normalized(u, self.cfg);
        let sub = self.cfg.substeps(self.data);
        let mut term = None;
        let mut d_min = None;
        for _ in 0..sub {
            let prev = self.ego;
            self.ego = step_bicycle(self.ego, a, self.cfg.dt, self.cfg.wheelbase);
            self.time += self.cfg.dt;
            d_min = self.d_min_at([self.ego.x, self.ego.y], self.time);
            if self.segment_collides(prev, self.time - self.cfg.dt) {
                term = Some(Termination::Collision);
                break;
            }
            if self.offroad(self.ego.y) {
                term = Some(Termination::OffRoad);
                break;
            }
        }
        self.finish_step(a, d_min, term)
    }

    /// Places the ego on `p` (scenario frame) after one decision period; used
    /// to replay a recorded trajectory.
    pub fn step_to(&mut self, p: [f64; 2]) -> Result<(RewardBreakdown, Option<Termination>)> {
        let (dx, dy) = (p[0] - self.ego.x, p[1] - self.ego.y);
        let v = dx.hypot(dy) / self.data.dt;
        let a = Action { accel: (v - self.ego.v) / self.data.dt, steer: 0.0 };
        let prev = self.ego;
        self.ego = BicycleState { x: p[0], y: p[1], theta: if v > 1e-9 { dy.atan2(dx) } else { self.ego.theta }, v };
        let start = self.time;
        self.time += self.data.dt;
        let mut term = None;
        if self.segment_collides_between(prev, start, self.data.dt) {
            term = Some(Termination::Collision);
        } else if self.offroad(p[1]) {
            term = Some(Termination::OffRoad);
        }
        let d_min = self.d_min_at(p, self.time);
        self.finish_step(a, d_min, term)
    }

    fn finish_step(&mut self, a: Action, d_min: Option<f64>, term: Option<Termination>) -> Result<(RewardBreakdown, Option<Termination>)> {
        let r = reward(&self.ego, &a, &self.prev, d_min, term.is_some(), 0.0, self.data.dt, &self.cfg.reward);
        self.prev = a;
        self.ego_accel = a.accel;
        self.steps += 1;
        self.done = term;
        self.record_scene();
        Ok((r, term))
    }

    fn segment_collides(&self, prev: BicycleState, t0: f64) -> bool {
        self.segment_collides_between(prev, t0, self.cfg.dt)
    }

    /// Closest approach between the ego's and each neighbour's straight
    /// motion over `[t0, t0 + dt]`.
    fn segment_collides_between(&self, prev: BicycleState, t0: f64, dt: f64) -> bool {
        let e0 = [prev.x, prev.y];
        let e1 = [self.ego.x, self.ego.y];
        self.tracks.iter().any(|tr| {
            let (n0, n1) = (tr.pos(t0), tr.pos(t0 + dt));
            let r0 = [n0[0] - e0[0], n0[1] - e0[1]];
            let dr = [(n1[0] - n0[0]) - (e1[0] - e0[0]), (n1[1] - n0[1]) - (e1[1] - e0[1])];
            let dd = dr[0] * dr[0] + dr[1] * dr[1];
            let s = if dd > 0.0 { (-(r0[0] * dr[0] + r0[1] * dr[1]) / dd).clamp(0.0, 1.0) } else { 0.0 };
            (r0[0] + s * dr[0]).hypot(r0[1] + s * dr[1]) < self.cfg.collision_distance
        })
    }
}

/// Runs one episode of at most `horizon` decisions.
pub fn run_episode(policy: &dyn Policy, scenario: &Scenario, cfg: &SimConfig, data: &DataConfig, seed: u64) -> Result<EpisodeRollout> {
    let mut env = Env::new(scenario, cfg, data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = EpisodeRollout::default();
    for _ in 0..cfg.horizon {
        let obs = env.observation();
        let d = policy.decide(&obs, &mut rng)?;
        let snapshot = env.snapshot();
        let state = env.ego;
        let (r, term) = env.step(d.action)?;
        out.steps.push(Transition {
            state,
            action: d.action,
            applied: Action::from_normalized(d.action, cfg),
            reward: r.total,
            components: r,
            value: d.value,
            log_prob: d.log_prob,
            done: term.is_some(),
            snapshot,
            features: d.features,
        });
        if term.is_some() {
            out.termination = term;
            return Ok(out);
        }
    }
    out.last_value = policy.value(&env.observation())?;
    Ok(out)
}

/// Replays the recorded ego future through the environment.
pub fn replay_recorded(scenario: &Scenario, cfg: &SimConfig, data: &DataConfig) -> Result<EpisodeRollout> {
    let mut env = Env::new(scenario, cfg, data);
    let mut out = EpisodeRollout::default();
    for p in scenario.ego_future().iter().take(cfg.horizon) {
        let snapshot = env.snapshot();
        let state = env.ego;
        let (r, term) = env.step_to(*p)?;
        out.steps.push(Transition {
            state,
            action: [0.0, 0.0],
            applied: Action::default(),
            reward: r.total,
            components: r,
            value: 0.0,
            log_prob: 0.0,
            done: term.is_some(),
            snapshot,
            features: Vec::new(),
        });
        if term.is_some() {
            out.termination = term;
            break;
        }
    }
    Ok(out)
}

/// Reported in place of an infinite time to collision.
pub const TTC_SENTINEL: f64 = f64::INFINITY;

/// Range over closing speed along current velocities; infinite when diverging.
pub fn ttc_pair(ego: [f64; 4], other: [f64; 4]) -> f64 {
    let r = [other[0] - ego[0], other[1] - ego[1]];
    let v = [other[2] - ego[2], other[3] - ego[3]];
    let range = r[0].hypot(r[1]);
    if range == 0.0 {
        return 0.0;
    }
    let closing = -(r[0] * v[0] + r[1] * v[1]) / range;
    if closing > 0.0 {
        range / closing
    } else {
        TTC_SENTINEL
    }
}

/// Per-step minimum TTC and minimum distance over neighbours.
pub fn ttc_and_mindist(rollout: &EpisodeRollout) -> Result<(Vec<f64>, Vec<f64>)> {
    if rollout.steps.is_empty() {
        return Err(contract("empty rollout"));
    }
    Ok(rollout
        .steps
        .iter()
        .map(|s| {
            let e = s.snapshot.ego;
            let ttc = s.snapshot.neighbors.iter().map(|n| ttc_pair(e, *n)).fold(TTC_SENTINEL, f64::min);
            let d = s.snapshot.neighbors.iter().map(|n| (n[0] - e[0]).hypot(n[1] - e[1])).fold(f64::INFINITY, f64::min);
            (ttc, d)
        })
        .unzip())
}

/// Nearest-rank percentile of the finite values; `None` if there are none.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub episodes: usize,
    pub collision_rate: f64,
    pub offroad_rate: f64,
    pub success_rate: f64,
    pub jerk_rms: f64,
    pub ttc_p5: Option<f64>,
    pub ttc_mean: Option<f64>,
    /// Mean undiscounted episode return.
    pub mean_return: f64,
}

impl RolloutSummary {
    pub const CSV_HEADER: &'static str = "episodes,collision_rate,offroad_rate,success_rate,jerk_rms,ttc_p5,ttc_mean,mean_return";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
            self.episodes,
            self.collision_rate,
            self.offroad_rate,
            self.success_rate,
            self.jerk_rms,
            opt(self.ttc_p5),
            opt(self.ttc_mean),
            self.mean_return
        )
    }
}

pub fn summarize(rollouts: &[EpisodeRollout], data_dt: f64) -> Result<RolloutSummary> {
    if rollouts.is_empty() {
        return Err(contract("no rollouts to summarize"));
    }
    let n = rollouts.len() as f64;
    let count = |t: Termination| rollouts.iter().filter(|r| r.termination == Some(t)).count() as f64 / n;
    let mut jerk = Vec::new();
    let mut ttcs = Vec::new();
    for r in rollouts {
        for w in r.steps.windows(2) {
            jerk.push((w[1].applied.accel - w[0].applied.accel) / data_dt);
        }
        if !r.steps.is_empty() {
            ttcs.extend(ttc_and_mindist(r)?.0);
        }
    }
    let finite: Vec<f64> = ttcs.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(RolloutSummary {
        episodes: rollouts.len(),
        collision_rate: count(Termination::Collision),
        offroad_rate: count(Termination::OffRoad),
        success_rate: rollouts.iter().filter(|r| r.termination.is_none()).count() as f64 / n,
        jerk_rms: if jerk.is_empty() { 0.0 } else { (jerk.iter().map(|j| j * j).sum::<f64>() / jerk.len() as f64).sqrt() },
        ttc_p5: percentile(&ttcs, 5.0),
        ttc_mean: if finite.is_empty() { None } else { Some(finite.iter().sum::<f64>() / finite.len() as f64) },
        mean_return: rollouts.iter().map(EpisodeRollout::total_reward).sum::<f64>() / n,
    })
}

/// Closed-form longitudinal motion with an optional braking phase starting at `t = 0`.
#[derive(Clone, Copy)]
struct Longitudinal {
    x0: f64,
    v0: f64,
    decel: f64,
}

impl Longitudinal {
    fn at(&self, t: f64) -> (f64, f64, f64) {
        if t <= 0.0 || self.decel == 0.0 {
            return (self.x0 + self.v0 * t, self.v0, 0.0);
        }
        let stop = self.v0 / self.decel;
        let ts = t.min(stop);
        let x = self.x0 + self.v0 * ts - 0.5 * self.decel * ts * ts;
        let v = self.v0 - self.decel * ts;
        (x, v, if t < stop { -self.decel } else { 0.0 })
    }
}

struct SuiteAgent {
    id: u32,
    lon: Longitudinal,
    y0: f64,
    /// (shift, start, duration).
    change: Option<(f64, f64, f64)>,
}

impl SuiteAgent {
    fn state(&self, t: f64) -> AgentState {
        let (x, vx, a) = self.lon.at(t);
        let (mut y, mut vy) = (self.y0, 0.0);
        if let Some((shift, ts, dur)) = self.change {
            let (p, dp) = quintic((t - ts) / dur);
            y += shift * p;
            vy = shift * dp / dur;
        }
        let v = vx.hypot(vy);
        AgentState { x, y, v, theta: if v > 1e-9 { vy.atan2(vx) } else { 0.0 }, a, agent_type: 0 }
    }
}

/// Scenarios where holding speed ends in a collision: a hard-braking lead
/// (even index) or a braking cut-in from an adjacent lane (odd index).
pub fn near_collision_suite(seed: u64, count: usize, data: &DataConfig) -> Result<ScenarioSet> {
    if count == 0 {
        return Err(CoreError::Config("count must be at least 1".into()));
    }
    if data.lanes < 2 {
        return Err(CoreError::Config("the near-collision suite needs at least two lanes".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let w = data.lane_width;
    let mut scenarios = Vec::with_capacity(count);
    for i in 0..count {
        let s = master.gen::<u64>();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let lane = rng.gen_range(0..data.lanes);
        let v0: f64 = rng.gen_range(20.0..27.0);
        let ego_y = lane as f64 * w;
        let mut agents = Vec::new();
        if i % 2 == 0 {
            agents.push(SuiteAgent {
                id: 1,
                lon: Longitudinal { x0: rng.gen_range(16.0..24.0), v0: v0 - rng.gen_range(0.0..2.0), decel: rng.gen_range(3.5..5.0) },
                y0: ego_y,
                change: None,
            });
        } else {
            let side = if lane == 0 { 1 } else if lane + 1 == data.lanes { -1 } else if rng.gen_bool(0.5) { 1 } else { -1 };
            let y0 = ego_y + side as f64 * w;
            agents.push(SuiteAgent {
                id: 1,
                lon: Longitudinal { x0: rng.gen_range(8.0..14.0), v0: v0 - rng.gen_range(2.0..4.0), decel: rng.gen_range(2.0..3.5) },
                y0,
                change: Some((ego_y - y0, rng.gen_range(-0.6..0.0), rng.gen_range(1.5..2.0))),
            });
        }
        let mut other_lanes: Vec<usize> = (0..data.lanes).filter(|&l| l != lane).collect();
        other_lanes.truncate(2);
        for (k, l) in other_lanes.iter().enumerate() {
            agents.push(SuiteAgent {
                id: 2 + k as u32,
                lon: Longitudinal { x0: rng.gen_range(-40.0..-20.0), v0: v0 + rng.gen_range(-1.0..1.0), decel: 0.0 },
                y0: *l as f64 * w,
                change: None,
            });
        }
        // Recorded ego response: brake hard from the first future step.
        let ego = SuiteAgent { id: EGO_ID, lon: Longitudinal { x0: 0.0, v0, decel: 7.5 }, y0: ego_y, change: None };
        let dt = data.dt;
        let scenes = (0..data.t_h)
            .map(|k| {
                let t = (k as f64 - (data.t_h - 1) as f64) * dt;
                let shift = |mut s: AgentState| {
                    s.y -= ego_y;
                    s
                };
                Scene {
                    ego: shift(ego.state(t)),
                    neighbors: agents.iter().map(|a| (a.id, shift(a.state(t)))).collect(),
                    context: road_context(ego_y, data),
                }
            })
            .collect();
        let futures = std::iter::once(&ego)
            .chain(agents.iter())
            .map(|a| AgentFuture {
                id: a.id,
                traj: (1..=data.t_f)
                    .map(|j| {
                        let st = a.state(j as f64 * dt);
                        [st.x, st.y - ego_y]
                    })
                    .collect(),
            })
            .collect();
        scenarios.push(Scenario {
            window: ObservationWindow { scenes, dt },
            futures,
            label: Maneuver::LaneKeep,
            forecast: None,
            seed: s,
        });
    }
    Ok(ScenarioSet { scenarios, seed: Some(seed) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_motion_and_clamp() {
        let s = BicycleState { x: 0.0, y: 0.0, theta: 0.0, v: 10.0 };
        let n = step_bicycle(s, Action::default(), 0.1, 2.7);
        assert!((n.x - 1.0).abs() < 1e-12 && n.y == 0.0);
        let m = step_bicycle(BicycleState { v: 1.0, ..s }, Action { accel: -20.0, steer: 0.0 }, 0.1, 2.7);
        assert_eq!(m.v, 0.0);
    }

    #[test]
    fn safety_at_d_safe() {
        let r = reward(&BicycleState { x: 0.0, y: 0.0, theta: 0.0, v: 0.0 }, &Action::default(), &Action::default(), Some(4.0), false, 0.0, 0.2, &RewardConfig::default());
        assert!((r.safety + (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(r.comfort, 0.0);
    }

    #[test]
    fn ttc_closing() {
        assert!((ttc_pair([0.0, 0.0, 10.0, 0.0], [40.0, 0.0, 0.0, 0.0]) - 4.0).abs() < 1e-12);
        assert_eq!(ttc_pair([0.0, 0.0, 0.0, 0.0], [40.0, 0.0, 1.0, 0.0]), TTC_SENTINEL);
    }

    #[test]
    fn suite_is_hazardous_when_holding_speed() {
        let data = DataConfig::default();
        let cfg = SimConfig::default();
        let suite = near_collision_suite(3, 8, &data).unwrap();
        let mut hits = 0;
        for (i, sc) in suite.scenarios.iter().enumerate() {
            sc.validate(&data).unwrap();
            let r = run_episode(&ZeroPolicy, sc, &cfg, &data, i as u64).unwrap();
            hits += (r.termination == Some(Termination::Collision)) as usize;
            let brake = run_episode(&ConstantPolicy([-5.0 / 3.0, 0.0]), sc, &cfg, &data, 0).unwrap();
            assert_eq!(brake.termination, None, "scenario {i}");
        }
        assert!(hits >= 6, "{hits}");
    }
}
