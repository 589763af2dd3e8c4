use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::domain::DomainParams;
use super::terrain::{TaskKind, TerrainProfile};
use super::EnvError;

pub const GRAVITY: f64 = 9.81;
/// Horizontal force and leg-extension rate.
pub const ACTION_DIM: usize = 2;
/// vx, vy, leg extension, previous action (2), pitch proxy, command velocity.
pub const PROPRIO_DIM: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub velocity: f64,
    pub lateral: f64,
    pub action: f64,
    pub collision: f64,
    pub sigma: f64,
    pub survival: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            velocity: 1.0,
            lateral: 0.5,
            action: 0.01,
            collision: 5.0,
            sigma: 0.25,
            survival: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BodyConfig {
    pub half_length: f64,
    pub half_height: f64,
    pub leg_min: f64,
    pub leg_max: f64,
    pub leg_nominal: f64,
    /// m/s at full leg action.
    pub leg_rate_max: f64,
    /// N at full force action, before the actuator gain.
    pub force_max: f64,
    /// 1/s, horizontal damping while in contact.
    pub ground_damping: f64,
    /// 1/m, scales the centre-of-mass bias force `offset · m · g · coupling`.
    pub com_coupling: f64,
    /// s, converts excess tangential force into slip speed.
    pub slip_time: f64,
    /// m, how far the ground may drop below the foot before contact is lost.
    pub contact_tolerance: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            half_length: 0.15,
            half_height: 0.05,
            leg_min: 0.1,
            leg_max: 0.4,
            leg_nominal: 0.25,
            leg_rate_max: 2.0,
            force_max: 4.0,
            ground_damping: 1.0,
            com_coupling: 1.0,
            slip_time: 0.1,
            contact_tolerance: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum CommandSpec {
    Fixed(f64),
    Uniform(f64, f64),
}

impl Default for CommandSpec {
    fn default() -> Self {
        CommandSpec::Uniform(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub track_length: f64,
    pub max_steps: usize,
    /// Depth-scan rays; half measure ground, half ceiling.
    pub scan_rays: usize,
    pub scan_spacing: f64,
    pub max_range: f64,
    pub command: CommandSpec,
    pub reward: RewardWeights,
    pub body: BodyConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            track_length: 12.0,
            max_steps: 1000,
            scan_rays: 16,
            scan_spacing: 0.15,
            max_range: 3.0,
            command: CommandSpec::default(),
            reward: RewardWeights::default(),
            body: BodyConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let b = &self.body;
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.scan_rays < 2 || self.scan_rays % 2 != 0 {
            return bad("scan_rays must be an even number >= 2");
        }
        if !(self.track_length > 1.0) {
            return bad("track_length must exceed 1 m");
        }
        if !(b.leg_min > b.half_height && b.leg_min < b.leg_max) {
            return bad("leg limits must satisfy half_height < leg_min < leg_max");
        }
        if !(b.leg_nominal >= b.leg_min && b.leg_nominal <= b.leg_max) {
            return bad("leg_nominal outside leg limits");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if let CommandSpec::Uniform(lo, hi) = self.command {
            if !(hi >= lo) {
                return bad("command range is empty");
            }
        }
        Ok(())
    }
}

/// Full simulator truth, available to the world model's auxiliary targets but
/// never to the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub body_position: (f64, f64),
    pub body_velocity: (f64, f64),
    pub leg_extension: f64,
    /// N, vertical, zero while airborne.
    pub contact_force: f64,
    /// m/s, horizontal slip of the contact point; zero while airborne.
    pub slip_speed: f64,
    pub in_contact: bool,
    pub domain: DomainParams,
    /// Ground heights then ceiling heights at the scan positions ahead of the
    /// body, clamped to `±max_range`.
    pub local_heights: Vec<f64>,
    pub command_velocity: f64,
    /// Highest ground point under the body footprint (`-∞` over a hole).
    pub footprint_ground_max: f64,
    /// Lowest ceiling point over the body footprint (`+∞` when open).
    pub footprint_ceiling_min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub proprio: Vec<f64>,
    /// Signed clearances: first half body-to-ground, second half
    /// ceiling-to-body, clamped to `±max_range`.
    pub depth_scan: Vec<f64>,
}

impl Observation {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.proprio.clone();
        v.extend_from_slice(&self.depth_scan);
        v
    }

    pub fn dim(&self) -> usize {
        self.proprio.len() + self.depth_scan.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collision: bool,
    pub fell: bool,
    pub success: bool,
    pub truncated: bool,
    /// The velocity-tracking term alone, `w_v · exp(−(vx − cmd)²/σ²)`.
    pub tracking_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub state: SimState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvConfig,
    terrain: TerrainProfile,
    domain: DomainParams,
    rng: ChaCha8Rng,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    leg: f64,
    in_contact: bool,
    contact_force: f64,
    slip: f64,
    prev_action: [f64; 2],
    command: f64,
    steps: usize,
    done: bool,
}

pub fn make_env(
    task_kind: TaskKind,
    difficulty: f64,
    domain: DomainParams,
    seed: u64,
    config: &EnvConfig,
) -> Result<Environment, EnvError> {
    config.validate()?;
    domain.validate()?;
    let terrain = TerrainProfile::build(task_kind, difficulty, config.track_length)?;
    Ok(Environment::with_terrain(terrain, domain, seed, config.clone()))
}

impl Environment {
    pub fn with_terrain(terrain: TerrainProfile, domain: DomainParams, seed: u64, config: EnvConfig) -> Self {
        let mut env = Self {
            config,
            terrain,
            domain,
            rng: ChaCha8Rng::seed_from_u64(seed),
            x: 0.0,
            y: 0.0,
            vx: 0.0,
            vy: 0.0,
            leg: 0.0,
            in_contact: true,
            contact_force: 0.0,
            slip: 0.0,
            prev_action: [0.0; 2],
            command: 0.0,
            steps: 0,
            done: false,
        };
        env.reset();
        env
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn terrain(&self) -> &TerrainProfile {
        &self.terrain
    }

    pub fn domain(&self) -> DomainParams {
        self.domain
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn command(&self) -> f64 {
        self.command
    }

    /// Places the body at rest on the ground near the start and draws a new
    /// command velocity from the environment's own stream.
    pub fn reset(&mut self) -> (Observation, SimState) {
        let b = &self.config.body;
        self.command = match self.config.command {
            CommandSpec::Fixed(v) => v,
            CommandSpec::Uniform(lo, hi) if hi > lo => self.rng.random_range(lo..hi),
            CommandSpec::Uniform(lo, _) => lo,
        };
        self.x = 0.5 + self.rng.random_range(0.0..0.2);
        self.leg = b.leg_nominal;
        self.y = self.terrain.ground_height(self.x) + self.leg;
        self.vx = 0.0;
        self.vy = 0.0;
        self.in_contact = true;
        self.contact_force = self.domain.mass * GRAVITY;
        self.slip = 0.0;
        self.prev_action = [0.0; 2];
        self.steps = 0;
        self.done = false;
        (self.observation(), self.state())
    }

    /// Overrides the kinematic state; used by tests and fixtures.
    pub fn set_kinematics(&mut self, position: (f64, f64), velocity: (f64, f64), leg: f64, in_contact: bool) {
        self.x = position.0;
        self.y = position.1;
        self.vx = velocity.0;
        self.vy = velocity.1;
        self.leg = leg;
        self.in_contact = in_contact;
        self.contact_force = if in_contact { self.domain.mass * GRAVITY } else { 0.0 };
        self.slip = 0.0;
    }

    pub fn mechanical_energy(&self) -> f64 {
        0.5 * self.domain.mass * (self.vx * self.vx + self.vy * self.vy) + self.domain.mass * GRAVITY * self.y
    }

    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let a = action.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
        let dt = self.config.dt;
        let b = self.config.body.clone();
        let d = self.domain;
        let force = a[0] * b.force_max * d.actuator_gain;
        let leg_cmd = (self.leg + a[1] * b.leg_rate_max * dt).clamp(b.leg_min, b.leg_max);

        // Horizontal, semi-implicit Euler.
        let (ax, slip) = if self.in_contact {
            let limit = d.friction * self.contact_force.max(0.0);
            let traction = force.clamp(-limit, limit);
            let slip = (force.abs() - limit).max(0.0) / d.mass * b.slip_time;
            let com = d.com_offset * d.mass * GRAVITY * b.com_coupling;
            ((traction + com) / d.mass - b.ground_damping * self.vx, slip)
        } else {
            (force / d.mass, 0.0)
        };
        let vx = self.vx + ax * dt;
        let x = self.x + vx * dt;

        // Vertical.
        let mut leg = leg_cmd;
        let mut contact_state: Option<(f64, f64, f64)> = None; // (y, vy, normal force)
        if self.in_contact {
            let ground = self.terrain.ground_height(x);
            let foot = self.y - self.leg;
            if ground.is_finite() && ground >= foot - b.contact_tolerance {
                let v_leg = (leg - self.leg) / dt;
                let normal = d.mass * (GRAVITY + (v_leg - self.vy) / dt);
                if normal >= 0.0 {
                    contact_state = Some((ground + leg, v_leg, normal));
                }
            }
        }
        let mut collision = false;
        let (y, vy, in_contact, contact_force) = match contact_state {
            Some((y, vy, n)) => (y, vy, true, n),
            None => {
                let vy = self.vy - GRAVITY * dt;
                let y = self.y + vy * dt;
                let ground = self.terrain.ground_height(x);
                if ground.is_finite() && y - leg <= ground {
                    if y - ground < b.half_height {
                        collision = true;
                    }
                    leg = (y - ground).clamp(b.leg_min, leg);
                    let n = d.mass * (GRAVITY - self.vy / dt);
                    (ground + leg, 0.0, true, n.max(0.0))
                } else {
                    (y, vy, false, 0.0)
                }
            }
        };

        self.x = x;
        self.y = y;
        self.vx = vx;
        self.vy = vy;
        self.leg = leg;
        self.in_contact = in_contact;
        self.contact_force = contact_force;
        self.slip = if in_contact { slip } else { 0.0 };
        self.prev_action = a;
        self.steps += 1;

        let (fg, fc) = self.footprint();
        collision |= fg > y - b.half_height + 1e-12 || fc < y + b.half_height;
        let fell = y < self.terrain.min_ground_level() - 0.5;
        let success = !collision && !fell && x >= self.config.track_length - 0.5;
        let truncated = !(collision || fell || success) && self.steps >= self.config.max_steps;
        self.done = collision || fell || success || truncated;

        let w = &self.config.reward;
        let dv = vx - self.command;
        let tracking = w.velocity * (-(dv * dv) / (w.sigma * w.sigma)).exp();
        let reward = tracking - w.lateral * vy * vy - w.action * (a[0] * a[0] + a[1] * a[1])
            - if collision { w.collision } else { 0.0 }
            + w.survival;

        Ok(StepOutcome {
            observation: self.observation(),
            state: self.state(),
            reward,
            done: self.done,
            info: StepInfo {
                collision,
                fell,
                success,
                truncated,
                tracking_reward: tracking,
            },
        })
    }

    fn footprint(&self) -> (f64, f64) {
        let l = self.config.body.half_length;
        (
            self.terrain.max_ground(self.x - l, self.x + l),
            self.terrain.min_ceiling(self.x - l, self.x + l),
        )
    }

    fn scan_positions(&self) -> Vec<f64> {
        let half = self.config.scan_rays / 2;
        (0..half)
            .map(|k| self.x + self.config.body.half_length + k as f64 * self.config.scan_spacing)
            .collect()
    }

    pub fn observation(&self) -> Observation {
        let r = self.config.max_range;
        let l = self.config.body.half_length;
        let pitch = if self.in_contact {
            let g0 = self.terrain.ground.eval(self.x - l);
            let g1 = self.terrain.ground.eval(self.x + l);
            ((g1 - g0) / (2.0 * l)).atan()
        } else {
            self.vy.atan2(self.vx.abs().max(0.5))
        };
        let proprio = vec![
            self.vx,
            self.vy,
            self.leg,
            self.prev_action[0],
            self.prev_action[1],
            pitch,
            self.command,
        ];
        let xs = self.scan_positions();
        let mut depth_scan: Vec<f64> = xs
            .iter()
            .map(|&x| clamp_range(self.y - self.terrain.ground_height(x), r))
            .collect();
        depth_scan.extend(
            xs.iter()
                .map(|&x| clamp_range(self.terrain.ceiling_height(x) - self.y, r)),
        );
        Observation { proprio, depth_scan }
    }

    pub fn state(&self) -> SimState {
        let r = self.config.max_range;
        let xs = self.scan_positions();
        let mut local_heights: Vec<f64> = xs
            .iter()
            .map(|&x| clamp_range(self.terrain.ground_height(x), r))
            .collect();
        local_heights.extend(xs.iter().map(|&x| clamp_range(self.terrain.ceiling_height(x), r)));
        let (fg, fc) = self.footprint();
        SimState {
            body_position: (self.x, self.y),
            body_velocity: (self.vx, self.vy),
            leg_extension: self.leg,
            contact_force: self.contact_force,
            slip_speed: self.slip,
            in_contact: self.in_contact,
            domain: self.domain,
            local_heights,
            command_velocity: self.command,
            footprint_ground_max: fg,
            footprint_ceiling_min: fc,
        }
    }
}

fn clamp_range(v: f64, r: f64) -> f64 {
    if v.is_nan() {
        r
    } else {
        v.clamp(-r, r)
    }
}

/// A set of independent environments stepped together.
#[derive(Clone, Debug)]
pub struct VecEnv {
    pub envs: Vec<Environment>,
}

impl VecEnv {
    pub fn new(envs: Vec<Environment>) -> Self {
        Self { envs }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn step(&mut self, actions: &[[f64; 2]]) -> Vec<Result<StepOutcome, EnvError>> {
        assert_eq!(actions.len(), self.envs.len(), "one action per environment");
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(e, &a)| e.step(a))
            .collect()
    }
}
