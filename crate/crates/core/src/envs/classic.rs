//! Classic-control dynamics with semi-implicit Euler integration.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Action, ActionSpace, Dynamics};
use crate::error::{Error, Result};

fn discrete(action: &Action, n: usize) -> Result<usize> {
    match action {
        Action::Discrete(i) if *i < n => Ok(*i),
        other => Err(Error::Env(format!("action {other:?} outside Discrete({n})"))),
    }
}

fn boxed(action: &Action, low: f64, high: f64) -> Result<f64> {
    match action {
        Action::Continuous(v) if v.len() == 1 && v[0].is_finite() && v[0] >= low && v[0] <= high => {
            Ok(v[0])
        }
        other => Err(Error::Env(format!("action {other:?} outside Box([{low}], [{high}])"))),
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Debug)]
pub struct CartPole {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub force_mag: f64,
    pub continuous: bool,
    pub init_scale: f64,
}

impl CartPole {
    pub const GRAVITY: f64 = 9.8;
    pub const MASS_CART: f64 = 1.0;
    pub const MASS_POLE: f64 = 0.1;
    /// Half the pole length.
    pub const LENGTH: f64 = 0.5;
    pub const TAU: f64 = 0.02;
    pub const X_LIMIT: f64 = 2.4;
    pub const THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;

    pub fn new(continuous: bool) -> Self {
        CartPole {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
            force_mag: 10.0,
            continuous,
            init_scale: 0.05,
        }
    }

    /// One integration step under an explicit horizontal force.
    pub fn advance(&mut self, force: f64) {
        let total = Self::MASS_CART + Self::MASS_POLE;
        let pml = Self::MASS_POLE * Self::LENGTH;
        let (sin, cos) = self.theta.sin_cos();
        let temp = (force + pml * self.theta_dot * self.theta_dot * sin) / total;
        let theta_acc = (Self::GRAVITY * sin - cos * temp)
            / (Self::LENGTH * (4.0 / 3.0 - Self::MASS_POLE * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        self.x_dot += Self::TAU * x_acc;
        self.x += Self::TAU * self.x_dot;
        self.theta_dot += Self::TAU * theta_acc;
        self.theta += Self::TAU * self.theta_dot;
    }

    fn failed(&self) -> bool {
        self.x.abs() > Self::X_LIMIT || self.theta.abs() > Self::THETA_LIMIT
    }
}

impl Dynamics for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        if self.continuous {
            ActionSpace::Box {
                low: vec![-1.0],
                high: vec![1.0],
            }
        } else {
            ActionSpace::Discrete(2)
        }
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        let s = self.init_scale;
        self.x = rng.gen_range(-s..=s);
        self.x_dot = rng.gen_range(-s..=s);
        self.theta = rng.gen_range(-s..=s);
        self.theta_dot = rng.gen_range(-s..=s);
    }

    fn step(&mut self, action: &Action) -> Result<(f64, bool)> {
        let force = if self.continuous {
            boxed(action, -1.0, 1.0)? * self.force_mag
        } else if discrete(action, 2)? == 1 {
            self.force_mag
        } else {
            -self.force_mag
        };
        self.advance(force);
        Ok((1.0, self.failed()))
    }

    fn state(&self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if let [x, xd, t, td] = *state {
            self.x = x;
            self.x_dot = xd;
            self.theta = t;
            self.theta_dot = td;
            Ok(())
        } else {
            Err(Error::Env(format!("cartpole state has 4 entries, got {}", state.len())))
        }
    }

    fn state_scale(&self) -> Vec<(f64, f64)> {
        vec![
            (-Self::X_LIMIT, Self::X_LIMIT),
            (-3.0, 3.0),
            (-Self::THETA_LIMIT, Self::THETA_LIMIT),
            (-3.5, 3.5),
        ]
    }

    fn default_cap(&self) -> usize {
        500
    }
}

#[derive(Clone, Debug)]
pub struct MountainCar {
    pub position: f64,
    pub velocity: f64,
}

impl MountainCar {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.5;
    pub const FORCE: f64 = 0.001;
    pub const GRAVITY: f64 = 0.0025;

    pub fn new() -> Self {
        MountainCar {
            position: -0.5,
            velocity: 0.0,
        }
    }
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl Dynamics for MountainCar {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.position = rng.gen_range(-0.6..=-0.4);
        self.velocity = 0.0;
    }

    fn step(&mut self, action: &Action) -> Result<(f64, bool)> {
        let a = discrete(action, 3)? as f64;
        self.velocity += (a - 1.0) * Self::FORCE - Self::GRAVITY * (3.0 * self.position).cos();
        self.velocity = self.velocity.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.position += self.velocity;
        self.position = self.position.clamp(Self::MIN_POSITION, Self::MAX_POSITION);
        if self.position == Self::MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        let done = self.position >= Self::GOAL_POSITION && self.velocity >= 0.0;
        Ok((-1.0, done))
    }

    fn state(&self) -> Vec<f64> {
        vec![self.position, self.velocity]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if let [p, v] = *state {
            self.position = p;
            self.velocity = v;
            Ok(())
        } else {
            Err(Error::Env(format!("mountain car state has 2 entries, got {}", state.len())))
        }
    }

    fn state_scale(&self) -> Vec<(f64, f64)> {
        vec![
            (Self::MIN_POSITION, Self::MAX_POSITION),
            (-Self::MAX_SPEED, Self::MAX_SPEED),
        ]
    }

    fn default_cap(&self) -> usize {
        200
    }
}

/// Rigid rod pendulum; angle 0 is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub theta: f64,
    pub theta_dot: f64,
    /// Viscous damping coefficient (0 in the standard task).
    pub damping: f64,
}

impl Pendulum {
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const DT: f64 = 0.05;
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;

    pub fn new(damping: f64) -> Self {
        Pendulum {
            theta: PI,
            theta_dot: 0.0,
            damping,
        }
    }

    /// Mechanical energy of the rod: rotational KE plus PE of its centre of mass.
    pub fn energy(&self) -> f64 {
        let inertia = Self::MASS * Self::LENGTH * Self::LENGTH / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + Self::MASS * Self::GRAVITY * 0.5 * Self::LENGTH * self.theta.cos()
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Box {
            low: vec![-Self::MAX_TORQUE],
            high: vec![Self::MAX_TORQUE],
        }
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.theta = rng.gen_range(-PI..=PI);
        self.theta_dot = rng.gen_range(-1.0..=1.0);
    }

    fn step(&mut self, action: &Action) -> Result<(f64, bool)> {
        let u = boxed(action, -Self::MAX_TORQUE, Self::MAX_TORQUE)?;
        let th = wrap_angle(self.theta);
        let cost = th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u;
        let acc = 3.0 * Self::GRAVITY / (2.0 * Self::LENGTH) * self.theta.sin()
            + 3.0 / (Self::MASS * Self::LENGTH * Self::LENGTH) * u
            - self.damping * self.theta_dot;
        self.theta_dot = (self.theta_dot + acc * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * Self::DT;
        Ok((-cost, false))
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if let [c, s, td] = *state {
            self.theta = s.atan2(c);
            self.theta_dot = td;
            Ok(())
        } else {
            Err(Error::Env(format!("pendulum state has 3 entries, got {}", state.len())))
        }
    }

    fn state_scale(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0), (-1.0, 1.0), (-Self::MAX_SPEED, Self::MAX_SPEED)]
    }

    fn default_cap(&self) -> usize {
        200
    }
}

/// Two-link underactuated arm, torque on the elbow.
#[derive(Clone, Debug)]
pub struct Acrobot {
    pub theta1: f64,
    pub theta2: f64,
    pub dtheta1: f64,
    pub dtheta2: f64,
    /// Integration sub-steps per 0.2 s control step.
    pub substeps: usize,
}

impl Acrobot {
    pub const DT: f64 = 0.2;
    pub const LINK_LENGTH_1: f64 = 1.0;
    pub const LINK_MASS_1: f64 = 1.0;
    pub const LINK_MASS_2: f64 = 1.0;
    pub const LINK_COM_1: f64 = 0.5;
    pub const LINK_COM_2: f64 = 0.5;
    pub const LINK_MOI: f64 = 1.0;
    pub const MAX_VEL_1: f64 = 4.0 * PI;
    pub const MAX_VEL_2: f64 = 9.0 * PI;
    pub const GRAVITY: f64 = 9.8;

    pub fn new(substeps: usize) -> Self {
        Acrobot {
            theta1: 0.0,
            theta2: 0.0,
            dtheta1: 0.0,
            dtheta2: 0.0,
            substeps: substeps.max(1),
        }
    }

    fn accelerations(&self, torque: f64) -> (f64, f64) {
        let (m1, m2) = (Self::LINK_MASS_1, Self::LINK_MASS_2);
        let (l1, lc1, lc2) = (Self::LINK_LENGTH_1, Self::LINK_COM_1, Self::LINK_COM_2);
        let (i1, i2, g) = (Self::LINK_MOI, Self::LINK_MOI, Self::GRAVITY);
        let (t1, t2, d1v, d2v) = (self.theta1, self.theta2, self.dtheta1, self.dtheta2);
        let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * t2.cos()) + i1 + i2;
        let d2 = m2 * (lc2 * lc2 + l1 * lc2 * t2.cos()) + i2;
        let phi2 = m2 * lc2 * g * (t1 + t2 - PI / 2.0).cos();
        let phi1 = -m2 * l1 * lc2 * d2v * d2v * t2.sin() - 2.0 * m2 * l1 * lc2 * d2v * d1v * t2.sin()
            + (m1 * lc1 + m2 * l1) * g * (t1 - PI / 2.0).cos()
            + phi2;
        let dd2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * d1v * d1v * t2.sin() - phi2)
            / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
        let dd1 = -(d2 * dd2 + phi1) / d1;
        (dd1, dd2)
    }

    fn swung_up(&self) -> bool {
        -self.theta1.cos() - (self.theta2 + self.theta1).cos() > 1.0
    }
}

impl Dynamics for Acrobot {
    fn state_dim(&self) -> usize {
        6
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.theta1 = rng.gen_range(-0.1..=0.1);
        self.theta2 = rng.gen_range(-0.1..=0.1);
        self.dtheta1 = rng.gen_range(-0.1..=0.1);
        self.dtheta2 = rng.gen_range(-0.1..=0.1);
    }

    fn step(&mut self, action: &Action) -> Result<(f64, bool)> {
        let torque = discrete(action, 3)? as f64 - 1.0;
        let h = Self::DT / self.substeps as f64;
        for _ in 0..self.substeps {
            let (a1, a2) = self.accelerations(torque);
            self.dtheta1 = (self.dtheta1 + h * a1).clamp(-Self::MAX_VEL_1, Self::MAX_VEL_1);
            self.dtheta2 = (self.dtheta2 + h * a2).clamp(-Self::MAX_VEL_2, Self::MAX_VEL_2);
            self.theta1 += h * self.dtheta1;
            self.theta2 += h * self.dtheta2;
        }
        self.theta1 = wrap_angle(self.theta1);
        self.theta2 = wrap_angle(self.theta2);
        let done = self.swung_up();
        Ok((if done { 0.0 } else { -1.0 }, done))
    }

    fn state(&self) -> Vec<f64> {
        vec![
            self.theta1.cos(),
            self.theta1.sin(),
            self.theta2.cos(),
            self.theta2.sin(),
            self.dtheta1,
            self.dtheta2,
        ]
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if let [c1, s1, c2, s2, d1, d2] = *state {
            self.theta1 = s1.atan2(c1);
            self.theta2 = s2.atan2(c2);
            self.dtheta1 = d1;
            self.dtheta2 = d2;
            Ok(())
        } else {
            Err(Error::Env(format!("acrobot state has 6 entries, got {}", state.len())))
        }
    }

    fn state_scale(&self) -> Vec<(f64, f64)> {
        vec![
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-1.0, 1.0),
            (-Self::MAX_VEL_1, Self::MAX_VEL_1),
            (-Self::MAX_VEL_2, Self::MAX_VEL_2),
        ]
    }

    fn default_cap(&self) -> usize {
        500
    }
}
