//! Deterministic fixed-step simulation of a PR2-like robot.
//!
//! The simulator owns the full [`RobotState`] and a virtual clock counted in
//! ticks. Every call to [`Simulator::step`] advances the clock by exactly one
//! step and reports what became due on that tick (camera frames, state
//! snapshots, laser scans, transform samples) together with any discrete
//! events such as arm-motion completion.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

/// Joint suffixes of one arm, in kinematic order.
pub const ARM_JOINTS: [&str; 7] = [
    "shoulder_pan",
    "shoulder_lift",
    "upper_arm_roll",
    "elbow_flex",
    "forearm_roll",
    "wrist_flex",
    "wrist_roll",
];

pub const TORSO_LIMITS: (f64, f64) = (0.0, 0.31);
pub const TORSO_MAX_VELOCITY: f64 = 0.05;
pub const HEAD_PAN_LIMITS: (f64, f64) = (-2.8, 2.8);
pub const HEAD_TILT_LIMITS: (f64, f64) = (-0.37, 1.30);
pub const HEAD_MAX_VELOCITY: f64 = 1.0;
pub const ARM_MAX_VELOCITY: f64 = 2.0;
/// Height of the head pan/tilt axis above `base_link` with the torso fully down.
pub const HEAD_HEIGHT: f64 = 1.2;
pub const MAX_LASER_AMPLITUDE: f64 = 1.57;
pub const ARM_MOTION_TIMEOUT: f64 = 30.0;

pub const CAMERA_WIDTH: u16 = 160;
pub const CAMERA_HEIGHT: u16 = 120;

pub const SCAN_SAMPLES: usize = 100;
pub const SCAN_ANGLE_MIN: f64 = -1.57;
pub const SCAN_ANGLE_MAX: f64 = 1.57;
pub const SCAN_RANGE: f64 = 3.0;

/// Rate of the laser scan and transform channels.
pub const SENSOR_HZ: u32 = 10;

const ARRIVAL_SLACK: f64 = 1e-9;
/// Distance below which a joint counts as arrived regardless of its speed.
const SNAP_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("robot is not in mannequin mode")]
    NotInMannequinMode,
    #[error("unsupported frame `{0}`, only base_link is available")]
    UnsupportedFrame(String),
    #[error("look-at point is directly above or below the head")]
    DegeneratePoint,
    #[error("tilt laser is not active")]
    LaserInactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Left => "l_",
            Side::Right => "r_",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "left" | "l" => Some(Side::Left),
            "right" | "r" => Some(Side::Right),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Normal,
    Mannequin,
    Joystick,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "Normal",
            Mode::Mannequin => "Mannequin",
            Mode::Joystick => "Joystick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointState {
    pub name: String,
    pub position: f64,
    pub target: f64,
    pub max_velocity: f64,
    /// Speed used for the current motion, never above `max_velocity`.
    #[serde(skip)]
    pub speed: f64,
    pub limits: (f64, f64),
}

impl JointState {
    pub fn new(name: impl Into<String>, limits: (f64, f64), max_velocity: f64) -> Self {
        let position = 0.0_f64.clamp(limits.0, limits.1);
        JointState {
            name: name.into(),
            position,
            target: position,
            max_velocity,
            speed: max_velocity,
            limits,
        }
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.limits.0, self.limits.1)
    }

    /// Sets a new target at full speed. Returns the clamped target.
    fn command(&mut self, target: f64) -> f64 {
        self.target = self.clamp(target);
        self.speed = self.max_velocity;
        self.target
    }

    /// Sets a new target reached after `duration` seconds where the speed limit allows.
    fn command_timed(&mut self, target: f64, duration: f64) {
        self.target = self.clamp(target);
        let delta = (self.target - self.position).abs();
        self.speed = if duration > 0.0 && delta > 0.0 {
            (delta / duration).min(self.max_velocity)
        } else {
            self.max_velocity
        };
    }

    fn place(&mut self, value: f64) -> bool {
        let clamped = self.clamp(value);
        self.position = clamped;
        self.target = clamped;
        self.speed = self.max_velocity;
        clamped != value
    }

    fn step(&mut self, dt: f64) {
        let remaining = self.target - self.position;
        if remaining == 0.0 {
            return;
        }
        let max_step = self.speed * dt;
        if remaining.abs() <= max_step * (1.0 + ARRIVAL_SLACK) || remaining.abs() < SNAP_DISTANCE {
            self.position = self.target;
        } else {
            self.position += max_step.copysign(remaining);
        }
    }

    pub fn at_target(&self) -> bool {
        self.position == self.target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arm {
    pub side: Side,
    pub joints: Vec<JointState>,
}

impl Arm {
    // Joint limits are table values, not rounded constants.
    #[allow(clippy::approx_constant)]
    fn new(side: Side) -> Self {
        let joints = ARM_JOINTS
            .iter()
            .map(|suffix| {
                let limits = match *suffix {
                    "shoulder_lift" => (-0.52, 1.39),
                    "elbow_flex" => (-2.30, 0.0),
                    _ => (-3.14, 3.14),
                };
                JointState::new(format!("{}{}", side.prefix(), suffix), limits, ARM_MAX_VELOCITY)
            })
            .collect();
        Arm { side, joints }
    }

    pub fn positions(&self) -> BTreeMap<String, f64> {
        self.joints.iter().map(|j| (j.name.clone(), j.position)).collect()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Head {
    pub pan: JointState,
    pub tilt: JointState,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Base {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub vtheta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TiltLaser {
    pub active: bool,
    pub speed: f64,
    pub amplitude: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotState {
    pub left_arm: Arm,
    pub right_arm: Arm,
    pub head: Head,
    pub torso: JointState,
    pub base: Base,
    pub mode: Mode,
    pub tilt_laser: TiltLaser,
}

impl Default for RobotState {
    fn default() -> Self {
        RobotState {
            left_arm: Arm::new(Side::Left),
            right_arm: Arm::new(Side::Right),
            head: Head {
                pan: JointState::new("head_pan", HEAD_PAN_LIMITS, HEAD_MAX_VELOCITY),
                tilt: JointState::new("head_tilt", HEAD_TILT_LIMITS, HEAD_MAX_VELOCITY),
            },
            torso: JointState::new("torso_lift", TORSO_LIMITS, TORSO_MAX_VELOCITY),
            base: Base::default(),
            mode: Mode::Normal,
            tilt_laser: TiltLaser::default(),
        }
    }
}

impl RobotState {
    pub fn arm(&self, side: Side) -> &Arm {
        match side {
            Side::Left => &self.left_arm,
            Side::Right => &self.right_arm,
        }
    }

    fn arm_mut(&mut self, side: Side) -> &mut Arm {
        match side {
            Side::Left => &mut self.left_arm,
            Side::Right => &mut self.right_arm,
        }
    }

    pub fn joints(&self) -> impl Iterator<Item = &JointState> {
        self.left_arm
            .joints
            .iter()
            .chain(self.right_arm.joints.iter())
            .chain([&self.head.pan, &self.head.tilt, &self.torso])
    }

    fn joints_mut(&mut self) -> impl Iterator<Item = &mut JointState> {
        self.left_arm
            .joints
            .iter_mut()
            .chain(self.right_arm.joints.iter_mut())
            .chain([&mut self.head.pan, &mut self.head.tilt, &mut self.torso])
    }

    pub fn joint(&self, name: &str) -> Option<&JointState> {
        self.joints().find(|j| j.name == name)
    }

    /// Resolves an arm joint name to its side and index.
    fn arm_joint(&self, name: &str) -> Option<(Side, usize)> {
        [Side::Left, Side::Right]
            .into_iter()
            .find_map(|side| self.arm(side).index_of(name).map(|i| (side, i)))
    }
}

/// Fixed arm configuration used by `tuckBothArms`.
pub fn tuck_pose(side: Side) -> BTreeMap<String, f64> {
    let sign = match side {
        Side::Left => 1.0,
        Side::Right => -1.0,
    };
    let values = [0.02 * sign, 1.31, 1.45 * sign, -2.12, 1.57 * sign, -1.47, 0.0];
    ARM_JOINTS
        .iter()
        .zip(values)
        .map(|(suffix, v)| (format!("{}{}", side.prefix(), suffix), v))
        .collect()
}

/// Triangle wave starting at zero and rising with slope `speed`, bounded by `amplitude`.
pub fn triangle_wave(t: f64, speed: f64, amplitude: f64) -> f64 {
    if amplitude <= 0.0 || speed <= 0.0 {
        return 0.0;
    }
    let period = 4.0 * amplitude;
    let phase = (t * speed).rem_euclid(period);
    let angle = if phase <= amplitude {
        phase
    } else if phase <= 3.0 * amplitude {
        2.0 * amplitude - phase
    } else {
        phase - period
    };
    angle.clamp(-amplitude, amplitude)
}

/// Pan and tilt that aim the head at a point in `base_link`.
pub fn look_at_angles(torso_height: f64, x: f64, y: f64, z: f64) -> Result<(f64, f64), SimError> {
    let planar_sq = x * x + y * y;
    if planar_sq < 1e-9 {
        return Err(SimError::DegeneratePoint);
    }
    let head_height = HEAD_HEIGHT + torso_height;
    Ok((y.atan2(x), (head_height - z).atan2(planar_sq.sqrt())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub width: u16,
    pub height: u16,
    pub timestamp: f64,
    pub frame_index: u64,
    pub pixels: Vec<u8>,
}

impl CameraFrame {
    pub fn test_pattern(width: u16, height: u16, frame_index: u64, timestamp: f64) -> Self {
        let shift = (frame_index % 256) as usize;
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height as usize {
            for x in 0..width as usize {
                pixels.push(((x + y + shift) % 256) as u8);
            }
        }
        CameraFrame { width, height, timestamp, frame_index, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width as usize + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltScan {
    pub timestamp: f64,
    pub tilt_angle: f64,
    pub angle_min: f64,
    pub angle_max: f64,
    pub ranges: Vec<f64>,
}

impl TiltScan {
    fn synthetic(timestamp: f64, tilt_angle: f64) -> Self {
        TiltScan {
            timestamp,
            tilt_angle,
            angle_min: SCAN_ANGLE_MIN,
            angle_max: SCAN_ANGLE_MAX,
            ranges: vec![SCAN_RANGE; SCAN_SAMPLES],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scan serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    ArmMotionComplete { side: Side, success: bool, time: f64 },
}

/// Outcome of a timed arm command.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmCommand {
    Accepted,
    /// The arm was not in a mode that accepts motion commands.
    Rejected,
}

#[derive(Debug, Clone)]
struct ArmMotion {
    joints: Vec<usize>,
    started: u64,
}

/// Emission rates of the periodic outputs, in Hz.
#[derive(Debug, Clone, Copy)]
pub struct Rates {
    pub sim_hz: u32,
    pub image_hz: u32,
    pub state_hz: u32,
}

impl Default for Rates {
    fn default() -> Self {
        Rates { sim_hz: 50, image_hz: 10, state_hz: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct TickOutput {
    pub tick: u64,
    pub time: f64,
    pub camera: Option<CameraFrame>,
    pub scan: Option<TiltScan>,
    /// Set when a telemetry state frame is due.
    pub state_due: bool,
    /// Set when a transform sample is due.
    pub tf_due: bool,
    /// Copy of the state after this tick, present whenever `state_due` or `tf_due`.
    pub snapshot: Option<RobotState>,
    pub events: Vec<SimEvent>,
}

fn divisor(sim_hz: u32, rate: u32) -> u64 {
    ((sim_hz as f64 / rate.max(1) as f64).round() as u64).max(1)
}

#[derive(Debug, Clone)]
pub struct Simulator {
    state: RobotState,
    tick: u64,
    dt: f64,
    image_every: u64,
    state_every: u64,
    sensor_every: u64,
    frame_index: u64,
    laser_started: u64,
    motions: [Option<ArmMotion>; 2],
    pending_events: Vec<SimEvent>,
}

impl Default for Simulator {
    fn default() -> Self {
        Simulator::new(Rates::default())
    }
}

impl Simulator {
    pub fn new(rates: Rates) -> Self {
        Simulator {
            state: RobotState::default(),
            tick: 0,
            dt: 1.0 / rates.sim_hz as f64,
            image_every: divisor(rates.sim_hz, rates.image_hz),
            state_every: divisor(rates.sim_hz, rates.state_hz),
            sensor_every: divisor(rates.sim_hz, SENSOR_HZ),
            frame_index: 0,
            laser_started: 0,
            motions: [None, None],
            pending_events: Vec::new(),
        }
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    /// Advances the simulation by one fixed step.
    pub fn step(&mut self) -> TickOutput {
        let dt = self.dt;
        for joint in self.state.joints_mut() {
            joint.step(dt);
        }
        if self.state.mode == Mode::Joystick {
            let base = &mut self.state.base;
            let (sin, cos) = base.theta.sin_cos();
            base.x += (base.vx * cos - base.vy * sin) * dt;
            base.y += (base.vx * sin + base.vy * cos) * dt;
            base.theta += base.vtheta * dt;
        }
        self.tick += 1;
        let time = self.time();

        let laser = &mut self.state.tilt_laser;
        if laser.active {
            let elapsed = (self.tick - self.laser_started) as f64 * dt;
            laser.angle = triangle_wave(elapsed, laser.speed, laser.amplitude);
        }

        let mut events = std::mem::take(&mut self.pending_events);
        for side in [Side::Left, Side::Right] {
            let Some(motion) = &self.motions[side.index()] else { continue };
            let arm = self.state.arm(side);
            let done = motion.joints.iter().all(|&i| arm.joints[i].at_target());
            let expired = (self.tick - motion.started) as f64 * dt >= ARM_MOTION_TIMEOUT - ARRIVAL_SLACK;
            if done || expired {
                self.motions[side.index()] = None;
                events.push(SimEvent::ArmMotionComplete { side, success: done, time });
            }
        }

        let camera = self.tick.is_multiple_of(self.image_every).then(|| {
            let frame = CameraFrame::test_pattern(CAMERA_WIDTH, CAMERA_HEIGHT, self.frame_index, time);
            self.frame_index += 1;
            frame
        });
        let sensor_due = self.tick.is_multiple_of(self.sensor_every);
        let scan = (sensor_due && self.state.tilt_laser.active)
            .then(|| TiltScan::synthetic(time, self.state.tilt_laser.angle));
        let state_due = self.tick.is_multiple_of(self.state_every);
        let snapshot = (state_due || sensor_due).then(|| self.state.clone());

        TickOutput { tick: self.tick, time, camera, scan, state_due, tf_due: sensor_due, snapshot, events }
    }

    /// Current camera image, without advancing the frame counter.
    pub fn camera_frame(&self) -> CameraFrame {
        CameraFrame::test_pattern(CAMERA_WIDTH, CAMERA_HEIGHT, self.frame_index, self.time())
    }

    pub fn tilt_scan(&self) -> Result<TiltScan, SimError> {
        let laser = &self.state.tilt_laser;
        if !laser.active {
            return Err(SimError::LaserInactive);
        }
        Ok(TiltScan::synthetic(self.time(), laser.angle))
    }

    /// Commands arm joints to reach `positions` after `time_to_reach` seconds.
    ///
    /// Validation is atomic: an unknown or foreign joint name leaves every
    /// target untouched.
    pub fn set_joint_targets(
        &mut self,
        side: Side,
        positions: &BTreeMap<String, f64>,
        time_to_reach: f64,
    ) -> Result<ArmCommand, SimError> {
        let arm = self.state.arm(side);
        let indices = positions
            .keys()
            .map(|name| arm.index_of(name).ok_or_else(|| SimError::UnknownJoint(name.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        if self.state.mode != Mode::Normal {
            return Ok(ArmCommand::Rejected);
        }
        if self.motions[side.index()].take().is_some() {
            self.pending_events.push(SimEvent::ArmMotionComplete { side, success: false, time: self.time() });
        }
        let arm = self.state.arm_mut(side);
        for (&i, value) in indices.iter().zip(positions.values()) {
            arm.joints[i].command_timed(*value, time_to_reach);
        }
        if indices.is_empty() {
            self.pending_events.push(SimEvent::ArmMotionComplete { side, success: true, time: self.time() });
        } else {
            self.motions[side.index()] = Some(ArmMotion { joints: indices, started: self.tick });
        }
        Ok(ArmCommand::Accepted)
    }

    /// Sends both arms to the tuck pose at full speed. False outside Normal mode.
    pub fn tuck_arms(&mut self) -> bool {
        if self.state.mode != Mode::Normal {
            return false;
        }
        for side in [Side::Left, Side::Right] {
            let pose = tuck_pose(side);
            let arm = self.state.arm_mut(side);
            for joint in arm.joints.iter_mut() {
                joint.command(pose[&joint.name]);
            }
        }
        true
    }

    /// Places arm joints directly, as if moved by hand. Returns the names of
    /// joints whose requested value had to be clamped.
    pub fn set_pose_direct(&mut self, positions: &BTreeMap<String, f64>) -> Result<Vec<String>, SimError> {
        if self.state.mode != Mode::Mannequin {
            return Err(SimError::NotInMannequinMode);
        }
        let resolved = positions
            .keys()
            .map(|name| self.state.arm_joint(name).ok_or_else(|| SimError::UnknownJoint(name.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut clamped = Vec::new();
        for ((side, i), (name, value)) in resolved.into_iter().zip(positions) {
            if self.state.arm_mut(side).joints[i].place(*value) {
                clamped.push(name.clone());
            }
        }
        Ok(clamped)
    }

    /// Raises the torso target by `delta`. Returns `Some(true)` when the
    /// target was applied unclamped, `Some(false)` when clamped and `None`
    /// when the mode forbids motion.
    pub fn move_torso_by(&mut self, delta: f64) -> Option<bool> {
        if self.state.mode != Mode::Normal {
            return None;
        }
        let requested = self.state.torso.target + delta;
        let applied = self.state.torso.command(requested);
        Some(applied == requested)
    }

    pub fn look_at(&mut self, frame: &str, x: f64, y: f64, z: f64) -> Result<(f64, f64), SimError> {
        if frame != "base_link" {
            return Err(SimError::UnsupportedFrame(frame.to_string()));
        }
        let (pan, tilt) = look_at_angles(self.state.torso.position, x, y, z)?;
        self.state.head.pan.command(pan);
        self.state.head.tilt.command(tilt);
        Ok((pan, tilt))
    }

    /// Switches between Normal and Mannequin. False when Joystick mode blocks entry.
    pub fn set_mannequin(&mut self, on: bool) -> bool {
        match (on, self.state.mode) {
            (true, Mode::Joystick) => false,
            (true, Mode::Mannequin) | (false, Mode::Normal) | (false, Mode::Joystick) => true,
            (true, Mode::Normal) => {
                self.state.mode = Mode::Mannequin;
                for side in [Side::Left, Side::Right] {
                    for joint in self.state.arm_mut(side).joints.iter_mut() {
                        joint.target = joint.position;
                    }
                    if self.motions[side.index()].take().is_some() {
                        self.pending_events.push(SimEvent::ArmMotionComplete {
                            side,
                            success: false,
                            time: self.time(),
                        });
                    }
                }
                true
            }
            (false, Mode::Mannequin) => {
                self.state.mode = Mode::Normal;
                true
            }
        }
    }

    pub fn start_joystick(&mut self) -> bool {
        match self.state.mode {
            Mode::Mannequin => false,
            Mode::Joystick => true,
            Mode::Normal => {
                self.state.mode = Mode::Joystick;
                true
            }
        }
    }

    pub fn stop_joystick(&mut self) -> bool {
        let base = &mut self.state.base;
        base.vx = 0.0;
        base.vy = 0.0;
        base.vtheta = 0.0;
        if self.state.mode == Mode::Joystick {
            self.state.mode = Mode::Normal;
        }
        true
    }

    /// Applies a base velocity command. Ignored outside Joystick mode.
    pub fn set_base_velocity(&mut self, vx: f64, vy: f64, vtheta: f64) -> bool {
        if self.state.mode != Mode::Joystick || ![vx, vy, vtheta].iter().all(|v| v.is_finite()) {
            return false;
        }
        let base = &mut self.state.base;
        base.vx = vx;
        base.vy = vy;
        base.vtheta = vtheta;
        true
    }

    pub fn set_tilt_laser_periodic(&mut self, speed: f64, amplitude: f64) -> bool {
        if !(speed > 0.0 && amplitude > 0.0) || !speed.is_finite() || !amplitude.is_finite() {
            return false;
        }
        self.state.tilt_laser = TiltLaser {
            active: true,
            speed,
            amplitude: amplitude.min(MAX_LASER_AMPLITUDE),
            angle: 0.0,
        };
        self.laser_started = self.tick;
        true
    }

    pub fn stop_tilt_laser(&mut self) {
        self.state.tilt_laser = TiltLaser::default();
    }
}

/// Scan field of view, mostly useful to callers that label scan rays.
pub fn scan_angle(i: usize) -> f64 {
    SCAN_ANGLE_MIN + (SCAN_ANGLE_MAX - SCAN_ANGLE_MIN) * i as f64 / (SCAN_SAMPLES - 1) as f64
}
