//! The simulation scheduler and the hub that connects it to scripts,
//! clients and the recorder.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use ride_core::bag::Channel;
use ride_core::sim::{Rates, RobotState, SimEvent, Simulator};
use ride_core::wire;
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::bus::{self, BusMessage};
use crate::engine::{EngineHandle, Slot, Value};
use crate::logging::Logger;
use crate::recorder::Recorder;
use crate::telemetry::Telemetry;

const COMPONENT: &str = "kernel";

/// Callback jobs allowed to wait on a busy engine before the realtime
/// ticker starts shedding them.
const MAX_PENDING_CALLBACKS: usize = 256;

/// Realtime lag beyond which the ticker resynchronizes instead of catching up.
const MAX_LAG: Duration = Duration::from_secs(1);

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("time can only be advanced manually in virtual-time mode")]
    NotVirtual,
    #[error("the simulation is already being advanced")]
    Busy,
    #[error("duration must be finite and non-negative")]
    BadDuration,
}

#[derive(Debug, Clone)]
pub struct KernelOptions {
    pub rates: Rates,
    pub data_dir: PathBuf,
    pub virtual_time: bool,
}

#[derive(Debug, Clone, Copy)]
struct TimerSchedule {
    period: f64,
    next_due: f64,
}

pub struct Kernel {
    sim: Mutex<Simulator>,
    clock: AtomicU64,
    engine: OnceLock<EngineHandle>,
    telemetry: Telemetry,
    recorder: Recorder,
    timer: Mutex<Option<TimerSchedule>>,
    stepping: Mutex<()>,
    pending: Arc<AtomicUsize>,
    shed: AtomicU64,
    rates: Rates,
    virtual_time: bool,
    log: Logger,
}

/// Telemetry view of the robot state.
pub fn state_json(state: &RobotState, time: f64) -> Map<String, Json> {
    let joint = |j: &ride_core::sim::JointState| json!({ "position": j.position, "target": j.target });
    let joints: Map<String, Json> = state
        .left_arm
        .joints
        .iter()
        .chain(&state.right_arm.joints)
        .map(|j| (j.name.clone(), json!(j.position)))
        .collect();
    let laser = &state.tilt_laser;
    let mut body = Map::new();
    body.insert("time".into(), json!(time));
    body.insert("joints".into(), Json::Object(joints));
    body.insert("torso".into(), joint(&state.torso));
    body.insert("head".into(), json!({ "pan": joint(&state.head.pan), "tilt": joint(&state.head.tilt) }));
    body.insert("base".into(), serde_json::to_value(state.base).expect("base serializes"));
    body.insert("mode".into(), json!(state.mode.as_str()));
    body.insert(
        "tilt_laser".into(),
        json!({ "active": laser.active, "speed": laser.speed, "amplitude": laser.amplitude, "angle": laser.angle }),
    );
    body
}

/// Pose sample stored on the transform channel.
pub fn tf_json(state: &RobotState, time: f64) -> String {
    let b = &state.base;
    json!({
        "t": time,
        "base": { "x": b.x, "y": b.y, "theta": b.theta },
        "torso": state.torso.position,
        "head": { "pan": state.head.pan.position, "tilt": state.head.tilt.position },
    })
    .to_string()
}

impl Kernel {
    pub fn new(options: KernelOptions, log: Logger) -> Arc<Kernel> {
        Arc::new(Kernel {
            sim: Mutex::new(Simulator::new(options.rates)),
            clock: AtomicU64::new(0f64.to_bits()),
            engine: OnceLock::new(),
            telemetry: Telemetry::default(),
            recorder: Recorder::new(options.data_dir, log.clone()),
            timer: Mutex::new(None),
            stepping: Mutex::new(()),
            pending: Arc::new(AtomicUsize::new(0)),
            shed: AtomicU64::new(0),
            rates: options.rates,
            virtual_time: options.virtual_time,
            log,
        })
    }

    pub fn attach_engine(&self, engine: EngineHandle) {
        if self.engine.set(engine).is_err() {
            self.log.warn(COMPONENT, "engine already attached");
        }
    }

    pub fn engine(&self) -> Option<&EngineHandle> {
        self.engine.get()
    }

    pub fn log(&self) -> &Logger {
        &self.log
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn recorder(&self) -> &Recorder {
        &self.recorder
    }

    pub fn rates(&self) -> Rates {
        self.rates
    }

    pub fn is_virtual_time(&self) -> bool {
        self.virtual_time
    }

    /// Simulation time in seconds.
    pub fn now(&self) -> f64 {
        f64::from_bits(self.clock.load(Ordering::Acquire))
    }

    pub fn with_sim<R>(&self, f: impl FnOnce(&mut Simulator) -> R) -> R {
        f(&mut self.sim.lock().unwrap())
    }

    pub fn snapshot(&self) -> RobotState {
        self.sim.lock().unwrap().state().clone()
    }

    /// Schedules `onTimer` every `period` seconds from now, or cancels it.
    pub fn set_timer(&self, period: Option<f64>) {
        *self.timer.lock().unwrap() = period.map(|period| TimerSchedule { period, next_due: self.now() + period });
    }

    pub fn timer_period(&self) -> Option<f64> {
        self.timer.lock().unwrap().map(|t| t.period)
    }

    /// Callbacks discarded because the engine fell too far behind.
    pub fn shed_callbacks(&self) -> u64 {
        self.shed.load(Ordering::Relaxed)
    }

    /// Steps the simulation by `seconds` (rounded to whole ticks), running
    /// every resulting callback before returning. Virtual-time mode only.
    pub fn advance(&self, seconds: f64) -> Result<u64, KernelError> {
        if !self.virtual_time {
            return Err(KernelError::NotVirtual);
        }
        if !(seconds.is_finite() && seconds >= 0.0) {
            return Err(KernelError::BadDuration);
        }
        let _guard = self.stepping.try_lock().map_err(|_| KernelError::Busy)?;
        let ticks = (seconds * self.rates.sim_hz as f64).round() as u64;
        for _ in 0..ticks {
            self.tick(true);
        }
        Ok(ticks)
    }

    /// Runs the simulation against the wall clock until `stop` is set.
    pub fn spawn_ticker(self: &Arc<Self>, stop: Arc<AtomicBool>) -> std::io::Result<JoinHandle<()>> {
        let kernel = self.clone();
        thread::Builder::new().name("sim-ticker".into()).spawn(move || {
            let dt = Duration::from_secs_f64(1.0 / kernel.rates.sim_hz as f64);
            let mut next = Instant::now() + dt;
            while !stop.load(Ordering::Relaxed) {
                let now = Instant::now();
                if now < next {
                    thread::sleep((next - now).min(Duration::from_millis(50)));
                    continue;
                }
                if now - next > MAX_LAG {
                    kernel.log.warn(COMPONENT, "simulation fell behind the wall clock, resynchronizing");
                    next = now;
                }
                {
                    let _guard = kernel.stepping.lock().unwrap();
                    kernel.tick(false);
                }
                next += dt;
            }
        })
    }

    fn tick(&self, wait: bool) {
        let out = {
            let mut sim = self.sim.lock().unwrap();
            let out = sim.step();
            self.clock.store(out.time.to_bits(), Ordering::Release);
            out
        };
        let time = out.time;
        let mut calls: Vec<(Slot, Vec<Value>)> = Vec::new();

        for event in &out.events {
            let SimEvent::ArmMotionComplete { side, success, .. } = event;
            calls.push((Slot::MoveArmActionComplete, vec![Value::from(side.name()), Value::Bool(*success)]));
        }
        if let Some(frame) = &out.camera {
            let payload: Arc<[u8]> = Arc::from(wire::encode_image(frame));
            self.telemetry.broadcast_image(payload.clone());
            self.recorder.record(Channel::Cam, time, &payload);
        }
        if let Some(scan) = &out.scan {
            let text = scan.to_json();
            self.recorder.record(Channel::Scan, time, text.as_bytes());
            let msg = BusMessage::internal(bus::TILT_SCAN, text, time);
            calls.extend(bus::route(&msg));
        }
        if let Some(state) = &out.snapshot {
            if out.state_due {
                self.telemetry.broadcast_state(Arc::new(state_json(state, time)));
            }
            if out.tf_due {
                self.recorder.record(Channel::Tf, time, tf_json(state, time).as_bytes());
            }
        }
        {
            let mut timer = self.timer.lock().unwrap();
            if let Some(t) = timer.as_mut() {
                while time >= t.next_due - 1e-9 {
                    calls.push((Slot::Timer, Vec::new()));
                    t.next_due += t.period;
                }
            }
        }
        for link in self.telemetry.evict_silent(time) {
            self.log.info("client", format!("client {} ({}) evicted after heartbeat timeout", link.id, link.peer));
        }
        self.dispatch(calls, wait);
    }

    fn dispatch(&self, calls: Vec<(Slot, Vec<Value>)>, wait: bool) {
        let Some(engine) = self.engine.get() else { return };
        let calls: Vec<_> = calls.into_iter().filter(|(slot, _)| engine.is_slot_filled(*slot)).collect();
        if calls.is_empty() {
            return;
        }
        if wait {
            let _ = engine.invoke_batch(calls, true);
            return;
        }
        if self.pending.load(Ordering::Relaxed) >= MAX_PENDING_CALLBACKS {
            if self.shed.fetch_add(calls.len() as u64, Ordering::Relaxed) == 0 {
                self.log.warn(COMPONENT, "engine is not keeping up, dropping callbacks");
            }
            return;
        }
        self.pending.fetch_add(1, Ordering::Relaxed);
        let pending = self.pending.clone();
        let batch = engine.clone();
        let posted = engine.post(move |_, _| {
            pending.fetch_sub(1, Ordering::Relaxed);
            let _ = batch.invoke_batch(calls, true);
        });
        if posted.is_err() {
            self.pending.fetch_sub(1, Ordering::Relaxed);
        }
    }

    /// Delivers a bus message to its callback. Unrouted topics are dropped.
    pub fn publish(&self, msg: BusMessage, wait: bool) {
        match bus::route(&msg) {
            Some((slot, args)) => {
                if let Some(engine) = self.engine.get() {
                    let _ = engine.invoke_slot(slot, args, wait);
                }
            }
            None => self.log.debug("bus", format!("dropping message on unrouted topic `{}`", msg.topic)),
        }
    }

    /// Closes an open recording, if any. Used on shutdown.
    pub fn finalize_recording(&self) {
        if self.recorder.is_active() {
            if let Err(e) = self.recorder.stop() {
                self.log.error(COMPONENT, format!("could not finalize recording: {e}"));
            }
        }
    }
}
