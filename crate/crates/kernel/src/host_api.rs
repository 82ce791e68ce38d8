//! The `robot` object scripts use to drive the robot.

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyTypeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyTuple};
use ride_core::bag::{RecordMask, REC_CAM, REC_SCAN, REC_TF};
use ride_core::sim::{ArmCommand, Side, SimError};

use crate::engine::{CallbackSlots, Installer, Slot, Value};
use crate::kernel::{state_json, Kernel};

const COMPONENT: &str = "host";
const DEFAULT_TIMER_PERIOD: f64 = 1.0;

#[pyclass(frozen, name = "Robot", module = "ride")]
pub struct Robot {
    kernel: Arc<Kernel>,
    slots: Arc<CallbackSlots>,
}

/// Accepts `"left"`/`"right"` (or `l`/`r`) and `True` for left, `False` for right.
fn parse_side(side: &Bound<'_, PyAny>) -> PyResult<Side> {
    if let Ok(b) = side.cast::<PyBool>() {
        return Ok(if b.is_true() { Side::Left } else { Side::Right });
    }
    let name: String = side.extract().map_err(|_| PyTypeError::new_err("side must be 'left', 'right' or a bool"))?;
    Side::parse(&name.to_ascii_lowercase())
        .ok_or_else(|| PyValueError::new_err(format!("unknown arm side {name:?}, expected 'left' or 'right'")))
}

impl Robot {
    fn set_slot(&self, slot: Slot, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        match value.filter(|v| !v.is_none()) {
            None => self.slots.set(slot, None),
            Some(f) if f.is_callable() => self.slots.set(slot, Some(f.clone().unbind())),
            Some(f) => {
                return Err(PyTypeError::new_err(format!(
                    "{} expects a callable or None, got {}",
                    slot.name(),
                    f.get_type().name()?
                )))
            }
        }
        Ok(())
    }

    fn get_slot(&self, py: Python<'_>, slot: Slot) -> Option<Py<PyAny>> {
        self.slots.get(py, slot)
    }

    fn warn(&self, message: String) {
        self.kernel.log().warn(COMPONENT, message);
    }
}

#[allow(non_snake_case)]
#[pymethods]
impl Robot {
    #[classattr]
    const REC_CAM: u8 = REC_CAM;
    #[classattr]
    const REC_SCAN: u8 = REC_SCAN;
    #[classattr]
    const REC_TF: u8 = REC_TF;

    fn tuckBothArms(&self) -> bool {
        self.kernel.with_sim(|s| s.tuck_arms())
    }

    #[pyo3(signature = (side, positions, time_to_reach = 2.0))]
    fn moveArmWithJointPos(&self, side: &Bound<'_, PyAny>, positions: BTreeMap<String, f64>, time_to_reach: f64) -> PyResult<bool> {
        let side = parse_side(side)?;
        if !(time_to_reach.is_finite() && time_to_reach >= 0.0) || positions.values().any(|v| !v.is_finite()) {
            self.warn("moveArmWithJointPos: non-finite or negative argument".into());
            return Ok(false);
        }
        match self.kernel.with_sim(|s| s.set_joint_targets(side, &positions, time_to_reach)) {
            Ok(ArmCommand::Accepted) => Ok(true),
            Ok(ArmCommand::Rejected) => Ok(false),
            Err(e) => {
                self.warn(format!("moveArmWithJointPos: {e}"));
                Ok(false)
            }
        }
    }

    fn getArmJointPositions(&self, side: &Bound<'_, PyAny>) -> PyResult<BTreeMap<String, f64>> {
        let side = parse_side(side)?;
        Ok(self.kernel.with_sim(|s| s.state().arm(side).positions()))
    }

    fn moveTorsoBy(&self, delta: f64) -> bool {
        if !delta.is_finite() {
            return false;
        }
        self.kernel.with_sim(|s| s.move_torso_by(delta)).unwrap_or(false)
    }

    fn moveHeadTo(&self, frame: &str, x: f64, y: f64, z: f64) -> bool {
        if ![x, y, z].iter().all(|v| v.is_finite()) {
            return false;
        }
        match self.kernel.with_sim(|s| s.look_at(frame, x, y, z)) {
            Ok(_) => true,
            Err(e) => {
                self.warn(format!("moveHeadTo: {e}"));
                false
            }
        }
    }

    fn pointHeadTo(&self, frame: &str, x: f64, y: f64, z: f64) -> bool {
        self.moveHeadTo(frame, x, y, z)
    }

    fn setToMannequinMode(&self, on: bool) -> bool {
        self.kernel.with_sim(|s| s.set_mannequin(on))
    }

    fn startJoystickControl(&self) -> bool {
        self.kernel.with_sim(|s| s.start_joystick())
    }

    fn stopJoystickControl(&self) -> bool {
        self.kernel.with_sim(|s| s.stop_joystick())
    }

    fn setTiltLaserPeriodic(&self, speed: f64, amplitude: f64) -> bool {
        self.kernel.with_sim(|s| s.set_tilt_laser_periodic(speed, amplitude))
    }

    fn stopTiltLaser(&self) -> bool {
        self.kernel.with_sim(|s| s.stop_tilt_laser());
        true
    }

    fn startDataRecording(&self, mask: i64) -> bool {
        let Some(mask) = u32::try_from(mask).ok().and_then(|m| RecordMask::new(m).ok()) else {
            self.warn(format!("startDataRecording: invalid mask {mask}"));
            return false;
        };
        match self.kernel.recorder().start(mask) {
            Ok(_) => true,
            Err(e) => {
                self.warn(format!("startDataRecording: {e}"));
                false
            }
        }
    }

    fn stopDataRecording(&self) -> bool {
        self.kernel.recorder().stop().is_ok()
    }

    fn sendCustomTelemetry(&self, label: &str, payload: &str) -> bool {
        self.kernel.telemetry().broadcast_custom(label, payload);
        true
    }

    /// Places arm joints directly; only available in mannequin mode.
    fn setPoseDirect(&self, positions: BTreeMap<String, f64>) -> bool {
        if positions.values().any(|v| !v.is_finite()) {
            return false;
        }
        match self.kernel.with_sim(|s| s.set_pose_direct(&positions)) {
            Ok(clamped) => {
                if !clamped.is_empty() {
                    self.warn(format!("setPoseDirect: clamped {} to joint limits", clamped.join(", ")));
                }
                true
            }
            Err(SimError::NotInMannequinMode) => false,
            Err(e) => {
                self.warn(format!("setPoseDirect: {e}"));
                false
            }
        }
    }

    fn getRobotState<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let state = self.kernel.snapshot();
        Value::from(serde_json::Value::Object(state_json(&state, self.kernel.now()))).to_python(py)
    }

    fn getTime(&self) -> f64 {
        self.kernel.now()
    }

    /// Advances virtual time, running due callbacks. False in realtime mode
    /// or when called from inside a tick.
    fn advanceTime(&self, seconds: f64) -> bool {
        match self.kernel.advance(seconds) {
            Ok(_) => true,
            Err(e) => {
                self.warn(format!("advanceTime: {e}"));
                false
            }
        }
    }

    #[getter]
    fn get_onRemoteCommand(&self, py: Python<'_>) -> Option<Py<PyAny>> {
        self.get_slot(py, Slot::RemoteCommand)
    }

    #[setter]
    fn set_onRemoteCommand(&self, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        self.set_slot(Slot::RemoteCommand, value)
    }

    #[getter]
    fn get_onNodeStatusUpdate(&self, py: Python<'_>) -> Option<Py<PyAny>> {
        self.get_slot(py, Slot::NodeStatusUpdate)
    }

    #[setter]
    fn set_onNodeStatusUpdate(&self, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        self.set_slot(Slot::NodeStatusUpdate, value)
    }

    #[getter]
    fn get_onTiltScanData(&self, py: Python<'_>) -> Option<Py<PyAny>> {
        self.get_slot(py, Slot::TiltScanData)
    }

    #[setter]
    fn set_onTiltScanData(&self, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        self.set_slot(Slot::TiltScanData, value)
    }

    #[getter]
    fn get_onMoveArmActionComplete(&self, py: Python<'_>) -> Option<Py<PyAny>> {
        self.get_slot(py, Slot::MoveArmActionComplete)
    }

    #[setter]
    fn set_onMoveArmActionComplete(&self, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        self.set_slot(Slot::MoveArmActionComplete, value)
    }

    #[getter]
    fn get_onTimer(&self, py: Python<'_>) -> Option<Py<PyAny>> {
        self.get_slot(py, Slot::Timer)
    }

    /// Takes a callable (fired every second) or a `(callable, period)` pair.
    #[setter]
    fn set_onTimer(&self, value: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        let Some(value) = value.filter(|v| !v.is_none()) else {
            self.slots.set(Slot::Timer, None);
            self.kernel.set_timer(None);
            return Ok(());
        };
        let (callable, period) = match value.cast::<PyTuple>() {
            Ok(pair) if pair.len() == 2 => (pair.get_item(0)?, pair.get_item(1)?.extract::<f64>()?),
            Ok(_) => return Err(PyTypeError::new_err("onTimer expects a callable or (callable, period)")),
            Err(_) => (value.clone(), DEFAULT_TIMER_PERIOD),
        };
        if !(period.is_finite() && period > 0.0) {
            return Err(PyValueError::new_err("timer period must be positive"));
        }
        self.set_slot(Slot::Timer, Some(&callable))?;
        self.kernel.set_timer(Some(period));
        Ok(())
    }

    fn __repr__(&self) -> String {
        "<robot host module>".to_string()
    }
}

/// Builds the namespace installer that publishes the host object and the
/// recording mask constants.
pub fn installer(kernel: Arc<Kernel>) -> Installer {
    Box::new(move |py, ns: &Bound<'_, PyDict>, slots| {
        ns.set_item("REC_CAM", REC_CAM)?;
        ns.set_item("REC_SCAN", REC_SCAN)?;
        ns.set_item("REC_TF", REC_TF)?;
        let robot = Py::new(py, Robot { kernel, slots })?;
        Ok(robot.into_any())
    })
}
