//! Embedded Python engine.
//!
//! One dedicated thread owns the interpreter namespace. Everything that
//! touches script code (interactive evaluation, callbacks, the startup script)
//! is submitted to that thread as a job and runs strictly one at a time.
//! Jobs submitted from the engine thread itself, e.g. from inside a host API
//! call, run inline.

mod value;

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::{self, JoinHandle, ThreadId};
use std::time::{Duration, Instant};

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyModule, PyTuple};
use thiserror::Error;

use crate::logging::Logger;

pub use value::Value;

const COMPONENT: &str = "engine";
const PRELUDE: &str = include_str!("prelude.py");

/// Source extension of script files for this engine.
pub const SCRIPT_EXTENSION: &str = "py";

const SHUTDOWN_DEADLINE: Duration = Duration::from_secs(5);

static ENGINE_LIVE: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("an engine is already running in this process")]
    SingletonViolation,
    #[error("engine initialisation failed: {0}")]
    InitFailure(String),
    #[error("engine has stopped")]
    Stopped,
    #[error("unknown callback slot `{0}`")]
    UnknownSlot(String),
}

/// Named script callbacks the host can invoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    RemoteCommand,
    NodeStatusUpdate,
    TiltScanData,
    MoveArmActionComplete,
    Timer,
}

impl Slot {
    pub const ALL: [Slot; 5] =
        [Slot::RemoteCommand, Slot::NodeStatusUpdate, Slot::TiltScanData, Slot::MoveArmActionComplete, Slot::Timer];

    pub fn name(self) -> &'static str {
        match self {
            Slot::RemoteCommand => "onRemoteCommand",
            Slot::NodeStatusUpdate => "onNodeStatusUpdate",
            Slot::TiltScanData => "onTiltScanData",
            Slot::MoveArmActionComplete => "onMoveArmActionComplete",
            Slot::Timer => "onTimer",
        }
    }

    pub fn from_name(name: &str) -> Result<Slot, EngineError> {
        Slot::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| EngineError::UnknownSlot(name.to_string()))
    }
}

/// Callback storage shared between the engine and the host module setters.
#[derive(Default)]
pub struct CallbackSlots {
    slots: Mutex<HashMap<Slot, Py<PyAny>>>,
}

impl CallbackSlots {
    pub fn set(&self, slot: Slot, callable: Option<Py<PyAny>>) {
        let mut slots = self.slots.lock().unwrap();
        match callable {
            Some(f) => slots.insert(slot, f),
            None => slots.remove(&slot),
        };
    }

    pub fn get(&self, py: Python<'_>, slot: Slot) -> Option<Py<PyAny>> {
        self.slots.lock().unwrap().get(&slot).map(|f| f.clone_ref(py))
    }

    pub fn is_filled(&self, slot: Slot) -> bool {
        self.slots.lock().unwrap().contains_key(&slot)
    }

    fn clear(&self) -> Vec<Py<PyAny>> {
        self.slots.lock().unwrap().drain().map(|(_, f)| f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completeness {
    Complete,
    Incomplete,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStatus {
    Complete,
    Incomplete,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptError {
    pub kind: String,
    pub message: String,
    pub traceback: String,
}

/// Outcome of one interactive evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub output: String,
    pub value_repr: Option<String>,
    pub error: Option<ScriptError>,
    pub status: EvalStatus,
}

impl EvalResult {
    fn stopped() -> Self {
        EvalResult {
            output: String::new(),
            value_repr: None,
            error: Some(ScriptError {
                kind: "EngineStopped".into(),
                message: "engine has stopped".into(),
                traceback: "EngineStopped: engine has stopped\n".into(),
            }),
            status: EvalStatus::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub found: bool,
    pub path: PathBuf,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub module_name: String,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { module_name: "robot".into() }
    }
}

/// State living on the engine thread.
pub struct EngineContext {
    namespace: Py<PyDict>,
    prelude: Py<PyModule>,
    slots: Arc<CallbackSlots>,
    log: Logger,
}

impl EngineContext {
    pub fn namespace<'py>(&self, py: Python<'py>) -> &Bound<'py, PyDict> {
        self.namespace.bind(py)
    }

    fn call_slot(&self, py: Python<'_>, slot: Slot, args: &[Value]) {
        let Some(callable) = self.slots.get(py, slot) else {
            self.log.debug(COMPONENT, format!("{} not set, call ignored", slot.name()));
            return;
        };
        let outcome = args
            .iter()
            .map(|a| a.to_python(py))
            .collect::<PyResult<Vec<_>>>()
            .and_then(|args| PyTuple::new(py, args))
            .and_then(|args| self.prelude.bind(py).getattr("invoke")?.call1((callable, args)))
            .and_then(|r| r.extract::<Option<String>>());
        match outcome {
            Ok(None) => {}
            Ok(Some(tb)) => self.log.error(COMPONENT, format!("callback {} raised:\n{}", slot.name(), tb.trim_end())),
            Err(err) => self.log.error(COMPONENT, format!("callback {} failed: {err}", slot.name())),
        }
    }
}

type Job = Box<dyn FnOnce(Python<'_>, &EngineContext) + Send>;

enum Message {
    Run(Job),
    Stop,
}

thread_local! {
    static CONTEXT: RefCell<Option<Rc<EngineContext>>> = const { RefCell::new(None) };
}

/// Cheap, cloneable access to the engine from any thread.
#[derive(Clone)]
pub struct EngineHandle {
    tx: mpsc::Sender<Message>,
    thread: ThreadId,
    slots: Arc<CallbackSlots>,
    log: Logger,
}

impl EngineHandle {
    pub fn on_engine_thread(&self) -> bool {
        thread::current().id() == self.thread
    }

    /// Runs `f` on the engine and waits for the result.
    pub fn run<R, F>(&self, f: F) -> Result<R, EngineError>
    where
        R: Send + 'static,
        F: FnOnce(Python<'_>, &EngineContext) -> R + Send + 'static,
    {
        if self.on_engine_thread() {
            let ctx = CONTEXT.with(|c| c.borrow().clone()).ok_or(EngineError::Stopped)?;
            return Ok(Python::attach(|py| f(py, &ctx)));
        }
        let (done_tx, done_rx) = mpsc::sync_channel(1);
        let job: Job = Box::new(move |py, ctx| {
            let _ = done_tx.send(f(py, ctx));
        });
        self.tx.send(Message::Run(job)).map_err(|_| EngineError::Stopped)?;
        done_rx.recv().map_err(|_| EngineError::Stopped)
    }

    /// Queues `f` behind everything already submitted and returns immediately.
    pub fn post<F>(&self, f: F) -> Result<(), EngineError>
    where
        F: FnOnce(Python<'_>, &EngineContext) + Send + 'static,
    {
        self.tx.send(Message::Run(Box::new(f))).map_err(|_| EngineError::Stopped)
    }

    /// Waits until every job submitted before this call has finished.
    pub fn sync(&self) -> Result<(), EngineError> {
        self.run(|_, _| ())
    }

    pub fn eval_interactive(&self, source: &str) -> EvalResult {
        let source = source.to_string();
        self.run(move |py, ctx| evaluate(py, ctx, &source)).unwrap_or_else(|_| EvalResult::stopped())
    }

    pub fn check_complete(&self, source: &str) -> Completeness {
        let source = source.to_string();
        self.run(move |py, ctx| {
            let verdict = ctx
                .prelude
                .bind(py)
                .getattr("classify")
                .and_then(|f| f.call1((source,)))
                .and_then(|v| v.extract::<String>());
            match verdict.as_deref() {
                Ok("complete") => Completeness::Complete,
                Ok("incomplete") => Completeness::Incomplete,
                _ => Completeness::Invalid,
            }
        })
        .unwrap_or(Completeness::Invalid)
    }

    pub fn is_slot_filled(&self, slot: Slot) -> bool {
        self.slots.is_filled(slot)
    }

    pub fn slots(&self) -> &Arc<CallbackSlots> {
        &self.slots
    }

    /// Invokes a callback slot by name and waits for it to finish.
    pub fn invoke_callback(&self, slot: &str, args: Vec<Value>) -> Result<(), EngineError> {
        let slot = Slot::from_name(slot)?;
        self.invoke_slot(slot, args, true)
    }

    /// Invokes a callback slot. Script exceptions are logged, never returned.
    pub fn invoke_slot(&self, slot: Slot, args: Vec<Value>, wait: bool) -> Result<(), EngineError> {
        self.invoke_batch(vec![(slot, args)], wait)
    }

    pub fn invoke_batch(&self, calls: Vec<(Slot, Vec<Value>)>, wait: bool) -> Result<(), EngineError> {
        if calls.is_empty() {
            return Ok(());
        }
        let job = move |py: Python<'_>, ctx: &EngineContext| {
            for (slot, args) in calls {
                ctx.call_slot(py, slot, &args);
            }
        };
        if wait {
            self.run(job)
        } else {
            self.post(job)
        }
    }

    /// Executes `<scripts_dir>/<name>.py` in the shared namespace if present.
    /// The scripts directory is also put on the import path.
    pub fn load_startup_script(&self, scripts_dir: &Path, name: &str) -> LoadReport {
        let path = scripts_dir.join(format!("{name}.{SCRIPT_EXTENSION}"));
        if !path.is_file() {
            self.log.info(COMPONENT, format!("no startup script at {}", path.display()));
            return LoadReport { found: false, path, error: None };
        }
        let dir = scripts_dir.to_string_lossy().into_owned();
        let file = path.to_string_lossy().into_owned();
        let outcome = self.run(move |py, ctx| -> Result<Option<String>, String> {
            let sys_path = py.import("sys").and_then(|s| s.getattr("path")).map_err(|e| e.to_string())?;
            let sys_path = sys_path.cast_into::<PyList>().map_err(|e| e.to_string())?;
            if !sys_path.contains(&dir).unwrap_or(false) {
                sys_path.insert(0, &dir).map_err(|e| e.to_string())?;
            }
            ctx.prelude
                .bind(py)
                .getattr("run_file")
                .and_then(|f| f.call1((file, ctx.namespace.bind(py))))
                .and_then(|r| r.extract::<Option<String>>())
                .map_err(|e| e.to_string())
        });
        let error = match outcome {
            Ok(Ok(None)) => None,
            Ok(Ok(Some(tb))) => Some(tb),
            Ok(Err(e)) => Some(e),
            Err(e) => Some(e.to_string()),
        };
        match &error {
            None => self.log.info(COMPONENT, format!("startup script {} loaded", path.display())),
            Some(tb) => {
                self.log.error(COMPONENT, format!("startup script {} failed:\n{}", path.display(), tb.trim_end()))
            }
        }
        LoadReport { found: true, path, error }
    }
}

fn evaluate(py: Python<'_>, ctx: &EngineContext, source: &str) -> EvalResult {
    type Raw = (String, String, Option<String>, Option<String>, Option<String>, Option<String>);
    let raw = ctx
        .prelude
        .bind(py)
        .getattr("evaluate")
        .and_then(|f| f.call1((source, ctx.namespace.bind(py))))
        .and_then(|r| r.extract::<Raw>());
    match raw {
        Ok((status, output, value_repr, kind, message, traceback)) => {
            let status = match status.as_str() {
                "complete" => EvalStatus::Complete,
                "incomplete" => EvalStatus::Incomplete,
                _ => EvalStatus::Error,
            };
            let error = (status == EvalStatus::Error).then(|| ScriptError {
                kind: kind.unwrap_or_default(),
                message: message.unwrap_or_default(),
                traceback: traceback.unwrap_or_default(),
            });
            EvalResult { output, value_repr, error, status }
        }
        Err(err) => {
            ctx.log.error(COMPONENT, format!("evaluation machinery failed: {err}"));
            EvalResult {
                output: String::new(),
                value_repr: None,
                error: Some(ScriptError {
                    kind: "InternalError".into(),
                    message: err.to_string(),
                    traceback: format!("InternalError: {err}\n"),
                }),
                status: EvalStatus::Error,
            }
        }
    }
}

/// Installs host objects into a freshly created namespace and returns the
/// object to publish under the configured module name.
pub type Installer = Box<dyn FnOnce(Python<'_>, &Bound<'_, PyDict>, Arc<CallbackSlots>) -> PyResult<Py<PyAny>> + Send>;

/// Owner of the engine thread. Dropping it stops the engine.
pub struct Engine {
    handle: EngineHandle,
    thread: Option<JoinHandle<()>>,
}

impl Engine {
    /// Starts the engine thread, creates the namespace and registers the
    /// host module. At most one engine may be alive per process.
    pub fn boot(options: EngineOptions, log: Logger, install: Installer) -> Result<Engine, EngineError> {
        if ENGINE_LIVE.swap(true, Ordering::SeqCst) {
            return Err(EngineError::SingletonViolation);
        }
        match Engine::spawn(log) {
            Ok(engine) => {
                let module_name = options.module_name;
                match engine.handle.run(move |py, ctx| install_host(py, ctx, install, &module_name)) {
                    Ok(Ok(())) => Ok(engine),
                    Ok(Err(e)) => Err(EngineError::InitFailure(e)),
                    Err(e) => Err(EngineError::InitFailure(e.to_string())),
                }
            }
            Err(e) => {
                ENGINE_LIVE.store(false, Ordering::SeqCst);
                Err(e)
            }
        }
    }

    fn spawn(log: Logger) -> Result<Engine, EngineError> {
        let (tx, rx) = mpsc::channel::<Message>();
        let (init_tx, init_rx) = mpsc::sync_channel::<Result<Arc<CallbackSlots>, String>>(1);
        let thread_log = log.clone();
        let join = thread::Builder::new()
            .name("engine".into())
            .spawn(move || engine_main(rx, init_tx, thread_log))
            .map_err(|e| EngineError::InitFailure(e.to_string()))?;
        let slots = match init_rx.recv() {
            Ok(Ok(slots)) => slots,
            Ok(Err(e)) => {
                let _ = join.join();
                return Err(EngineError::InitFailure(e));
            }
            Err(_) => {
                let _ = join.join();
                return Err(EngineError::InitFailure("engine thread exited during boot".into()));
            }
        };
        let handle = EngineHandle { tx, thread: join.thread().id(), slots, log };
        Ok(Engine { handle, thread: Some(join) })
    }

    pub fn handle(&self) -> EngineHandle {
        self.handle.clone()
    }

    /// Stops the engine thread after the jobs already queued. Idempotent.
    pub fn shutdown(&mut self) {
        self.shutdown_within(SHUTDOWN_DEADLINE);
    }

    /// Like [`Engine::shutdown`], but gives up waiting after `deadline`,
    /// e.g. when a script never returns. Returns whether the thread stopped.
    pub fn shutdown_within(&mut self, deadline: Duration) -> bool {
        let Some(join) = self.thread.take() else { return true };
        let _ = self.handle.tx.send(Message::Stop);
        let start = Instant::now();
        while !join.is_finished() && start.elapsed() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        if !join.is_finished() {
            self.handle.log.error(COMPONENT, "engine did not stop before the deadline; abandoning it");
            return false;
        }
        let _ = join.join();
        ENGINE_LIVE.store(false, Ordering::SeqCst);
        self.handle.log.info(COMPONENT, "engine stopped");
        true
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn install_host(py: Python<'_>, ctx: &EngineContext, install: Installer, module_name: &str) -> Result<(), String> {
    let ns = ctx.namespace.bind(py);
    let host = install(py, ns, ctx.slots.clone()).map_err(|e| e.to_string())?;
    ns.set_item(module_name, host.bind(py)).map_err(|e| e.to_string())?;
    py.import("sys")
        .and_then(|sys| sys.getattr("modules"))
        .and_then(|m| m.set_item(module_name, host.bind(py)))
        .map_err(|e| e.to_string())?;
    ctx.log.info(COMPONENT, format!("host module `{module_name}` registered"));
    Ok(())
}

fn engine_main(
    rx: mpsc::Receiver<Message>,
    init: mpsc::SyncSender<Result<Arc<CallbackSlots>, String>>,
    log: Logger,
) {
    let slots = Arc::new(CallbackSlots::default());
    let setup = Python::attach(|py| -> PyResult<EngineContext> {
        let code = CString::new(PRELUDE).expect("prelude has no NUL bytes");
        let prelude = PyModule::from_code(py, &code, c"<ride-prelude>", c"_ride_prelude")?;
        let namespace = PyDict::new(py);
        namespace.set_item("__name__", "__main__")?;
        namespace.set_item("__builtins__", py.import("builtins")?)?;
        Ok(EngineContext {
            namespace: namespace.unbind(),
            prelude: prelude.unbind(),
            slots: slots.clone(),
            log: log.clone(),
        })
    });
    let ctx = match setup {
        Ok(ctx) => Rc::new(ctx),
        Err(err) => {
            let _ = init.send(Err(err.to_string()));
            return;
        }
    };
    CONTEXT.with(|c| *c.borrow_mut() = Some(ctx.clone()));
    let _ = init.send(Ok(slots));
    log.info(COMPONENT, "engine started");

    while let Ok(message) = rx.recv() {
        match message {
            Message::Run(job) => Python::attach(|py| {
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| job(py, &ctx)));
                if outcome.is_err() {
                    log.error(COMPONENT, "host job panicked; engine continues");
                }
            }),
            Message::Stop => break,
        }
    }

    CONTEXT.with(|c| c.borrow_mut().take());
    Python::attach(|py| {
        let dropped = ctx.slots.clear();
        drop(dropped);
        ctx.namespace.bind(py).clear();
        let _ = py.run(c"import gc; gc.collect()", None, None);
    });
}
