//! Running programs natively, under a session, and across a restart.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::metrics::{Stats, TimingReport};
use super::workload::{program, resume, Program, WorkloadSpec};
use super::HarnessError;
use crate::device::{Device, KernelLibrary};
use crate::engine::Session;
use crate::shim::{CallError, CallName, DispatchMode, Lower, Reply, Request, Runtime};

type Result<T> = std::result::Result<T, HarnessError>;

/// Arena size used for workload sessions.
pub const WORKLOAD_ARENA: u64 = 1 << 34;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Straight into the lower half: no shim, no log.
    Native,
    /// Through the shim's direct dispatch path.
    Direct,
    /// Through the shim's copy-everything proxy path.
    Proxy,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Native => "native",
            Mode::Direct => "direct",
            Mode::Proxy => "proxy",
        }
    }

    pub fn dispatch(self) -> Option<DispatchMode> {
        match self {
            Mode::Native => None,
            Mode::Direct => Some(DispatchMode::Direct),
            Mode::Proxy => Some(DispatchMode::Proxy),
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "native" => Ok(Mode::Native),
            "direct" => Ok(Mode::Direct),
            "proxy" => Ok(Mode::Proxy),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

/// Counts calls by name on their way to another runtime.
pub struct Counting<R> {
    inner: R,
    counts: [AtomicU64; CallName::ALL.len()],
}

impl<R: Runtime> Counting<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            counts: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }

    pub fn counts(&self) -> BTreeMap<CallName, u64> {
        CallName::ALL
            .iter()
            .zip(&self.counts)
            .map(|(&n, c)| (n, c.load(Ordering::Relaxed)))
            .filter(|&(_, c)| c > 0)
            .collect()
    }
}

impl<R: Runtime> Runtime for Counting<R> {
    fn call(&self, req: Request) -> std::result::Result<Reply, CallError> {
        let idx = req.name() as usize;
        self.counts[idx].fetch_add(1, Ordering::Relaxed);
        self.inner.call(req)
    }
}

/// Result of one complete run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub digest: u64,
    pub elapsed: Duration,
    pub call_counts: BTreeMap<CallName, u64>,
}

/// Drives every lane of a program to completion (or until stopped), one
/// thread per lane. With a session, each step holds the session's step gate.
struct Driver<'a> {
    program: &'a dyn Program,
    rt: &'a dyn Runtime,
    session: Option<&'a Session>,
    /// Checkpoint and stop once this many steps are done.
    pause_at: Option<u64>,
    stopped: AtomicBool,
    /// Set by the lane that takes the checkpoint.
    claimed: AtomicBool,
    done: AtomicU64,
    image: Mutex<Option<Result<Vec<u8>>>>,
}

impl<'a> Driver<'a> {
    fn new(program: &'a dyn Program, rt: &'a dyn Runtime, session: Option<&'a Session>) -> Self {
        Self {
            program,
            rt,
            session,
            pause_at: None,
            stopped: AtomicBool::new(false),
            claimed: AtomicBool::new(false),
            done: AtomicU64::new(program.steps_done()),
            image: Mutex::new(None),
        }
    }

    fn pause(&self, session: &Session) {
        let snap = session.checkpoint_with(|| Some(self.program.save()));
        *self.image.lock() = Some(snap.map(|s| session.encode(&s)).map_err(HarnessError::from));
        self.stopped.store(true, Ordering::Release);
    }

    fn lane(&self, lane: usize) -> Result<()> {
        loop {
            let guard = self.session.map(Session::enter);
            if self.stopped.load(Ordering::Acquire) {
                return Ok(());
            }
            let stepped = self.program.step(lane, self.rt)?;
            drop(guard);
            if !stepped {
                return Ok(());
            }
            let done = self.done.fetch_add(1, Ordering::AcqRel) + 1;
            if let (Some(at), Some(session)) = (self.pause_at, self.session) {
                if done >= at && !self.claimed.swap(true, Ordering::AcqRel) {
                    self.pause(session);
                }
            }
        }
    }

    fn run(&self) -> Result<()> {
        if let (Some(0), Some(session)) = (self.pause_at, self.session) {
            self.pause(session);
            return Ok(());
        }
        let lanes = self.program.spec().lanes();
        if lanes == 1 {
            return self.lane(0);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..lanes).map(|l| s.spawn(move || self.lane(l))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("workload lane panicked"))
                .collect::<Result<Vec<()>>>()
        })?;
        Ok(())
    }
}

/// Builds a session for `mode` (not Native).
pub fn new_session(spec: &WorkloadSpec, dispatch: DispatchMode) -> Result<Session> {
    Ok(Session::new(
        spec.seed,
        WORKLOAD_ARENA,
        dispatch,
        Arc::new(KernelLibrary::builtin()),
    )?)
}

/// Runs `program` to completion on an existing session.
pub fn run_on_session(program: &dyn Program, session: &Session) -> Result<RunOutcome> {
    let rt = Counting::new(session.shim());
    let started = Instant::now();
    Driver::new(program, &rt, Some(session)).run()?;
    let elapsed = started.elapsed();
    session.set_app_state(program.save());
    Ok(RunOutcome {
        digest: program.digest(),
        elapsed,
        call_counts: rt.counts(),
    })
}

/// One complete uninterrupted run.
pub fn run_workload(spec: &WorkloadSpec, mode: Mode) -> Result<RunOutcome> {
    let prog = program(*spec)?;
    match mode.dispatch() {
        None => {
            let device = Arc::new(Device::new(spec.seed, WORKLOAD_ARENA)?);
            let rt = Counting::new(Lower::new(device, Arc::new(KernelLibrary::builtin())));
            let started = Instant::now();
            Driver::new(&*prog, &rt, None).run()?;
            Ok(RunOutcome {
                digest: prog.digest(),
                elapsed: started.elapsed(),
                call_counts: rt.counts(),
            })
        }
        Some(dispatch) => run_on_session(&*prog, &new_session(spec, dispatch)?),
    }
}

/// Runs until `at` steps are done, checkpoints to an image and stops.
/// Returns the encoded image.
pub fn run_until_checkpoint(spec: &WorkloadSpec, dispatch: DispatchMode, at: u64) -> Result<Vec<u8>> {
    let prog = program(*spec)?;
    let session = new_session(spec, dispatch)?;
    let rt = Counting::new(session.shim());
    let mut driver = Driver::new(&*prog, &rt, Some(&session));
    driver.pause_at = Some(at);
    driver.run()?;
    let image = driver.image.lock().take();
    match image {
        Some(r) => r,
        // the program finished before reaching `at`; checkpoint the end state
        None => Ok(session.encode(&session.checkpoint_with(|| Some(prog.save()))?)),
    }
}

/// Restarts from an image and finishes the program it carries.
pub fn restart_and_finish(image: &[u8], dispatch: DispatchMode) -> Result<RunOutcome> {
    let session = Session::restart_from_image(image, dispatch, Arc::new(KernelLibrary::builtin()))?;
    let prog = resume(&session.app_state())?;
    run_on_session(&*prog, &session)
}

/// Checkpoint after `at` steps, restart from the image and finish. Returns
/// the final digest.
pub fn run_with_restart(spec: &WorkloadSpec, dispatch: DispatchMode, at: u64) -> Result<u64> {
    let image = run_until_checkpoint(spec, dispatch, at)?;
    Ok(restart_and_finish(&image, dispatch)?.digest)
}

/// Runs `spec` `repeats` times in each mode, interleaving the modes.
/// Fails if the modes disagree on the digest.
pub fn measure(spec: &WorkloadSpec, repeats: usize) -> Result<TimingReport> {
    let mut samples: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut digest = None;
    for _ in 0..repeats.max(1) {
        for mode in [Mode::Native, Mode::Direct, Mode::Proxy] {
            let out = run_workload(spec, mode)?;
            if *digest.get_or_insert(out.digest) != out.digest {
                return Err(HarnessError::Readback(format!(
                    "{} digest differs from native",
                    mode.as_str()
                )));
            }
            samples
                .entry(mode.as_str())
                .or_default()
                .push(out.elapsed.as_secs_f64());
            if mode == Mode::Native {
                counts = out.call_counts;
            }
        }
    }
    let mut take = |m: Mode| Stats::of(samples.remove(m.as_str()).unwrap_or_default());
    let e_native = take(Mode::Native);
    Ok(TimingReport {
        duration: e_native.mean,
        e_direct: take(Mode::Direct),
        e_proxy: take(Mode::Proxy),
        e_native,
        call_counts: counts,
        threads: spec.lanes(),
    })
}
