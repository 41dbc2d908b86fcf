//! Checkpoint triggers that fire from outside the application's threads.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{CheckpointInfo, Result, Session};

const POLL: Duration = Duration::from_millis(2);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trigger {
    /// Fire once this much time has passed since the watcher started.
    After(Duration),
    /// Fire when the file appears (a portable stand-in for a signal).
    OnFile(PathBuf),
}

impl Trigger {
    fn fired(&self, started: Instant) -> bool {
        match self {
            Trigger::After(d) => started.elapsed() >= *d,
            Trigger::OnFile(p) => p.exists(),
        }
    }
}

type SaveFn = Box<dyn Fn() -> Option<Vec<u8>> + Send>;

/// Background thread that checkpoints a session to `image` once, when its
/// trigger fires.
pub struct Watcher {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Option<Result<CheckpointInfo>>>>,
}

impl Watcher {
    pub fn spawn(
        session: Arc<Session>,
        trigger: Trigger,
        image: PathBuf,
        compressed: bool,
        save: impl Fn() -> Option<Vec<u8>> + Send + 'static,
    ) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let save: SaveFn = Box::new(save);
        let handle = std::thread::Builder::new()
            .name("ckpt-trigger".into())
            .spawn(move || {
                let started = Instant::now();
                while !flag.load(Ordering::Acquire) {
                    if trigger.fired(started) {
                        return Some(session.checkpoint_to(&image, compressed, save));
                    }
                    std::thread::sleep(POLL);
                }
                None
            })
            .expect("spawn trigger watcher");
        Self {
            stop,
            handle: Some(handle),
        }
    }

    /// Stops watching. Returns the checkpoint outcome if the trigger fired.
    pub fn finish(mut self) -> Option<Result<CheckpointInfo>> {
        self.stop.store(true, Ordering::Release);
        self.handle
            .take()
            .and_then(|h| h.join().expect("trigger watcher panicked"))
    }
}

impl Drop for Watcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
