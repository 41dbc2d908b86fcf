//! Interposition layer between the application and the device runtime.
//!
//! All application calls go through a [`DispatchTable`] of entry points into
//! the lower half. Allocation-family, registration and stream-lifetime calls
//! are additionally appended to a [`CallLog`] under a single lock that also
//! covers the device-side mutation, so the log order is the order in which
//! the allocator actually saw the calls. Everything else passes through
//! unlogged.

mod call;
mod log;
mod proxy;
mod region;

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use call::{entry_for, CallError, CallName, Entry, Lower, Reply, Request, Runtime, RuntimeExt};
pub use log::{active_set, kind_code, kind_from_code, BinaryRecord, CallLog, CallLogEntry, LogOp};
pub use proxy::ProxyChannel;
pub use region::{Classification, Half, Perms, Region, RegionError, RegionMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DispatchMode {
    /// Calls jump straight into the lower half.
    Direct,
    /// Calls cross a serialize-and-copy boundary to an executor thread.
    Proxy,
}

/// Entry points by call name, plus the route they are reached through.
#[derive(Debug)]
pub struct DispatchTable {
    entries: BTreeMap<CallName, Entry>,
    mode: DispatchMode,
    lower: Lower,
    proxy: Option<ProxyChannel>,
}

impl DispatchTable {
    pub fn new(lower: Lower, mode: DispatchMode) -> Self {
        let entries = CallName::ALL.iter().map(|&n| (n, entry_for(n))).collect();
        let proxy = match mode {
            DispatchMode::Direct => None,
            DispatchMode::Proxy => Some(ProxyChannel::spawn(lower.clone())),
        };
        Self {
            entries,
            mode,
            lower,
            proxy,
        }
    }

    pub fn mode(&self) -> DispatchMode {
        self.mode
    }

    pub fn lower(&self) -> &Lower {
        &self.lower
    }

    pub fn names(&self) -> impl Iterator<Item = CallName> + '_ {
        self.entries.keys().copied()
    }

    pub fn entry(&self, name: CallName) -> Option<Entry> {
        self.entries.get(&name).copied()
    }

    /// Bytes moved across the proxy boundary so far (zero in direct mode).
    pub fn proxy_bytes(&self) -> u64 {
        self.proxy.as_ref().map_or(0, ProxyChannel::bytes_moved)
    }

    pub fn invoke(&self, req: Request) -> Result<Reply, CallError> {
        match &self.proxy {
            Some(p) => p.call(req),
            None => (self.entries[&req.name()])(&self.lower, req),
        }
    }
}

/// Dispatch table plus call log.
#[derive(Debug)]
pub struct Shim {
    table: DispatchTable,
    log: Mutex<CallLog>,
}

impl Shim {
    pub fn new(lower: Lower, mode: DispatchMode) -> Self {
        Self::with_log(lower, mode, CallLog::new())
    }

    /// Continues an existing log (after a restart).
    pub fn with_log(lower: Lower, mode: DispatchMode, log: CallLog) -> Self {
        Self {
            table: DispatchTable::new(lower, mode),
            log: Mutex::new(log),
        }
    }

    pub fn table(&self) -> &DispatchTable {
        &self.table
    }

    pub fn lower(&self) -> &Lower {
        self.table.lower()
    }

    pub fn log(&self) -> CallLog {
        self.log.lock().clone()
    }

    pub fn log_len(&self) -> usize {
        self.log.lock().len()
    }

    pub fn active_set(&self) -> Vec<crate::device::AllocationRecord> {
        self.log.lock().active_set()
    }
}

impl Runtime for Shim {
    fn call(&self, req: Request) -> Result<Reply, CallError> {
        let name = req.name();
        if !name.is_logged() {
            return self.table.invoke(req);
        }
        let mut log = self.log.lock();
        let registered = match &req {
            Request::RegisterBinary { kernels } => Some(kernels.clone()),
            _ => None,
        };
        let (op, id) = match &req {
            Request::Free { id } => (Some(LogOp::Free), id.0),
            Request::StreamDestroy { stream } => (Some(LogOp::StreamDestroy), stream.0),
            Request::UnregisterBinary { handle } => (Some(LogOp::UnregisterBinary), handle.0),
            _ => (None, 0),
        };
        let reply = self.table.invoke(req)?;
        match (&reply, name) {
            (Reply::Record(rec), CallName::Alloc) => log.push_alloc(rec),
            (Reply::Stream(s), CallName::StreamCreate) => log.push(LogOp::StreamCreate, s.0),
            (Reply::Binary(h), CallName::RegisterBinary) => log.push_register(*h, registered.unwrap_or_default()),
            (_, CallName::UnregisterBinary) => log.push_unregister(crate::device::BinaryHandle(id)),
            _ => {
                if let Some(op) = op {
                    log.push(op, id);
                }
            }
        }
        Ok(reply)
    }
}

#[cfg(test)]
mod tests;
