//! Copy-everything dispatch path, modeling a runtime that lives in a
//! separate proxy process.
//!
//! Every request is serialized into a byte message and handed to an executor
//! thread that owns the call into the lower half; the reply comes back the
//! same way. The client keeps shadow copies of kernel buffer arguments, ships
//! them with each launch and receives the updated contents afterwards, the
//! way shadow-page proxies keep the application's view and the runtime's
//! memory in step.
//!
//! Stream work executes eagerly on the executor, so the client's shadows are
//! exact at every call boundary.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::call::{CallError, Lower, Reply, Request};
use crate::device::AllocId;

#[derive(Serialize, Deserialize)]
enum ToExecutor {
    /// `shadows` lists `(allocation, blob length)` for the trailing blobs.
    Call {
        req: Request,
        shadows: Vec<(AllocId, u64)>,
    },
    Fetch(AllocId),
}

#[derive(Serialize, Deserialize)]
enum FromExecutor {
    Reply {
        result: Result<Reply, CallError>,
        updated: Vec<(AllocId, u64)>,
    },
    Contents(Result<u64, CallError>),
}

/// Frame: `header_len:u32 | bincode header | blobs`, written into `out`
/// (cleared first, capacity kept).
fn frame_into<H: Serialize>(out: &mut Vec<u8>, header: &H, blobs: &[&[u8]]) {
    let head = bincode::serialize(header).expect("proxy header serializes");
    out.clear();
    out.reserve(4 + head.len() + blobs.iter().map(|b| b.len()).sum::<usize>());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for b in blobs {
        out.extend_from_slice(b);
    }
}

fn unframe<H: for<'de> Deserialize<'de>>(msg: &[u8]) -> Result<(H, &[u8]), CallError> {
    let bad = |e: String| CallError::Proxy(format!("bad frame: {e}"));
    let len = msg
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| bad("short".into()))?;
    let head = msg.get(4..4 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header = bincode::deserialize(head).map_err(|e| bad(e.to_string()))?;
    Ok((header, &msg[4 + len..]))
}

/// Splits `blobs` by the listed lengths.
fn split_blobs<'a>(mut blobs: &'a [u8], lens: &[(AllocId, u64)]) -> Result<Vec<(AllocId, &'a [u8])>, CallError> {
    let mut out = Vec::with_capacity(lens.len());
    for &(id, len) in lens {
        if blobs.len() < len as usize {
            return Err(CallError::Proxy("blob overruns frame".into()));
        }
        let (head, rest) = blobs.split_at(len as usize);
        out.push((id, head));
        blobs = rest;
    }
    Ok(out)
}

/// Message buffers travel both ways so their capacity is reused instead of
/// faulting in fresh pages for every large transfer.
type Message = (Vec<u8>, Vec<u8>);

struct Link {
    tx: Sender<Message>,
    rx: Receiver<Message>,
    /// Next request is built here.
    request: Vec<u8>,
    /// Handed to the executor to build its reply in.
    reply: Vec<u8>,
}

impl Link {
    /// Sends `self.request`; afterwards `self.reply` holds the answer.
    fn round_trip(&mut self) -> Result<(), CallError> {
        let gone = || CallError::Proxy("executor gone".into());
        let msg = (std::mem::take(&mut self.request), std::mem::take(&mut self.reply));
        self.tx.send(msg).map_err(|_| gone())?;
        let (reply, request) = self.rx.recv().map_err(|_| gone())?;
        self.reply = reply;
        self.request = request;
        Ok(())
    }
}

pub struct ProxyChannel {
    link: Mutex<Link>,
    shadows: Mutex<HashMap<AllocId, Vec<u8>>>,
    bytes_moved: AtomicU64,
    executor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ProxyChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProxyChannel")
            .field("bytes_moved", &self.bytes_moved())
            .finish_non_exhaustive()
    }
}

impl ProxyChannel {
    pub fn spawn(lower: Lower) -> Self {
        let (to_exec, exec_rx) = channel::<Message>();
        let (exec_tx, from_exec) = channel::<Message>();
        let executor = std::thread::Builder::new()
            .name("proxy-executor".into())
            .spawn(move || {
                while let Ok((request, mut reply)) = exec_rx.recv() {
                    serve(&lower, &request, &mut reply);
                    if exec_tx.send((reply, request)).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn proxy executor");
        Self {
            link: Mutex::new(Link {
                tx: to_exec,
                rx: from_exec,
                request: Vec::new(),
                reply: Vec::new(),
            }),
            shadows: Mutex::new(HashMap::new()),
            bytes_moved: AtomicU64::new(0),
            executor: Some(executor),
        }
    }

    /// Total bytes that crossed the boundary in either direction.
    pub fn bytes_moved(&self) -> u64 {
        self.bytes_moved.load(Ordering::Relaxed)
    }

    fn send(&self, link: &mut Link) -> Result<(), CallError> {
        self.bytes_moved.fetch_add(link.request.len() as u64, Ordering::Relaxed);
        link.round_trip()?;
        self.bytes_moved.fetch_add(link.reply.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn fetch(&self, link: &mut Link, id: AllocId) -> Result<Option<Vec<u8>>, CallError> {
        frame_into(&mut link.request, &ToExecutor::Fetch(id), &[]);
        self.send(link)?;
        match unframe::<FromExecutor>(&link.reply)? {
            (FromExecutor::Contents(Ok(len)), blob) if blob.len() as u64 == len => Ok(Some(blob.to_vec())),
            (FromExecutor::Contents(Err(_)), _) => Ok(None),
            _ => Err(CallError::Proxy("unexpected fetch reply".into())),
        }
    }

    pub fn call(&self, req: Request) -> Result<Reply, CallError> {
        let mut link = self.link.lock();
        let link = &mut *link;
        let mut shadows = self.shadows.lock();

        let mut ship: Vec<AllocId> = Vec::new();
        if let Request::LaunchKernel { buffers, .. } = &req {
            for b in buffers {
                if ship.contains(&b.id) {
                    continue;
                }
                if let std::collections::hash_map::Entry::Vacant(slot) = shadows.entry(b.id) {
                    match self.fetch(link, b.id)? {
                        Some(bytes) => {
                            slot.insert(bytes);
                        }
                        None => continue,
                    }
                }
                ship.push(b.id);
            }
        }
        match &req {
            Request::Free { id } => {
                shadows.remove(id);
            }
            Request::Upload { dst, .. } | Request::WriteHost { dst, .. } | Request::Memcpy { dst, .. } => {
                shadows.remove(&dst.id);
            }
            Request::PageAccess { id, write: Some(_), .. } => {
                shadows.remove(id);
            }
            _ => {}
        }

        let lens: Vec<(AllocId, u64)> = ship.iter().map(|id| (*id, shadows[id].len() as u64)).collect();
        let blobs: Vec<&[u8]> = ship.iter().map(|id| shadows[id].as_slice()).collect();
        frame_into(&mut link.request, &ToExecutor::Call { req, shadows: lens }, &blobs);
        self.send(link)?;
        let (FromExecutor::Reply { result, updated }, rest) = unframe::<FromExecutor>(&link.reply)? else {
            return Err(CallError::Proxy("unexpected call reply".into()));
        };
        for (id, blob) in split_blobs(rest, &updated)? {
            match shadows.get_mut(&id) {
                Some(s) if s.len() == blob.len() => s.copy_from_slice(blob),
                _ => {
                    shadows.insert(id, blob.to_vec());
                }
            }
        }
        result
    }
}

impl Drop for ProxyChannel {
    fn drop(&mut self) {
        // closing the request channel stops the executor loop
        let (tx, _) = channel();
        drop(std::mem::replace(&mut self.link.get_mut().tx, tx));
        if let Some(h) = self.executor.take() {
            let _ = h.join();
        }
    }
}

fn serve(lower: &Lower, msg: &[u8], out: &mut Vec<u8>) {
    let reply = |out: &mut Vec<u8>, result: Result<Reply, CallError>| {
        frame_into(
            out,
            &FromExecutor::Reply {
                result,
                updated: vec![],
            },
            &[],
        )
    };
    let (header, blobs) = match unframe::<ToExecutor>(msg) {
        Ok(v) => v,
        Err(e) => return reply(out, Err(e)),
    };
    match header {
        ToExecutor::Fetch(id) => match lower.device.contents(id) {
            Ok(bytes) => frame_into(out, &FromExecutor::Contents(Ok(bytes.len() as u64)), &[&bytes]),
            Err(e) => frame_into(out, &FromExecutor::Contents(Err(e.into())), &[]),
        },
        ToExecutor::Call { req, shadows } => {
            let incoming = match split_blobs(blobs, &shadows) {
                Ok(v) => v,
                Err(e) => return reply(out, Err(e)),
            };
            for (id, bytes) in incoming {
                if let Err(e) = lower.device.overwrite(id, bytes) {
                    return reply(out, Err(e.into()));
                }
            }
            let launched: Vec<AllocId> = match &req {
                Request::LaunchKernel { buffers, .. } => {
                    let mut ids: Vec<AllocId> = Vec::new();
                    for b in buffers {
                        if !ids.contains(&b.id) {
                            ids.push(b.id);
                        }
                    }
                    ids
                }
                _ => vec![],
            };
            let eager = matches!(
                req,
                Request::LaunchKernel { .. } | Request::Memcpy { stream: Some(_), .. }
            );
            let result = lower.execute(req);
            if result.is_err() {
                return reply(out, result);
            }
            if eager {
                lower.device.synchronize();
            }
            let mut lens = Vec::with_capacity(launched.len());
            for &id in &launched {
                match lower.device.record(id) {
                    Some(r) => lens.push((id, r.size)),
                    None => return reply(out, Err(crate::device::DeviceError::UnknownId(id).into())),
                }
            }
            // header first, then each buffer's bytes straight from the device
            frame_into(out, &FromExecutor::Reply { result, updated: lens }, &[]);
            for id in launched {
                if let Err(e) = lower.device.append_contents(id, out) {
                    return reply(out, Err(e.into()));
                }
            }
        }
    }
}
