//! The runtime call surface: one request type per entry point, and the
//! lower-half entry functions the dispatch table points at.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::device::{
    Access, AllocId, AllocationKind, AllocationRecord, BinaryHandle, BufferRef, CopyDirection, Device, DeviceError,
    KernelLibrary, Side, StreamId,
};

/// Every entry point the application can reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CallName {
    Alloc,
    Free,
    StreamCreate,
    StreamDestroy,
    RegisterBinary,
    UnregisterBinary,
    LaunchKernel,
    Memcpy,
    Upload,
    Download,
    WriteHost,
    ReadHost,
    PageAccess,
    Synchronize,
}

impl CallName {
    pub const ALL: [CallName; 14] = [
        CallName::Alloc,
        CallName::Free,
        CallName::StreamCreate,
        CallName::StreamDestroy,
        CallName::RegisterBinary,
        CallName::UnregisterBinary,
        CallName::LaunchKernel,
        CallName::Memcpy,
        CallName::Upload,
        CallName::Download,
        CallName::WriteHost,
        CallName::ReadHost,
        CallName::PageAccess,
        CallName::Synchronize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CallName::Alloc => "alloc",
            CallName::Free => "free",
            CallName::StreamCreate => "stream_create",
            CallName::StreamDestroy => "stream_destroy",
            CallName::RegisterBinary => "register_fat_binary",
            CallName::UnregisterBinary => "unregister_fat_binary",
            CallName::LaunchKernel => "launch_kernel",
            CallName::Memcpy => "memcpy",
            CallName::Upload => "upload",
            CallName::Download => "download",
            CallName::WriteHost => "write_host",
            CallName::ReadHost => "read_host",
            CallName::PageAccess => "page_access",
            CallName::Synchronize => "synchronize",
        }
    }

    /// Allocation family, registration and stream lifetime calls go to the log.
    pub fn is_logged(self) -> bool {
        matches!(
            self,
            CallName::Alloc
                | CallName::Free
                | CallName::StreamCreate
                | CallName::StreamDestroy
                | CallName::RegisterBinary
                | CallName::UnregisterBinary
        )
    }
}

impl std::fmt::Display for CallName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Alloc {
        kind: AllocationKind,
        size: u64,
    },
    Free {
        id: AllocId,
    },
    StreamCreate,
    StreamDestroy {
        stream: StreamId,
    },
    /// Kernels by id, resolved against the application's kernel library.
    RegisterBinary {
        kernels: Vec<String>,
    },
    UnregisterBinary {
        handle: BinaryHandle,
    },
    LaunchKernel {
        stream: StreamId,
        kernel: String,
        buffers: Vec<BufferRef>,
        scalars: Vec<u64>,
    },
    Memcpy {
        dst: BufferRef,
        src: BufferRef,
        len: u64,
        direction: CopyDirection,
        stream: Option<StreamId>,
    },
    Upload {
        dst: BufferRef,
        data: Vec<u8>,
    },
    Download {
        src: BufferRef,
        len: u64,
    },
    WriteHost {
        dst: BufferRef,
        data: Vec<u8>,
    },
    ReadHost {
        src: BufferRef,
        len: u64,
    },
    PageAccess {
        id: AllocId,
        offset: u64,
        side: Side,
        /// Bytes to write; `None` reads `len` bytes.
        write: Option<Vec<u8>>,
        len: u64,
    },
    Synchronize,
}

impl Request {
    pub fn name(&self) -> CallName {
        match self {
            Request::Alloc { .. } => CallName::Alloc,
            Request::Free { .. } => CallName::Free,
            Request::StreamCreate => CallName::StreamCreate,
            Request::StreamDestroy { .. } => CallName::StreamDestroy,
            Request::RegisterBinary { .. } => CallName::RegisterBinary,
            Request::UnregisterBinary { .. } => CallName::UnregisterBinary,
            Request::LaunchKernel { .. } => CallName::LaunchKernel,
            Request::Memcpy { .. } => CallName::Memcpy,
            Request::Upload { .. } => CallName::Upload,
            Request::Download { .. } => CallName::Download,
            Request::WriteHost { .. } => CallName::WriteHost,
            Request::ReadHost { .. } => CallName::ReadHost,
            Request::PageAccess { .. } => CallName::PageAccess,
            Request::Synchronize => CallName::Synchronize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reply {
    Unit,
    Record(AllocationRecord),
    Stream(StreamId),
    Binary(BinaryHandle),
    Bytes(Vec<u8>),
    Count(u64),
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("kernel {0:?} is not in the application's kernel library")]
    UnknownKernel(String),
    #[error("proxy channel failure: {0}")]
    Proxy(String),
    #[error("{call} answered with an unexpected reply")]
    UnexpectedReply { call: CallName },
    #[error("malformed {0} request")]
    Malformed(CallName),
}

/// Lower half as seen by the dispatch table: the device plus the kernel
/// library used to resolve registrations.
#[derive(Clone, Debug)]
pub struct Lower {
    pub device: Arc<Device>,
    pub library: Arc<KernelLibrary>,
}

impl Lower {
    pub fn new(device: Arc<Device>, library: Arc<KernelLibrary>) -> Self {
        Self { device, library }
    }

    /// Executes without any interposition (the uninstrumented path).
    pub fn execute(&self, req: Request) -> Result<Reply, CallError> {
        entry_for(req.name())(self, req)
    }
}

/// Signature of a dispatch-table entry.
pub type Entry = fn(&Lower, Request) -> Result<Reply, CallError>;

/// The lower-half entry point for `name`.
pub fn entry_for(name: CallName) -> Entry {
    match name {
        CallName::Alloc => entry_alloc,
        CallName::Free => entry_free,
        CallName::StreamCreate => entry_stream_create,
        CallName::StreamDestroy => entry_stream_destroy,
        CallName::RegisterBinary => entry_register,
        CallName::UnregisterBinary => entry_unregister,
        CallName::LaunchKernel => entry_launch,
        CallName::Memcpy => entry_memcpy,
        CallName::Upload => entry_upload,
        CallName::Download => entry_download,
        CallName::WriteHost => entry_write_host,
        CallName::ReadHost => entry_read_host,
        CallName::PageAccess => entry_page_access,
        CallName::Synchronize => entry_synchronize,
    }
}

fn entry_alloc(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::Alloc { kind, size } = req else {
        return Err(CallError::Malformed(CallName::Alloc));
    };
    Ok(Reply::Record(l.device.alloc(kind, size)?))
}

fn entry_free(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::Free { id } = req else {
        return Err(CallError::Malformed(CallName::Free));
    };
    Ok(Reply::Record(l.device.free(id)?))
}

fn entry_stream_create(l: &Lower, _req: Request) -> Result<Reply, CallError> {
    Ok(Reply::Stream(l.device.stream_create()?))
}

fn entry_stream_destroy(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::StreamDestroy { stream } = req else {
        return Err(CallError::Malformed(CallName::StreamDestroy));
    };
    l.device.stream_destroy(stream)?;
    Ok(Reply::Unit)
}

fn entry_register(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::RegisterBinary { kernels } = req else {
        return Err(CallError::Malformed(CallName::RegisterBinary));
    };
    let descriptors = kernels
        .iter()
        .map(|k| {
            l.library
                .get(k)
                .cloned()
                .ok_or_else(|| CallError::UnknownKernel(k.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Reply::Binary(l.device.register_fat_binary(descriptors)?))
}

fn entry_unregister(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::UnregisterBinary { handle } = req else {
        return Err(CallError::Malformed(CallName::UnregisterBinary));
    };
    l.device.unregister_fat_binary(handle)?;
    Ok(Reply::Unit)
}

fn entry_launch(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::LaunchKernel {
        stream,
        kernel,
        buffers,
        scalars,
    } = req
    else {
        return Err(CallError::Malformed(CallName::LaunchKernel));
    };
    l.device.launch_kernel(stream, &kernel, &buffers, &scalars)?;
    Ok(Reply::Unit)
}

fn entry_memcpy(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::Memcpy {
        dst,
        src,
        len,
        direction,
        stream,
    } = req
    else {
        return Err(CallError::Malformed(CallName::Memcpy));
    };
    l.device.memcpy(dst, src, len, direction, stream)?;
    Ok(Reply::Unit)
}

fn entry_upload(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::Upload { dst, data } = req else {
        return Err(CallError::Malformed(CallName::Upload));
    };
    l.device.upload(dst, &data)?;
    Ok(Reply::Unit)
}

fn entry_download(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::Download { src, len } = req else {
        return Err(CallError::Malformed(CallName::Download));
    };
    Ok(Reply::Bytes(l.device.download(src, len)?))
}

fn entry_write_host(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::WriteHost { dst, data } = req else {
        return Err(CallError::Malformed(CallName::WriteHost));
    };
    l.device.write_host(dst, &data)?;
    Ok(Reply::Unit)
}

fn entry_read_host(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::ReadHost { src, len } = req else {
        return Err(CallError::Malformed(CallName::ReadHost));
    };
    Ok(Reply::Bytes(l.device.read_host(src, len)?))
}

fn entry_page_access(l: &Lower, req: Request) -> Result<Reply, CallError> {
    let Request::PageAccess {
        id,
        offset,
        side,
        write,
        len,
    } = req
    else {
        return Err(CallError::Malformed(CallName::PageAccess));
    };
    let access = match &write {
        Some(data) => Access::Write(data),
        None => Access::Read(len),
    };
    Ok(Reply::Bytes(l.device.page_access(id, offset, side, access)?))
}

fn entry_synchronize(l: &Lower, _req: Request) -> Result<Reply, CallError> {
    Ok(Reply::Count(l.device.synchronize()))
}

/// Anything that accepts runtime calls: the bare lower half, or the shim.
pub trait Runtime: Send + Sync {
    fn call(&self, req: Request) -> Result<Reply, CallError>;
}

impl Runtime for Lower {
    fn call(&self, req: Request) -> Result<Reply, CallError> {
        self.execute(req)
    }
}

impl<R: Runtime + ?Sized> Runtime for Arc<R> {
    fn call(&self, req: Request) -> Result<Reply, CallError> {
        (**self).call(req)
    }
}

impl<R: Runtime + ?Sized> Runtime for &R {
    fn call(&self, req: Request) -> Result<Reply, CallError> {
        (**self).call(req)
    }
}

fn unexpected(call: CallName) -> CallError {
    CallError::UnexpectedReply { call }
}

/// Typed wrappers over [`Runtime::call`].
pub trait RuntimeExt: Runtime {
    fn alloc(&self, kind: AllocationKind, size: u64) -> Result<AllocationRecord, CallError> {
        match self.call(Request::Alloc { kind, size })? {
            Reply::Record(r) => Ok(r),
            _ => Err(unexpected(CallName::Alloc)),
        }
    }

    fn free(&self, id: AllocId) -> Result<(), CallError> {
        self.call(Request::Free { id }).map(drop)
    }

    fn stream_create(&self) -> Result<StreamId, CallError> {
        match self.call(Request::StreamCreate)? {
            Reply::Stream(s) => Ok(s),
            _ => Err(unexpected(CallName::StreamCreate)),
        }
    }

    fn stream_destroy(&self, stream: StreamId) -> Result<(), CallError> {
        self.call(Request::StreamDestroy { stream }).map(drop)
    }

    fn register_binary<S: AsRef<str>>(&self, kernels: &[S]) -> Result<BinaryHandle, CallError> {
        let kernels = kernels.iter().map(|k| k.as_ref().to_owned()).collect();
        match self.call(Request::RegisterBinary { kernels })? {
            Reply::Binary(h) => Ok(h),
            _ => Err(unexpected(CallName::RegisterBinary)),
        }
    }

    fn unregister_binary(&self, handle: BinaryHandle) -> Result<(), CallError> {
        self.call(Request::UnregisterBinary { handle }).map(drop)
    }

    fn launch(&self, stream: StreamId, kernel: &str, buffers: &[BufferRef], scalars: &[u64]) -> Result<(), CallError> {
        self.call(Request::LaunchKernel {
            stream,
            kernel: kernel.to_owned(),
            buffers: buffers.to_vec(),
            scalars: scalars.to_vec(),
        })
        .map(drop)
    }

    fn memcpy(
        &self,
        dst: BufferRef,
        src: BufferRef,
        len: u64,
        direction: CopyDirection,
        stream: Option<StreamId>,
    ) -> Result<(), CallError> {
        self.call(Request::Memcpy {
            dst,
            src,
            len,
            direction,
            stream,
        })
        .map(drop)
    }

    fn upload(&self, dst: BufferRef, data: &[u8]) -> Result<(), CallError> {
        self.call(Request::Upload {
            dst,
            data: data.to_vec(),
        })
        .map(drop)
    }

    fn download(&self, src: BufferRef, len: u64) -> Result<Vec<u8>, CallError> {
        match self.call(Request::Download { src, len })? {
            Reply::Bytes(b) => Ok(b),
            _ => Err(unexpected(CallName::Download)),
        }
    }

    fn write_host(&self, dst: BufferRef, data: &[u8]) -> Result<(), CallError> {
        self.call(Request::WriteHost {
            dst,
            data: data.to_vec(),
        })
        .map(drop)
    }

    fn read_host(&self, src: BufferRef, len: u64) -> Result<Vec<u8>, CallError> {
        match self.call(Request::ReadHost { src, len })? {
            Reply::Bytes(b) => Ok(b),
            _ => Err(unexpected(CallName::ReadHost)),
        }
    }

    fn page_read(&self, id: AllocId, offset: u64, len: u64, side: Side) -> Result<Vec<u8>, CallError> {
        match self.call(Request::PageAccess {
            id,
            offset,
            side,
            write: None,
            len,
        })? {
            Reply::Bytes(b) => Ok(b),
            _ => Err(unexpected(CallName::PageAccess)),
        }
    }

    fn page_write(&self, id: AllocId, offset: u64, data: &[u8], side: Side) -> Result<(), CallError> {
        self.call(Request::PageAccess {
            id,
            offset,
            side,
            len: data.len() as u64,
            write: Some(data.to_vec()),
        })
        .map(drop)
    }

    fn synchronize(&self) -> Result<u64, CallError> {
        match self.call(Request::Synchronize)? {
            Reply::Count(n) => Ok(n),
            _ => Err(unexpected(CallName::Synchronize)),
        }
    }
}

impl<R: Runtime + ?Sized> RuntimeExt for R {}
