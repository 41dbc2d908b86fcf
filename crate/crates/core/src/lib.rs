//! Checkpoint-restart engine for a simulated accelerator runtime.
//!
//! The application talks to a [`device::Device`] through a [`shim::Shim`],
//! which logs every allocation-family call. The [`engine`] drains the device,
//! saves active allocations plus that log into an [`image`], and restarts by
//! replaying the log against a fresh device. The [`harness`] has the
//! workloads and metrics used to measure all of this.

pub mod device;
pub mod engine;
pub mod harness;
pub mod image;
pub mod shim;

pub use device::{
    AllocId, AllocationKind, AllocationRecord, BinaryHandle, BufferRef, CopyDirection, Device, DeviceError, DevicePtr,
    KernelDescriptor, KernelLibrary, Side, StreamId,
};
pub use engine::{EngineError, Session, Snapshot};
pub use image::ImageError;
pub use shim::{CallError, CallLog, CallLogEntry, DispatchMode, LogOp, Runtime, RuntimeExt, Shim};
