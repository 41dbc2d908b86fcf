use std::collections::VecDeque;

use super::{BufferRef, CopyDirection, StreamId};

/// Upper bound on concurrently live streams.
pub const MAX_STREAMS: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum TaskOp {
    Kernel {
        kernel: String,
        buffers: Vec<BufferRef>,
        scalars: Vec<u64>,
    },
    Copy {
        dst: BufferRef,
        src: BufferRef,
        len: u64,
        direction: CopyDirection,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Task {
    /// Device-wide enqueue sequence number.
    pub seq: u64,
    pub op: TaskOp,
}

/// One FIFO of pending work plus its completion counter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    id: StreamId,
    pub(crate) queue: VecDeque<Task>,
    pub(crate) completed: u64,
}

impl StreamState {
    pub(crate) fn new(id: StreamId) -> Self {
        Self {
            id,
            queue: VecDeque::new(),
            completed: 0,
        }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }
}
