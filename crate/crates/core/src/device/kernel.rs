//! Kernel descriptors and the built-in kernel catalog.
//!
//! A kernel is a named, deterministic transformation over a list of byte
//! buffers and a list of 64-bit scalars. There is no instruction-level
//! simulation: the body is plain Rust. Descriptors travel in checkpoint
//! images by name and arity only, and are resolved again through a
//! [`KernelLibrary`] at restart.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// Kernel body: `(buffers, scalars)`. Buffers are distinct allocations, each
/// sliced from the launch offset to the end of the allocation.
pub type KernelBody = Arc<dyn Fn(&mut [&mut [u8]], &[u64]) + Send + Sync>;

/// Launch-time argument check: `(buffer lengths, scalars)`.
pub type KernelCheck = fn(&[usize], &[u64]) -> Result<(), String>;

#[derive(Clone)]
pub struct KernelDescriptor {
    name: String,
    buffers: usize,
    scalars: usize,
    check: Option<KernelCheck>,
    body: KernelBody,
}

impl KernelDescriptor {
    pub fn new(
        name: impl Into<String>,
        buffers: usize,
        scalars: usize,
        body: impl Fn(&mut [&mut [u8]], &[u64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            buffers,
            scalars,
            check: None,
            body: Arc::new(body),
        }
    }

    pub fn with_check(mut self, check: KernelCheck) -> Self {
        self.check = Some(check);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `(buffer arguments, scalar arguments)`.
    pub fn arity(&self) -> (usize, usize) {
        (self.buffers, self.scalars)
    }

    pub(crate) fn check(&self, lens: &[usize], scalars: &[u64]) -> Result<(), String> {
        match self.check {
            Some(check) => check(lens, scalars),
            None => Ok(()),
        }
    }

    pub(crate) fn run(&self, buffers: &mut [&mut [u8]], scalars: &[u64]) {
        (self.body)(buffers, scalars)
    }
}

impl PartialEq for KernelDescriptor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.buffers == other.buffers && self.scalars == other.scalars
    }
}

impl Eq for KernelDescriptor {}

impl fmt::Debug for KernelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelDescriptor")
            .field("name", &self.name)
            .field("buffers", &self.buffers)
            .field("scalars", &self.scalars)
            .finish()
    }
}

/// Name-indexed set of kernels an application can register. Plays the role
/// of the kernel code embedded in the application binary.
#[derive(Clone, Debug, Default)]
pub struct KernelLibrary {
    kernels: BTreeMap<String, KernelDescriptor>,
}

impl KernelLibrary {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Library holding every kernel in [`builtin`].
    pub fn builtin() -> Self {
        let mut lib = Self::empty();
        for k in builtin::all() {
            lib.insert(k);
        }
        lib
    }

    pub fn insert(&mut self, kernel: KernelDescriptor) {
        self.kernels.insert(kernel.name.clone(), kernel);
    }

    pub fn get(&self, name: &str) -> Option<&KernelDescriptor> {
        self.kernels.get(name)
    }

    /// Looks up several kernels at once; `None` if any name is missing.
    pub fn resolve<S: AsRef<str>>(&self, names: &[S]) -> Option<Vec<KernelDescriptor>> {
        names.iter().map(|n| self.get(n.as_ref()).cloned()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }
}

/// Built-in kernels used by the synthetic workloads and tests.
pub mod builtin {
    use super::KernelDescriptor;

    pub const FILL: &str = "fill";
    pub const ADD_AT_OFFSET: &str = "add_at_offset";
    pub const INIT_ARRAY: &str = "init_array";
    pub const TRANSFORM: &str = "transform";
    pub const SDOT: &str = "sdot";
    pub const SGEMV: &str = "sgemv";
    pub const SGEMM: &str = "sgemm";

    pub fn all() -> Vec<KernelDescriptor> {
        vec![
            fill(),
            add_at_offset(),
            init_array(),
            transform(),
            sdot(),
            sgemv(),
            sgemm(),
        ]
    }

    fn need(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
        if ok {
            Ok(())
        } else {
            Err(what())
        }
    }

    fn f32_bytes(count: u64) -> Option<usize> {
        usize::try_from(count.checked_mul(4)?).ok()
    }

    /// `fill(dst; value, len)`: the first `len` bytes of `dst` become `value as u8`.
    pub fn fill() -> KernelDescriptor {
        KernelDescriptor::new(FILL, 1, 2, |bufs, s| {
            bufs[0][..s[1] as usize].fill(s[0] as u8);
        })
        .with_check(|lens, s| need(s[1] <= lens[0] as u64, || format!("fill of {} bytes", s[1])))
    }

    /// `add_at_offset(dst; offset, len, delta)`: wrapping byte add over a subrange.
    pub fn add_at_offset() -> KernelDescriptor {
        KernelDescriptor::new(ADD_AT_OFFSET, 1, 3, |bufs, s| {
            let (off, len, delta) = (s[0] as usize, s[1] as usize, s[2] as u8);
            for b in &mut bufs[0][off..off + len] {
                *b = b.wrapping_add(delta);
            }
        })
        .with_check(|lens, s| {
            need(s[0].checked_add(s[1]).is_some_and(|end| end <= lens[0] as u64), || {
                format!("range {}+{} exceeds {}", s[0], s[1], lens[0])
            })
        })
    }

    /// `init_array(dst; value, count, iterations)`: each of `count` u32 lanes
    /// gets `value` added `iterations` times.
    pub fn init_array() -> KernelDescriptor {
        KernelDescriptor::new(INIT_ARRAY, 1, 3, |bufs, s| {
            let (value, count, iters) = (s[0] as u32, s[1] as usize, s[2]);
            for lane in bufs[0][..count * 4].chunks_exact_mut(4) {
                let mut x = u32::from_le_bytes(lane.try_into().unwrap());
                for _ in 0..iters {
                    x = x.wrapping_add(value);
                }
                lane.copy_from_slice(&x.to_le_bytes());
            }
        })
        .with_check(|lens, s| {
            need(f32_bytes(s[1]).is_some_and(|b| b <= lens[0]), || {
                format!("{} lanes", s[1])
            })
        })
    }

    /// Host-side reference of the `transform` kernel, shared so host tasks and
    /// device tasks compute the same function.
    pub fn transform_u32(bytes: &mut [u8], count: usize, mul: u32, add: u32) {
        for lane in bytes[..count * 4].chunks_exact_mut(4) {
            let x = u32::from_le_bytes(lane.try_into().unwrap());
            lane.copy_from_slice(&x.wrapping_mul(mul).wrapping_add(add).to_le_bytes());
        }
    }

    /// `transform(dst; count, mul, add)`: `x = x * mul + add` over `count` u32 lanes.
    pub fn transform() -> KernelDescriptor {
        KernelDescriptor::new(TRANSFORM, 1, 3, |bufs, s| {
            transform_u32(bufs[0], s[0] as usize, s[1] as u32, s[2] as u32)
        })
        .with_check(|lens, s| {
            need(f32_bytes(s[0]).is_some_and(|b| b <= lens[0]), || {
                format!("{} lanes", s[0])
            })
        })
    }

    pub(crate) fn load_f32(bytes: &[u8], out: &mut Vec<f32>) {
        out.clear();
        out.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
    }

    /// Dot product with a fixed 8-way accumulation order.
    pub fn dot_f32(x: &[u8], y: &[u8], n: usize) -> f32 {
        let x = &x[..n * 4];
        let y = &y[..n * 4];
        let mut acc = [0f32; 8];
        let mut xs = x.chunks_exact(32);
        let mut ys = y.chunks_exact(32);
        for (xb, yb) in xs.by_ref().zip(ys.by_ref()) {
            for lane in 0..8 {
                let a = f32::from_le_bytes(xb[lane * 4..lane * 4 + 4].try_into().unwrap());
                let b = f32::from_le_bytes(yb[lane * 4..lane * 4 + 4].try_into().unwrap());
                acc[lane] += a * b;
            }
        }
        let mut tail = 0f32;
        for (a, b) in xs.remainder().chunks_exact(4).zip(ys.remainder().chunks_exact(4)) {
            tail += f32::from_le_bytes(a.try_into().unwrap()) * f32::from_le_bytes(b.try_into().unwrap());
        }
        let pair = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
        (pair[0] + pair[2]) + (pair[1] + pair[3]) + tail
    }

    /// `sdot(x, y, out; n)`: `out[0] = x · y` as little-endian f32.
    pub fn sdot() -> KernelDescriptor {
        KernelDescriptor::new(SDOT, 3, 1, |bufs, s| {
            let n = s[0] as usize;
            let r = dot_f32(bufs[0], bufs[1], n);
            bufs[2][..4].copy_from_slice(&r.to_le_bytes());
        })
        .with_check(|lens, s| {
            let b = f32_bytes(s[0]).unwrap_or(usize::MAX);
            need(b <= lens[0] && b <= lens[1] && lens[2] >= 4, || {
                format!("sdot n={}", s[0])
            })
        })
    }

    /// `sgemv(a, x, y; m, n)`: `y = A x` with `A` row-major `m × n`.
    pub fn sgemv() -> KernelDescriptor {
        KernelDescriptor::new(SGEMV, 3, 2, |bufs, s| {
            let (m, n) = (s[0] as usize, s[1] as usize);
            let mut out = Vec::with_capacity(m);
            {
                let a = &bufs[0][..m * n * 4];
                let x = &bufs[1][..n * 4];
                for row in a.chunks_exact(n * 4) {
                    out.push(dot_f32(row, x, n));
                }
            }
            for (dst, v) in bufs[2].chunks_exact_mut(4).zip(out) {
                dst.copy_from_slice(&v.to_le_bytes());
            }
        })
        .with_check(|lens, s| {
            let a = s[0].checked_mul(s[1]).and_then(f32_bytes);
            need(
                s[1] > 0
                    && a.is_some_and(|a| a <= lens[0])
                    && f32_bytes(s[1]).is_some_and(|b| b <= lens[1])
                    && f32_bytes(s[0]).is_some_and(|b| b <= lens[2]),
                || format!("sgemv m={} n={}", s[0], s[1]),
            )
        })
    }

    /// `sgemm(a, b, c; m, n, k)`: `C = A B` with row-major `A: m × k`,
    /// `B: k × n`, `C: m × n`.
    pub fn sgemm() -> KernelDescriptor {
        KernelDescriptor::new(SGEMM, 3, 3, |bufs, s| {
            let (m, n, k) = (s[0] as usize, s[1] as usize, s[2] as usize);
            let mut a = Vec::new();
            let mut b = Vec::new();
            load_f32(&bufs[0][..m * k * 4], &mut a);
            load_f32(&bufs[1][..k * n * 4], &mut b);
            let mut row = vec![0f32; n];
            for (i, c_row) in bufs[2][..m * n * 4].chunks_exact_mut(n * 4).enumerate() {
                row.fill(0.0);
                for p in 0..k {
                    let aip = a[i * k + p];
                    for (r, bpj) in row.iter_mut().zip(&b[p * n..p * n + n]) {
                        *r += aip * bpj;
                    }
                }
                for (dst, v) in c_row.chunks_exact_mut(4).zip(&row) {
                    dst.copy_from_slice(&v.to_le_bytes());
                }
            }
        })
        .with_check(|lens, s| {
            let fits = |r: u64, c: u64, len: usize| r.checked_mul(c).and_then(f32_bytes).is_some_and(|b| b <= len);
            need(
                s[1] > 0
                    && s[2] > 0
                    && fits(s[0], s[2], lens[0])
                    && fits(s[2], s[1], lens[1])
                    && fits(s[0], s[1], lens[2]),
                || format!("sgemm m={} n={} k={}", s[0], s[1], s[2]),
            )
        })
    }
}
