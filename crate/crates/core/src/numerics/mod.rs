//! Dense `f64` tensors, a reverse-mode tape and an Adam optimizer.

mod adam;
mod conv;
mod linalg;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Tape, Var, NORM_EPS};
pub use tensor::{argmax as argmax_slice, Tensor};

/// Keep freed tensor buffers in the process heap instead of returning them to
/// the OS, so per-step tapes reuse warm pages. Process-wide; idempotent.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}
