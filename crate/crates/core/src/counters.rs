//! Per-thread invocation counters for the volume construction kernels.
//!
//! The refinement loop must never rebuild a volume; tests read these counters
//! around a forward pass to prove it.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelCounts {
    /// All-pairs inner product volumes, feature or context.
    pub all_pairs: u64,
    pub project_qk: u64,
    pub cross_attention: u64,
    pub gate: u64,
    pub context_correlation: u64,
    pub assemble: u64,
}

impl KernelCounts {
    pub fn total(&self) -> u64 {
        self.all_pairs
            + self.project_qk
            + self.cross_attention
            + self.gate
            + self.context_correlation
            + self.assemble
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Kernel {
    AllPairs,
    ProjectQk,
    CrossAttention,
    Gate,
    ContextCorrelation,
    Assemble,
}

thread_local! {
    static COUNTS: Cell<KernelCounts> = const { Cell::new(KernelCounts {
        all_pairs: 0,
        project_qk: 0,
        cross_attention: 0,
        gate: 0,
        context_correlation: 0,
        assemble: 0,
    }) };
}

pub(crate) fn bump(kernel: Kernel) {
    COUNTS.with(|c| {
        let mut k = c.get();
        match kernel {
            Kernel::AllPairs => k.all_pairs += 1,
            Kernel::ProjectQk => k.project_qk += 1,
            Kernel::CrossAttention => k.cross_attention += 1,
            Kernel::Gate => k.gate += 1,
            Kernel::ContextCorrelation => k.context_correlation += 1,
            Kernel::Assemble => k.assemble += 1,
        }
        c.set(k);
    });
}

/// Counts accumulated on the current thread.
pub fn snapshot() -> KernelCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(KernelCounts::default()));
}
