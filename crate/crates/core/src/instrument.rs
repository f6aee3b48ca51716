//! Per-thread call counters for the image-side pipeline stages, so callers
//! can check which stages a code path touched.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub project: u64,
    pub ipm: u64,
    pub pv_decoder: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Project,
    Ipm,
    PvDecoder,
}

thread_local! {
    static COUNTS: Cell<CallCounts> = const { Cell::new(CallCounts { project: 0, ipm: 0, pv_decoder: 0 }) };
}

pub fn record(stage: Stage) {
    COUNTS.with(|c| {
        let mut v = c.get();
        match stage {
            Stage::Project => v.project += 1,
            Stage::Ipm => v.ipm += 1,
            Stage::PvDecoder => v.pv_decoder += 1,
        }
        c.set(v);
    });
}

/// Counts on the current thread since it started.
pub fn snapshot() -> CallCounts {
    COUNTS.with(Cell::get)
}

impl CallCounts {
    pub fn since(self, earlier: CallCounts) -> CallCounts {
        CallCounts {
            project: self.project - earlier.project,
            ipm: self.ipm - earlier.ipm,
            pv_decoder: self.pv_decoder - earlier.pv_decoder,
        }
    }
}
