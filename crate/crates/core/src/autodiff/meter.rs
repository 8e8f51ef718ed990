use std::sync::atomic::{AtomicUsize, Ordering};

/// Counts activation elements held for a later backward pass.
///
/// Graphs charge every non-parameter buffer they save for a vector-Jacobian
/// product and release it when the node is consumed or the graph is dropped.
/// Trainers may additionally charge buffers they retain across steps.
/// One meter belongs to one run; it is shared between that run's graphs.
#[derive(Debug, Default)]
pub struct MemMeter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, elems: usize) {
        let now = self.live.fetch_add(elems, Ordering::SeqCst) + elems;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn free(&self, elems: usize) {
        let prev = self.live.fetch_sub(elems, Ordering::SeqCst);
        debug_assert!(prev >= elems, "meter underflow: {prev} < {elems}");
    }

    pub fn live_activation_elems(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak_activation_elems(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current live count.
    pub fn reset_peak(&self) {
        self.peak.store(self.live.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    pub fn reset(&self) {
        self.live.store(0, Ordering::SeqCst);
        self.peak.store(0, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let m = MemMeter::new();
        m.alloc(10);
        m.alloc(5);
        m.free(12);
        m.alloc(2);
        assert_eq!(m.live_activation_elems(), 5);
        assert_eq!(m.peak_activation_elems(), 15);
        m.reset_peak();
        assert_eq!(m.peak_activation_elems(), 5);
        m.reset();
        assert_eq!(m.peak_activation_elems(), 0);
    }
}
