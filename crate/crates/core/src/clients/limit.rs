use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Caps concurrent requests and spaces request starts to a requests-per-
/// second budget. Shared by every caller of one endpoint.
#[derive(Debug)]
pub struct RequestGate {
    max_in_flight: usize,
    min_interval: Option<Duration>,
    state: Mutex<GateState>,
    freed: Condvar,
}

#[derive(Debug)]
struct GateState {
    in_flight: usize,
    next_start: Option<Instant>,
}

/// Releases its slot on drop.
pub struct GatePermit<'a> {
    gate: &'a RequestGate,
}

impl RequestGate {
    pub fn new(max_in_flight: usize, requests_per_second: Option<f64>) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            min_interval: requests_per_second
                .filter(|r| *r > 0.0)
                .map(|r| Duration::from_secs_f64(1.0 / r)),
            state: Mutex::new(GateState {
                in_flight: 0,
                next_start: None,
            }),
            freed: Condvar::new(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, None)
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut st = self.state.lock().expect("gate lock");
        while st.in_flight >= self.max_in_flight {
            st = self.freed.wait(st).expect("gate lock");
        }
        st.in_flight += 1;
        let wait = self.min_interval.map(|interval| {
            let now = Instant::now();
            let start = st.next_start.map_or(now, |n| n.max(now));
            st.next_start = Some(start + interval);
            start.saturating_duration_since(now)
        });
        drop(st);
        if let Some(w) = wait.filter(|w| !w.is_zero()) {
            std::thread::sleep(w);
        }
        GatePermit { gate: self }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("gate lock").in_flight
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().expect("gate lock");
        st.in_flight -= 1;
        drop(st);
        self.gate.freed.notify_one();
    }
}
