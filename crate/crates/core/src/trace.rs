//! Clocks and the per-run tool trace.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::domain::{Outcome, Timestamp, ToolKind, ToolTraceEvent};

/// Source of monotonic timestamps for trace events.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall clock anchored once at construction and advanced by [`Instant`],
/// so readings never go backwards even if the system time is adjusted.
#[derive(Debug, Clone)]
pub struct SystemClock {
    anchor_micros: i64,
    anchor: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        let anchor_micros = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as i64)
            .unwrap_or(0);
        Self {
            anchor_micros,
            anchor: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_micros(self.anchor_micros + self.anchor.elapsed().as_micros() as i64)
    }
}

/// Deterministic clock: every reading advances by a fixed step.
///
/// Used for reproducible traces in tests and stub evaluations.
#[derive(Debug)]
pub struct SteppingClock {
    next: AtomicI64,
    step_micros: i64,
}

impl SteppingClock {
    /// 2025-01-01T00:00:00Z.
    pub const DEFAULT_START_MICROS: i64 = 1_735_689_600_000_000;

    pub fn new(start_micros: i64, step_micros: i64) -> Self {
        Self {
            next: AtomicI64::new(start_micros),
            step_micros: step_micros.max(0),
        }
    }
}

impl Default for SteppingClock {
    fn default() -> Self {
        Self::new(Self::DEFAULT_START_MICROS, 1_000)
    }
}

impl Clock for SteppingClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_micros(self.next.fetch_add(self.step_micros, Ordering::SeqCst))
    }
}

/// Collects one [`ToolTraceEvent`] per tool invocation within a run.
pub struct TraceRecorder {
    clock: Arc<dyn Clock>,
    events: Vec<ToolTraceEvent>,
}

impl TraceRecorder {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            events: Vec::new(),
        }
    }

    /// Runs `call`, timing it and appending exactly one event whatever the
    /// result. `summarize` renders the digest for a successful call; errors
    /// are summarized by their `Display`.
    pub fn record<T, E: std::fmt::Display>(
        &mut self,
        tool: ToolKind,
        input_digest: &str,
        call: impl FnOnce() -> Result<T, E>,
        summarize: impl FnOnce(&T) -> String,
    ) -> Result<T, E> {
        let started = self.clock.now();
        let result = call();
        let ended = self.clock.now();
        let duration = (ended.as_micros() - started.as_micros()).max(0) as f64 / 1e6;
        let (outcome, out) = match &result {
            Ok(v) => (Outcome::Ok, summarize(v)),
            Err(e) => (Outcome::Error, format!("error: {e}")),
        };
        self.events.push(ToolTraceEvent {
            tool,
            started_at: started,
            duration,
            outcome,
            summary: format!("{input_digest} -> {out}"),
        });
        result
    }

    pub fn events(&self) -> &[ToolTraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<ToolTraceEvent> {
        self.events
    }
}

/// Shortens `text` to at most `max` characters, marking the cut with `…`.
pub fn digest(text: &str, max: usize) -> String {
    let flat: String = text
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    if flat.chars().count() <= max {
        flat
    } else {
        let mut s: String = flat.chars().take(max.saturating_sub(1)).collect();
        s.push('…');
        s
    }
}
