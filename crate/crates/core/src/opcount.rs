//! Thread-local operation counters for instrumented forward passes.
//!
//! Kernels call [`record`] with the number of multiply-accumulates (or
//! elementwise ops) they perform; the count is attributed to the innermost
//! active [`scope`]. Outside of [`measure`] recording is a no-op.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    PatchEmbed,
    Norm,
    InProj,
    ParamProj,
    ForwardBlock,
    BackwardBlock,
    OutProj,
    Predictor,
    Selector,
    Head,
    Other,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OpCounts {
    pub by_kind: BTreeMap<OpKind, u64>,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.by_kind.values().sum()
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.by_kind.get(&kind).copied().unwrap_or(0)
    }
}

struct Recorder {
    stack: Vec<OpKind>,
    counts: OpCounts,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

/// Adds `n` ops to the innermost scope. No-op when not measuring.
pub fn record(n: u64) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            let kind = rec.stack.last().copied().unwrap_or(OpKind::Other);
            *rec.counts.by_kind.entry(kind).or_insert(0) += n;
        }
    });
}

pub struct ScopeGuard {
    active: bool,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.active {
            RECORDER.with(|r| {
                if let Some(rec) = r.borrow_mut().as_mut() {
                    rec.stack.pop();
                }
            });
        }
    }
}

/// Attributes ops recorded while the guard lives to `kind`.
pub fn scope(kind: OpKind) -> ScopeGuard {
    let active = RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.stack.push(kind);
            true
        } else {
            false
        }
    });
    ScopeGuard { active }
}

/// Runs `f` with counting enabled and returns its result with the counts.
/// Nested calls are not supported: the inner call owns the recorder.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let prev = RECORDER.with(|r| {
        r.borrow_mut().replace(Recorder {
            stack: Vec::new(),
            counts: OpCounts::default(),
        })
    });
    let out = f();
    let rec = RECORDER.with(|r| std::mem::replace(&mut *r.borrow_mut(), prev));
    (out, rec.map(|r| r.counts).unwrap_or_default())
}
