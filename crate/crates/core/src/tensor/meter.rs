//! Live-buffer memory accounting.
//!
//! Every tensor value or gradient buffer registers its byte size here when it
//! is allocated and unregisters when dropped. Buffers are split into two
//! classes: activations (op outputs, their gradients, data batches) and
//! parameters (model weights, optimizer state, leaf gradients). Peak tracking
//! applies to activations; parameter bytes are reported separately.
//!
//! The meter is thread-local. Each training run owns its thread's meter, so
//! independent runs on separate threads never observe each other.

use std::cell::RefCell;

use thiserror::Error;

/// Which ledger a buffer is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemClass {
    Activation,
    Parameter,
}

/// Snapshot of the meter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryMeter {
    pub current_live_bytes: u64,
    pub peak_live_bytes: u64,
    pub parameter_bytes: u64,
}

/// Result of a closed measurement scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeReport {
    pub label: String,
    /// Peak activation bytes above the scope-entry level.
    pub peak_bytes: u64,
    pub entry_bytes: u64,
    pub exit_bytes: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeterError {
    #[error("scope `{closing}` closed while `{innermost}` is still open")]
    Imbalance { closing: String, innermost: String },
    #[error("scope token {0} is not open")]
    UnknownScope(u64),
}

/// Handle returned by [`enter_scope`]; must be passed back to [`exit_scope`].
#[derive(Debug)]
#[must_use = "an entered scope must be exited"]
pub struct ScopeToken {
    id: u64,
    label: String,
}

struct OpenScope {
    id: u64,
    label: String,
    entry: u64,
    peak: u64,
}

#[derive(Default)]
struct MeterState {
    current: u64,
    peak: u64,
    params: u64,
    next_id: u64,
    scopes: Vec<OpenScope>,
}

thread_local! {
    static METER: RefCell<MeterState> = RefCell::new(MeterState::default());
}

pub(crate) fn charge(bytes: u64, class: MemClass) {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        match class {
            MemClass::Parameter => m.params += bytes,
            MemClass::Activation => {
                m.current += bytes;
                let cur = m.current;
                if cur > m.peak {
                    m.peak = cur;
                }
                for s in m.scopes.iter_mut() {
                    if cur > s.peak {
                        s.peak = cur;
                    }
                }
            }
        }
    });
}

pub(crate) fn release(bytes: u64, class: MemClass) {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        match class {
            MemClass::Parameter => m.params -= bytes,
            MemClass::Activation => m.current -= bytes,
        }
    });
}

pub fn snapshot() -> MemoryMeter {
    METER.with(|m| {
        let m = m.borrow();
        MemoryMeter {
            current_live_bytes: m.current,
            peak_live_bytes: m.peak,
            parameter_bytes: m.params,
        }
    })
}

/// Lowers the global peak to the current live level.
pub fn reset_peak() {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.peak = m.current;
    });
}

pub fn enter_scope(label: impl Into<String>) -> ScopeToken {
    let label = label.into();
    METER.with(|m| {
        let mut m = m.borrow_mut();
        let id = m.next_id;
        m.next_id += 1;
        let entry = m.current;
        m.scopes.push(OpenScope {
            id,
            label: label.clone(),
            entry,
            peak: entry,
        });
        ScopeToken { id, label }
    })
}

/// Closes the innermost scope. Closing any other scope is an imbalance error
/// and leaves the stack untouched.
pub fn exit_scope(token: ScopeToken) -> Result<ScopeReport, MeterError> {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        let Some(top) = m.scopes.last() else {
            return Err(MeterError::UnknownScope(token.id));
        };
        if top.id != token.id {
            if m.scopes.iter().any(|s| s.id == token.id) {
                return Err(MeterError::Imbalance {
                    closing: token.label,
                    innermost: top.label.clone(),
                });
            }
            return Err(MeterError::UnknownScope(token.id));
        }
        let s = m.scopes.pop().expect("checked non-empty");
        Ok(ScopeReport {
            label: s.label,
            peak_bytes: s.peak - s.entry,
            entry_bytes: s.entry,
            exit_bytes: m.current,
        })
    })
}

/// Runs `f` inside a scope and returns its result with the scope report.
pub fn measure<R>(label: impl Into<String>, f: impl FnOnce() -> R) -> (R, ScopeReport) {
    let token = enter_scope(label);
    let out = f();
    let report = exit_scope(token).expect("closure scopes are balanced");
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn one_10x10_tensor_is_800_bytes() {
        let (_, r) = measure("alloc", || Tensor::zeros(&[10, 10]));
        assert_eq!(r.peak_bytes, 800);
    }

    #[test]
    fn empty_scope_is_zero() {
        let (_, r) = measure("empty", || ());
        assert_eq!(r.peak_bytes, 0);
        assert_eq!(r.entry_bytes, r.exit_bytes);
    }

    #[test]
    fn alloc_release_alloc_peaks_at_larger() {
        // 10x10 = 800 bytes, released, then 20x10 = 1600 bytes.
        let (_, r) = measure("seq", || {
            let a = Tensor::zeros(&[10, 10]);
            drop(a);
            Tensor::zeros(&[20, 10])
        });
        assert_eq!(r.peak_bytes, 1600);
    }

    #[test]
    fn conservation_after_unwind() {
        let before = snapshot().current_live_bytes;
        let t = enter_scope("outer");
        {
            let _a = Tensor::zeros(&[7, 3]);
            let _b = Tensor::zeros(&[2]);
        }
        let r = exit_scope(t).unwrap();
        assert_eq!(snapshot().current_live_bytes, before);
        assert_eq!(r.peak_bytes, 7 * 3 * 8 + 16);
    }

    #[test]
    fn out_of_order_exit_is_imbalance() {
        let outer = enter_scope("outer");
        let inner = enter_scope("inner");
        let err = exit_scope(outer).unwrap_err();
        assert!(matches!(err, MeterError::Imbalance { .. }));
        exit_scope(inner).unwrap();
        METER.with(|m| m.borrow_mut().scopes.clear());
    }

    #[test]
    fn parameters_are_not_activations() {
        let before = snapshot();
        let p = Tensor::zeros(&[4, 4]).into_param();
        let mid = snapshot();
        assert_eq!(mid.current_live_bytes, before.current_live_bytes);
        assert_eq!(mid.parameter_bytes, before.parameter_bytes + 128);
        drop(p);
        assert_eq!(snapshot().parameter_bytes, before.parameter_bytes);
    }

    #[test]
    fn peak_never_below_current() {
        let _a = Tensor::zeros(&[33]);
        let s = snapshot();
        assert!(s.peak_live_bytes >= s.current_live_bytes);
    }
}
