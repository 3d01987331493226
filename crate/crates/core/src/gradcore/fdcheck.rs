//! Central finite-difference verification of analytic gradients.

use super::params::{ParamId, ParamStore};
use super::real::Real;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element and its (analytic, numeric) pair.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub tol: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn flagged(&self) -> Vec<&FdEntry> {
        self.entries.iter().filter(|e| e.max_rel_error > self.tol).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

/// Settings for [`FdCheck::run`].
///
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// gradients that are zero up to rounding from reporting huge ratios.
#[derive(Clone, Debug)]
pub struct FdCheck {
    pub h: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
    /// Restrict the check to these parameters (all when `None`).
    pub only: Option<Vec<ParamId>>,
}

impl FdCheck {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            floor: 1e-6,
            max_per_param: None,
            only: None,
        }
    }

    /// Compare `store`'s current `grad` fields against central differences
    /// of `loss_fn`. Parameters are restored bit-exactly afterwards.
    pub fn run<R: Real>(
        &self,
        store: &mut ParamStore<R>,
        mut loss_fn: impl FnMut(&ParamStore<R>) -> Result<f64>,
    ) -> Result<FdReport> {
        let ids: Vec<ParamId> = match &self.only {
            Some(ids) => ids.clone(),
            None => store.ids().collect(),
        };
        let mut entries = Vec::with_capacity(ids.len());
        for id in ids {
            let n = store.value(id).len();
            let stride = match self.max_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            let mut entry = FdEntry {
                name: store.name(id).to_string(),
                checked: 0,
                max_rel_error: 0.0,
                worst: (0, 0.0, 0.0),
            };
            for j in (0..n).step_by(stride) {
                let orig = store.value(id).data()[j];
                let plus = R::of(orig.as_f64() + self.h);
                let minus = R::of(orig.as_f64() - self.h);
                store.value_mut(id).data_mut()[j] = plus;
                let lp = loss_fn(store)?;
                store.value_mut(id).data_mut()[j] = minus;
                let lm = loss_fn(store)?;
                store.value_mut(id).data_mut()[j] = orig;
                // Divide by the step actually representable in `R`.
                let numeric = (lp - lm) / (plus.as_f64() - minus.as_f64());
                let analytic = store.grad(id).data()[j].as_f64();
                let denom = analytic.abs().max(numeric.abs()).max(self.floor);
                let rel = (analytic - numeric).abs() / denom;
                if rel >= entry.max_rel_error {
                    entry.max_rel_error = rel;
                    entry.worst = (j, analytic, numeric);
                }
                entry.checked += 1;
            }
            entries.push(entry);
        }
        Ok(FdReport { tol: self.tol, entries })
    }
}

/// Check every parameter of `store` at step `h` against tolerance `tol`.
pub fn fd_check<R: Real>(
    loss_fn: impl FnMut(&ParamStore<R>) -> Result<f64>,
    store: &mut ParamStore<R>,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    FdCheck::new(h, tol).run(store, loss_fn)
}
