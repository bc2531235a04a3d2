//! Central finite-difference gradient oracle.

use crate::error::{NumericsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]. Central differences with
/// `h = 1e-5` on an O(1) loss cannot resolve derivatives much below this.
pub const REL_FLOOR: f64 = 1e-7;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Location and magnitude of the worst disagreement found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            probes: 0,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.probes += 1;
        if e > self.max_rel_error || self.probes == 1 {
            self.max_rel_error = e;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(NumericsError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compare the tape gradient of the scalar function `f` at `x` against
/// central differences with step `h`, probing every coordinate.
///
/// `f` is evaluated twice at `x` first; differing results are reported as
/// [`NumericsError::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape(), data.to_vec())?;
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let first = eval(x.data())?;
    let second = eval(x.data())?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = tape.grad(xv).unwrap_or(&zeros).to_vec();

    let mut report = GradCheckReport::new();
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        report.record(i, analytic[i], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

/// Central-difference derivative of `eval` with respect to individual
/// parameter entries. The store is restored bit-exactly afterwards.
pub fn numeric_param_grads<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    mut eval: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base_a = eval(store)?;
    let base_b = eval(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(NumericsError::NonDeterministic {
            first: base_a,
            second: base_b,
        });
    }
    let mut out = Vec::with_capacity(probes.len());
    for &(id, idx) in probes {
        let orig = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = orig + h;
        let fp = eval(store);
        store.get_mut(id).data_mut()[idx] = orig - h;
        let fm = eval(store);
        store.get_mut(id).data_mut()[idx] = orig;
        out.push((fp? - fm?) / (2.0 * h));
    }
    Ok(out)
}

/// Compare analytic parameter gradients (already accumulated in `store`)
/// with central differences at the given probes.
pub fn check_param_grads<F>(
    store: &mut ParamStore,
    probes: &[(ParamId, usize)],
    h: f64,
    eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(id, idx)| store.get(id).grad().map_or(0.0, |g| g[idx]))
        .collect();
    let numeric = numeric_param_grads(store, probes, h, eval)?;
    let mut report = GradCheckReport::new();
    for (i, (a, n)) in analytic.into_iter().zip(numeric).enumerate() {
        report.record(i, a, n);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 4.0, 0.0, -1.0]).unwrap();
        let r = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.probes, 6);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]);
        let err = finite_diff_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                Ok(t.add_scalar(v, calls.get()))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministic { .. }));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 1e-8), 0.1);
    }
}
