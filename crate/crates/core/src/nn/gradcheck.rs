//! Central-difference gradient verification.
//!
//! The harness perturbs individual parameter entries by a step in each
//! direction, re-runs a forward-only loss closure in 64-bit precision, and
//! compares the numeric slope against the analytic gradient produced by the
//! tape. The relative error uses `|a - n| / max(1e-8, |a| + |n|)`.

use rand::Rng;

use crate::nn::params::{GradStore, ParamId, ParamStore};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One parameter entry to probe.
pub type Entry = (ParamId, usize, usize);

/// Every entry of every parameter.
pub fn all_entries(params: &ParamStore) -> Vec<Entry> {
    let mut out = Vec::new();
    for id in params.ids() {
        let (r, c) = params.value(id).dim();
        for i in 0..r {
            for j in 0..c {
                out.push((id, i, j));
            }
        }
    }
    out
}

/// Up to `per_param` randomly chosen entries from each parameter.
pub fn sample_entries<R: Rng>(params: &ParamStore, per_param: usize, rng: &mut R) -> Vec<Entry> {
    let mut out = Vec::new();
    for id in params.ids() {
        let (r, c) = params.value(id).dim();
        let total = r * c;
        if total <= per_param {
            for i in 0..r {
                for j in 0..c {
                    out.push((id, i, j));
                }
            }
        } else {
            for _ in 0..per_param {
                let flat = rng.gen_range(0..total);
                out.push((id, flat / c, flat % c));
            }
        }
    }
    out
}

/// Max relative error between analytic gradients and central differences
/// over the probed entries. The closure must be a pure function of the
/// parameter values.
pub fn grad_check<F>(
    params: &mut ParamStore,
    f: F,
    analytic: &GradStore,
    step: f64,
    entries: &[Entry],
) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let mut max_err = 0.0f64;
    for &(id, r, c) in entries {
        let orig = params.value(id)[[r, c]];
        params.value_mut(id)[[r, c]] = orig + step;
        let fp = f(params);
        params.value_mut(id)[[r, c]] = orig - step;
        let fm = f(params);
        params.value_mut(id)[[r, c]] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.get(id)[[r, c]];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::array;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let loss = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let x = t.row(&[1.5, -0.5]);
            let wv = t.param(w);
            let y = t.matmul(x, wv);
            let s = t.sum_all(y);
            t.scalar_value(s)
        };
        let mut t = Tape::new(&store);
        let x = t.row(&[1.5, -0.5]);
        let wv = t.param(w);
        let y = t.matmul(x, wv);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        let entries = all_entries(&store);
        let err = grad_check(&mut store, loss, &grads, FD_STEP, &entries);
        assert!(err < 1e-9, "affine map should be exact, got {err}");
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let loss = |p: &ParamStore| {
            let mut t = Tape::new(p);
            let x = t.row(&[1.5, -0.5]);
            let wv = t.param(w);
            let y = t.matmul(x, wv);
            let th = t.tanh(y);
            let s = t.sum_all(th);
            t.scalar_value(s)
        };
        let mut t = Tape::new(&store);
        let x = t.row(&[1.5, -0.5]);
        let wv = t.param(w);
        let y = t.matmul(x, wv);
        let th = t.tanh(y);
        let s = t.sum_all(th);
        let mut grads = t.backward(s);
        // Corrupt one entry and expect the harness to flag it.
        let bad = grads.get(w).clone() + 0.5;
        grads = {
            let mut g = GradStore::zeros_like(&store);
            g.add(w, &bad);
            g
        };
        let entries = all_entries(&store);
        let err = grad_check(&mut store, loss, &grads, FD_STEP, &entries);
        assert!(err > 1e-2, "harness must detect corruption, got {err}");
    }
}
