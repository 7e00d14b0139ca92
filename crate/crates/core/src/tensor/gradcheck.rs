use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst element, if any element was checked.
    pub worst: Option<String>,
    pub checked: usize,
}

fn eval<F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Backward(format!("function must be scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences for every element of every parameter. The error per element is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_limited(store, h, None, f)
}

/// Like [`grad_check`] but probes at most `limit` evenly spaced elements per
/// parameter.
pub fn grad_check_limited<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    limit: Option<usize>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let first = eval(store, &mut f)?;
    let second = eval(store, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?;
    let grads = tape.gradients(store);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let step = match limit {
            Some(l) if l > 0 && n > l => n.div_ceil(l),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, &mut f);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, &mut f);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = grads.get(id)[i];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(store.name(id).to_string());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Tensor};
    use std::cell::Cell;

    #[test]
    fn identity_of_one_parameter() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.3)).unwrap();
        let r = grad_check(&mut store, 1e-5, |tape, s| {
            let id = s.find("x").unwrap();
            Ok(tape.param(s, id))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn linear_sigmoid_mean() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let b = store.add("b", Tensor::new(&[3], (0..3).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let x = Tensor::new(&[5, 4], (0..20).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let r = grad_check(&mut store, 1e-5, |tape, s| {
            let xv = tape.constant(x.clone());
            let (wv, bv) = (tape.param(s, w), tape.param(s, b));
            let y = tape.linear(xv, wv, Some(bv))?;
            let y = tape.sigmoid(y);
            Ok(tape.mean(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv2d_single_channel() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let k = store.add("k", Tensor::new(&[1, 1, 3, 3], (0..9).map(|_| rng.normal()).collect()).unwrap()).unwrap();
        let x = Tensor::new(&[1, 1, 6, 6], (0..36).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let proj = Tensor::new(&[1, 1, 6, 6], (0..36).map(|_| rng.normal()).collect::<Vec<f64>>()).unwrap();
        let r = grad_check(&mut store, 1e-5, |tape, s| {
            let xv = tape.constant(x.clone());
            let kv = tape.param(s, k);
            let y = tape.conv2d(xv, kv, None, 1, 1)?;
            let p = tape.constant(proj.clone());
            let y = tape.mul(y, p)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn detects_non_determinism() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let r = grad_check(&mut store, 1e-5, |tape, s| {
            calls.set(calls.get() + 1.0);
            let p = tape.param(s, s.find("x").unwrap());
            Ok(tape.scale(p, calls.get()))
        });
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }
}
