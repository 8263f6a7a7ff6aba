use super::{Bindings, ParamStore, Result, Tape, TensorError, Var};

/// Outcome of a central finite-difference audit.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences over every
/// coordinate of every trainable parameter in `store`.
///
/// The relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// `f` must be deterministic: a tape that records dropout is rejected, and so
/// is an objective whose value changes between two identical evaluations.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a>, &Bindings) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let loss = f(&mut tape, &b)?;
        if tape.is_stochastic() {
            return Err(TensorError::NonDeterministic);
        }
        Ok(tape.scalar(loss))
    };

    let analytic = {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let loss = f(&mut tape, &b)?;
        if tape.is_stochastic() {
            return Err(TensorError::NonDeterministic);
        }
        tape.backward(loss)?;
        store.collect_grads(&tape, &b)
    };
    if eval(store)?.to_bits() != eval(store)?.to_bits() {
        return Err(TensorError::NonDeterministic);
    }

    let mut report = GradCheck { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(grad) = analytic[id.0].as_ref() else { continue };
        for c in 0..grad.len() {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[c] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.entries()[id.0].name.clone(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Tensor};

    #[test]
    fn sigmoid_derivative_matches() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.3), ParamKind::Weight);
        let r = finite_diff_check(&mut store, 1e-5, |tape, b| Ok(tape.sigmoid(b[w]))).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn unreachable_parameters_have_zero_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5, -0.2]).unwrap(), ParamKind::Weight);
        store.add("unused", Tensor::vector(vec![1.0, 2.0]).unwrap(), ParamKind::Weight);
        let r = finite_diff_check(&mut store, 1e-5, |tape, b| {
            let t = tape.tanh(b[w]);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert_eq!(r.coordinates, 4);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn dropout_is_rejected() {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.5, -0.2]).unwrap(), ParamKind::Weight);
        let err = finite_diff_check(&mut store, 1e-5, |tape, b| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let d = tape.dropout(b[w], 0.5, &mut rng);
            Ok(tape.sum(d))
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::NonDeterministic));
    }
}
