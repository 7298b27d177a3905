use super::{Gradients, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare analytic gradients with five-point central differences over
/// every scalar parameter in `store`.
///
/// `loss_fn` returns the loss and its analytic gradient for a given store.
/// The relative error of each element uses the denominator
/// `max(|analytic|, |numeric|, floor)` with
/// `floor = 1e4 * eps * max(|loss|, 1) / step`: below that magnitude the
/// round-off of the difference quotient alone would exceed a relative error
/// of 1e-4, so tiny gradients are effectively compared in absolute terms.
pub fn finite_diff_check<F>(loss_fn: F, store: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (loss, grads) = loss_fn(store)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let floor = (1e4 * f64::EPSILON * loss.abs().max(1.0) / step).max(1e-8);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                probe.value_mut(id).data_mut()[k] = original + offset;
                let (l, _) = loss_fn(&probe)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("gradient-check loss".into()));
                }
                Ok(l)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            probe.value_mut(id).data_mut()[k] = original;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let analytic = grads.get(id).data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), k));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, Mlp, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::from_vec(1, 3, vec![0.2, -0.7, 1.3]).unwrap())
            .unwrap();
        let loss = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let c = tape.row(vec![1.5, -2.0, 0.25]);
            let y = tape.affine(c, w, None)?;
            Ok((tape.value(y).item(), tape.backward(y)?))
        };
        let report = finite_diff_check(loss, &store, 1e-5).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn two_layer_tanh_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "net", 5, &[7], 3, Activation::Tanh, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
        }
        let x = Tensor::from_vec(2, 5, (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let loss = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let xi = tape.input(x.clone());
            let y = mlp.forward(&mut tape, xi)?;
            let sq = tape.square(y);
            let l = tape.sum(sq);
            Ok((tape.value(l).item(), tape.backward(l)?))
        };
        let report = finite_diff_check(loss, &store, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let loss = |s: &ParamStore| Ok((f64::NAN, s.zero_grads()));
        assert!(matches!(
            finite_diff_check(loss, &store, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
