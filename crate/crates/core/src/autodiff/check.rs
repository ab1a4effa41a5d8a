use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};

/// Compare analytic gradients against central finite differences.
///
/// `f(store, accumulate_grads)` must evaluate a deterministic scalar loss of
/// the parameters in `store`; when `accumulate_grads` is true it must also
/// run a backward pass so gradients land in the store. Up to `max_coords`
/// coordinates are sampled (without replacement across the flattened
/// parameter vector) and perturbed by ±eps; the worst relative error is
/// returned.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut f: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    store.zero_grads();
    let base = f(store, true)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss {base} in grad_check")));
    }
    let analytic: Vec<Tensor<f64>> = store
        .iter()
        .map(|(id, _, _)| id)
        .collect::<Vec<_>>()
        .into_iter()
        .map(|id| store.grad(id).clone())
        .collect();

    // Flatten coordinate space: (param index, element index).
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (i, (_, _, v)) in store.iter().enumerate() {
        for e in 0..v.numel() {
            coords.push((i, e));
        }
    }
    let total = coords.len();
    let picked: Vec<(usize, usize)> = if total <= max_coords {
        coords
    } else {
        let mut rng = CounterRng::new(seed, &[streams::GRADCHECK]);
        // Partial Fisher-Yates over the prefix.
        let mut cs = coords;
        for i in 0..max_coords {
            let j = i + rng.below(total - i);
            cs.swap(i, j);
        }
        cs.truncate(max_coords);
        cs
    };

    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    let mut worst = 0.0_f64;
    for (pi, e) in picked {
        let id = ids[pi];
        let orig = store.value(id).data()[e];

        store.value_mut(id).data_mut()[e] = orig + eps;
        let up = f(store, false)?;
        store.value_mut(id).data_mut()[e] = orig - eps;
        let down = f(store, false)?;
        store.value_mut(id).data_mut()[e] = orig;

        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(
                "non-finite perturbed loss in grad_check".into(),
            ));
        }
        let fd = (up - down) / (2.0 * eps);
        let an = analytic[pi].data()[e];
        let denom = fd.abs().max(an.abs()).max(1e-3);
        let rel = (fd - an).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn quadratic_form_matches_analytic_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = CounterRng::new(5, &[77]);
        let id = store.register("x", Tensor::randn(1, 6, 1.0, &mut rng)).unwrap();
        let err = grad_check(
            &mut store,
            |st, grads| {
                let mut tape = Tape::new();
                let x = tape.param(st, id);
                let sq = tape.mul(x, x)?;
                let l = tape.sum_all(sq);
                if grads {
                    tape.backward(l, st)?;
                }
                Ok(tape.value(l).item())
            },
            1e-5,
            200,
            0,
        )
        .unwrap();
        assert!(err <= 1e-9, "worst rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("x", Tensor::from_f64_slice(1, 3, &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let err = grad_check(
            &mut store,
            |st, grads| {
                let mut tape = Tape::new();
                let x = tape.param(st, id);
                let l0 = tape.sum_all(x);
                let l = tape.scale(l0, 0.0);
                if grads {
                    tape.backward(l, st)?;
                }
                Ok(tape.value(l).item())
            },
            1e-5,
            200,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
