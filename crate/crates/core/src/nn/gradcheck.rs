//! Finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::{Ctx, ParamStore};
use crate::nn::Tensor;

/// Compare reverse-mode gradients of a deterministic scalar map against
/// central finite differences on sampled coordinates of every parameter.
/// Returns the max relative error. 64-bit stores only; `eps` must lie in
/// `[1e-7, 1e-3]`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    f: F,
    eps: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Ctx<f64>) -> crate::nn::Var<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let (loss0, analytic) = {
        let ctx = Ctx::new(store);
        let y = f(&ctx);
        if y.value().len() != 1 {
            return Err(Error::shape("grad_check target must be scalar"));
        }
        if !y.value().all_finite() {
            return Err(Error::data("grad_check: non-finite objective"));
        }
        let grads = y.backward();
        (y.value().item(), ctx.grads(&grads))
    };
    let _ = loss0;

    // Relative error floor keyed to the overall gradient scale so that
    // coordinates with near-zero gradients are judged against float noise,
    // not against themselves.
    let gmax = analytic
        .values()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = (1e-3 * gmax).max(1e-6);

    let names: Vec<String> = store.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for name in names {
        let n = store.value(&name).len();
        let k = samples_per_param.min(n);
        // sample distinct coordinates
        let mut coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        coords.sort_unstable();
        coords.dedup();
        for idx in coords {
            let orig = store.value(&name).clone();
            let eval = |store: &mut ParamStore<f64>, delta: f64| -> Result<f64> {
                let mut data = orig.data().to_vec();
                data[idx] += delta;
                store.set_value(&name, Tensor::new(orig.shape(), data)?);
                let ctx = Ctx::new(store);
                let y = f(&ctx);
                if !y.value().all_finite() {
                    return Err(Error::data("grad_check: non-finite objective"));
                }
                Ok(y.value().item())
            };
            let fp = eval(store, eps)?;
            let fm = eval(store, -eps)?;
            store.set_value(&name, orig);
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic
                .get(&name)
                .map(|g| g.data()[idx])
                .unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Var;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum(x^2) at x = [1, 2]: analytic grad [2, 4]
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        {
            let ctx = Ctx::new(&store);
            let x = ctx.param("x");
            let y = x.mul(&x).sum_all();
            let g = y.backward();
            assert_eq!(ctx.grads(&g)["x"].data(), &[2.0, 4.0]);
        }
        let err = grad_check(
            &mut store,
            |ctx| {
                let x = ctx.param("x");
                x.mul(&x).sum_all()
            },
            1e-5,
            8,
            1,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0));
        assert!(grad_check(&mut store, |ctx| ctx.param("x").sum_all(), 1e-2, 1, 0).is_err());
    }

    #[test]
    fn conv_layernorm_chain_passes() {
        // conv2d -> layer_norm -> sum on a random 8x8 input
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        store.insert("k", crate::nn::params::fan_in_init(&mut rng, &[2, 1, 3, 3], 9));
        store.insert("g", Tensor::ones(&[64]));
        store.insert("b", Tensor::zeros(&[64]));
        let x = Tensor::from_fn(&[1, 8, 8], |i| ((i * 37 % 11) as f64 - 5.0) * 0.2);
        let err = grad_check(
            &mut store,
            move |ctx| {
                let input = Var::constant(x.clone());
                let y = input.conv2d(&ctx.param("k"), 1, 1);
                let flat = y.reshape(&[2, 64]);
                flat.layer_norm(&ctx.param("g"), &ctx.param("b")).sum_all()
            },
            1e-5,
            6,
            11,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
