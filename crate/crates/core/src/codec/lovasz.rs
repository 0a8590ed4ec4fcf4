//! Lovasz-softmax loss: a convex surrogate for the Jaccard index built from
//! the Lovasz extension over sorted prediction errors.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor, Var};

/// Jaccard-loss set function for one category: given the foreground mask and
/// a mispredicted set `m` (flags per pixel), `1 - |fg \ m| / |fg u m|`.
fn jaccard_loss_of_set(fg: &[bool], mispredicted: &[bool]) -> f64 {
    let fg_total = fg.iter().filter(|&&v| v).count();
    let miss_fg = fg
        .iter()
        .zip(mispredicted)
        .filter(|(&f, &m)| f && m)
        .count();
    let extra = fg
        .iter()
        .zip(mispredicted)
        .filter(|(&f, &m)| !f && m)
        .count();
    let union = fg_total + extra;
    if union == 0 {
        return 0.0;
    }
    1.0 - (fg_total - miss_fg) as f64 / union as f64
}

/// Lovasz-extension coefficients for one category: the discrete gradient of
/// the Jaccard loss over the prefix sets of the errors sorted descending.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let n = fg_sorted.len();
    let fg_total = fg_sorted.iter().filter(|&&v| v).count();
    let mut out = Vec::with_capacity(n);
    let mut inter = fg_total as f64;
    let mut union = fg_total as f64;
    let mut prev = 0.0;
    for &is_fg in fg_sorted {
        if is_fg {
            inter -= 1.0;
        } else {
            union += 1.0;
        }
        let jac = if union > 0.0 { 1.0 - inter / union } else { 0.0 };
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovasz-softmax over per-pixel class probabilities (`[n, k]`, rows summing
/// to 1) and integer labels; averaged over the categories present in labels.
pub fn lovasz_softmax_loss<S: Scalar>(probs: &Var<S>, labels: &[usize]) -> Result<Var<S>> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if n == 0 || labels.is_empty() {
        return Err(Error::data("lovasz loss needs at least one pixel"));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    for (r, row) in probs.value().data().chunks_exact(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::data(format!("probs row {r} sums to {s}, not 1")));
        }
    }

    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();

    let mut per_class: Vec<Var<S>> = Vec::with_capacity(present.len());
    for &cat in &present {
        let fg: Vec<bool> = labels.iter().map(|&y| y == cat).collect();
        // errors m_i = 1 - p_i(cat) on foreground, p_i(cat) elsewhere;
        // expressed linearly in p so gradients stay well-defined.
        let sign = Tensor::from_fn(&[n], |i| if fg[i] { -S::ONE } else { S::ONE });
        let base = Tensor::from_fn(&[n], |i| if fg[i] { S::ONE } else { S::ZERO });
        let p_cat = probs.select_col(cat);
        let errors = p_cat.mul_const(&sign).add_const(&base);

        // sort descending by error value; stable on ties for determinism
        let vals = errors.value().data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by(|&a, &b| {
            vals[b]
                .partial_cmp(&vals[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let fg_sorted: Vec<bool> = perm.iter().map(|&i| fg[i]).collect();
        let coeffs = lovasz_grad(&fg_sorted);
        let coeffs_t = Tensor::from_fn(&[n], |i| S::from_f64(coeffs[i]));
        per_class.push(errors.gather_rows(&perm).mul_const(&coeffs_t).sum_all());
    }

    let mut total = per_class[0].clone();
    for p in &per_class[1..] {
        total = total.add(p);
    }
    Ok(total.scale(S::ONE / S::from_f64(present.len() as f64)))
}

/// Independent oracle: evaluates the Lovasz extension of the Jaccard loss by
/// integrating the set function over error thresholds (the Choquet integral),
/// enumerating the level-set subsets directly. Exact for errors in [0, 1].
pub fn lovasz_extension_oracle(errors: &[f64], fg: &[bool]) -> f64 {
    let n = errors.len();
    // threshold breakpoints: sorted error values plus 0
    let mut cuts: Vec<f64> = errors.to_vec();
    cuts.push(0.0);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = 0.5 * (lo + hi);
        let level: Vec<bool> = (0..n).map(|i| errors[i] > mid).collect();
        total += (hi - lo) * jaccard_loss_of_set(fg, &level);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss64(probs: Vec<f64>, n: usize, k: usize, labels: &[usize]) -> f64 {
        let p = Var::leaf(Tensor::new(&[n, k], probs).unwrap());
        lovasz_softmax_loss(&p, labels).unwrap().value().item()
    }

    #[test]
    fn one_hot_correct_is_zero() {
        let probs = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(loss64(probs, 2, 4, &[0, 1]), 0.0);
    }

    #[test]
    fn single_pixel_value() {
        // p(correct) = 0.3 -> error 0.7, single-element Jaccard grad 1 -> 0.7
        let probs = vec![0.3, 0.7];
        let got = loss64(probs, 1, 2, &[0]);
        // present categories: only label 0 -> loss = 0.7
        assert!((got - 0.7).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn binary_cases_match_subset_enumeration_oracle() {
        // every <=8-pixel binary case against the threshold-integral oracle
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let n = rng.gen_range(1..=8);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut probs = Vec::with_capacity(n * 2);
            for _ in 0..n {
                let p: f64 = rng.gen_range(0.001..0.999);
                probs.push(p);
                probs.push(1.0 - p);
            }
            let got = loss64(probs.clone(), n, 2, &labels);

            // oracle per present class, averaged
            let mut present: Vec<usize> = labels.clone();
            present.sort_unstable();
            present.dedup();
            let mut want = 0.0;
            for &cat in &present {
                let fg: Vec<bool> = labels.iter().map(|&y| y == cat).collect();
                let errors: Vec<f64> = (0..n)
                    .map(|i| {
                        if fg[i] {
                            1.0 - probs[i * 2 + cat]
                        } else {
                            probs[i * 2 + cat]
                        }
                    })
                    .collect();
                want += lovasz_extension_oracle(&errors, &fg);
            }
            want /= present.len() as f64;
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn multiclass_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(2..=8);
            let k = 4;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut probs = Vec::with_capacity(n * k);
            for _ in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                probs.extend(raw.into_iter().map(|v| v / z));
            }
            let got = loss64(probs.clone(), n, k, &labels);
            let mut present: Vec<usize> = labels.clone();
            present.sort_unstable();
            present.dedup();
            let mut want = 0.0;
            for &cat in &present {
                let fg: Vec<bool> = labels.iter().map(|&y| y == cat).collect();
                let errors: Vec<f64> = (0..n)
                    .map(|i| {
                        if fg[i] {
                            1.0 - probs[i * k + cat]
                        } else {
                            probs[i * k + cat]
                        }
                    })
                    .collect();
                want += lovasz_extension_oracle(&errors, &fg);
            }
            want /= present.len() as f64;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_when_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let k = 3;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let mut probs = Vec::with_capacity(n * k);
            for _ in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                probs.extend(raw.into_iter().map(|v| v / z));
            }
            let got = loss64(probs.clone(), n, k, &labels);
            assert!(got >= 0.0);
            let soft = probs.iter().any(|&p| p > 0.0 && p < 1.0);
            if soft {
                assert!(got > 0.0, "soft predictions must cost something");
            }
        }
    }

    #[test]
    fn empty_input_rejected() {
        let p = Var::leaf(Tensor::<f64>::zeros(&[1, 2]));
        assert!(lovasz_softmax_loss(&p, &[]).is_err());
    }

    #[test]
    fn rows_must_sum_to_one() {
        let p = Var::leaf(Tensor::new(&[1, 2], vec![0.9, 0.9]).unwrap());
        assert!(lovasz_softmax_loss(&p, &[0]).is_err());
    }
}
