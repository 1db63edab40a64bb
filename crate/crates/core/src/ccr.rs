//! Contrastive alignment between pooled word features and pooled attended
//! difference features: dot-product similarities over the batch scored with
//! a symmetric InfoNCE.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::repeat_last;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.5;

/// Masked mean over the sequence axis.
///
/// `features` is `(m, D)` or `(B, m, D)`; `mask` holds one flag per row
/// (`B·m` of them for the batched form). Returns `(D)` or `(B, D)`.
pub fn mean_pool_words(g: &mut Graph, features: Var, mask: &[bool]) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let (batch, m, d) = match shape[..] {
        [m, d] => (1, m, d),
        [b, m, d] => (b, m, d),
        _ => return Err(Error::dim("mean_pool_words", &shape, &[mask.len()])),
    };
    if mask.len() != batch * m {
        return Err(Error::dim("mean_pool_words", &shape, &[mask.len()]));
    }
    let mut weights = Vec::with_capacity(batch * m * d);
    for row in mask.chunks(m) {
        let count = row.iter().filter(|&&x| x).count();
        if count == 0 {
            return Err(Error::Contract(
                "mean pooling over an all-PAD sequence".into(),
            ));
        }
        for &keep in row {
            let w = if keep { 1.0 / count as f64 } else { 0.0 };
            weights.extend(std::iter::repeat_n(w, d));
        }
    }
    let w = g.constant(Tensor::new(shape.clone(), weights)?);
    let weighted = g.mul(features, w)?;
    g.sum(weighted, shape.len() - 2)
}

/// Plain mean over the sequence axis of `(n, D)` or `(B, n, D)`.
pub fn mean_pool_visual(g: &mut Graph, features: Var) -> Result<Var> {
    let rank = g.shape(features).len();
    if rank < 2 {
        return Err(Error::Contract(format!(
            "mean_pool_visual needs rank >= 2, got {rank}"
        )));
    }
    g.mean(features, rank - 2)
}

/// `S_kr = words_k · visual_r` for `(B, D)` inputs.
pub fn similarity_matrix(g: &mut Graph, words: Var, visual: Var) -> Result<Var> {
    let (sw, sv) = (g.shape(words).to_vec(), g.shape(visual).to_vec());
    if sw.len() != 2 || sw != sv {
        return Err(Error::dim("similarity_matrix", &sw, &sv));
    }
    let vt = g.transpose(visual)?;
    g.matmul(words, vt)
}

fn check(g: &Graph, s: Var, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let shape = g.shape(s);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("infonce_ccr", shape, shape));
    }
    Ok(())
}

/// One direction of the contrastive loss: the mean over rows of
/// `logsumexp(row / tau) − S_kk / tau` (text→visual for `S`, visual→text
/// for `Sᵀ`). Each row is shifted by its maximum before exponentiating.
pub fn infonce_rows(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    check(g, s, tau)?;
    let b = g.shape(s)[0];
    let scaled = g.scale(s, 1.0 / tau)?;
    let mut max = g.value(scaled).clone();
    for row in max.data_mut().chunks_mut(b) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.fill(m);
    }
    let max = g.constant(max);
    let z = g.sub(scaled, max)?;
    let e = g.exp(z)?;
    let sum = g.sum(e, 1)?;
    let lse = g.log(sum)?;
    let eye = g.constant(Tensor::eye(b));
    let diag = g.mul(z, eye)?;
    let diag = g.sum(diag, 1)?;
    let per_row = g.sub(lse, diag)?;
    g.mean(per_row, 0)
}

/// Symmetric InfoNCE: average of the row-wise (text→visual) and
/// column-wise (visual→text) cross-entropies against the diagonal.
pub fn infonce_ccr(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    check(g, s, tau)?;
    let t2v = infonce_rows(g, s, tau)?;
    let st = g.transpose(s)?;
    let v2t = infonce_rows(g, st, tau)?;
    let both = g.add(t2v, v2t)?;
    g.scale(both, 0.5)
}

/// Divides each row of `(B, D)` by its L2 norm, for cosine similarities.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let sq = g.square(x)?;
    let n2 = g.sum(sq, 1)?;
    let log = g.log(n2)?;
    let neg_half = g.scale(log, -0.5)?;
    let inv = g.exp(neg_half)?;
    let inv = repeat_last(g, inv, d)?;
    g.mul(x, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn loss(s: &Tensor, tau: f64) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(s.clone());
        let l = infonce_ccr(&mut g, s, tau).unwrap();
        g.value(l).data()[0]
    }

    /// Direct evaluation of both cross-entropy terms, no max shift.
    fn infonce_oracle(s: &Tensor, tau: f64) -> f64 {
        let b = s.shape()[0];
        let mut t2v = 0.0;
        let mut v2t = 0.0;
        for k in 0..b {
            let row: f64 = (0..b).map(|r| (s.at(&[k, r]) / tau).exp()).sum();
            let col: f64 = (0..b).map(|r| (s.at(&[r, k]) / tau).exp()).sum();
            t2v -= ((s.at(&[k, k]) / tau).exp() / row).ln();
            v2t -= ((s.at(&[k, k]) / tau).exp() / col).ln();
        }
        (t2v / b as f64 + v2t / b as f64) / 2.0
    }

    #[test]
    fn pooling_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let p = mean_pool_words(&mut g, one, &[true]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
        let p = mean_pool_visual(&mut g, one).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);

        let same = g.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0]]).unwrap());
        let p = mean_pool_words(&mut g, same, &[true, true]).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);
        let p = mean_pool_visual(&mut g, same).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);

        let basis = g.constant(Tensor::eye(2));
        let p = mean_pool_words(&mut g, basis, &[true, true]).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        let p = mean_pool_visual(&mut g, basis).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 5.0], vec![100.0, 100.0]]).unwrap(),
        );
        let p = mean_pool_words(&mut g, x, &[true, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 3.0]);
        assert!(matches!(
            mean_pool_words(&mut g, x, &[false; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn similarity_cases() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::eye(3));
        let s = similarity_matrix(&mut g, e, e).unwrap();
        assert_eq!(g.value(s), &Tensor::eye(3));
        let c = g.constant(Tensor::full(vec![3, 2], 0.5));
        let s = similarity_matrix(&mut g, c, c).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        // [1,2]·[3,-1] = 1, [1,2]·[0,2] = 4, [-1,1]·[3,-1] = -4, [-1,1]·[0,2] = 2
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 1.0]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.0, 2.0]]).unwrap());
        let s = similarity_matrix(&mut g, w, v).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 4.0, -4.0, 2.0]);
    }

    #[test]
    fn closed_forms() {
        assert_eq!(loss(&Tensor::from_rows(&[vec![3.7]]).unwrap(), 0.5), 0.0);
        for b in [2, 4, 8] {
            let l = loss(&Tensor::full(vec![b, b], 1.3), 0.5);
            assert!((l - (b as f64).ln()).abs() < 1e-9);
        }
        // S = 10·I, τ = 0.5: −log(e^20 / (e^20 + 2)) = log(1 + 2e^−20).
        let l = loss(&Tensor::eye(3).map(|x| 10.0 * x), 0.5);
        let expected = (2.0 * (-20.0f64).exp()).ln_1p();
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
        assert!((expected - 4.122e-9).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_tau() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::eye(2));
        assert!(matches!(
            infonce_ccr(&mut g, s, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            infonce_ccr(&mut g, s, -1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_through_pooled_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let words = random(&[3, 5, 6], &mut rng);
        let visual = random(&[3, 5, 6], &mut rng);
        let mask = [
            true, true, true, false, false, true, true, true, true, true, true, true, true, true,
            false,
        ];
        let err = grad_check(
            |g, v| {
                let w = mean_pool_words(g, v[0], &mask)?;
                let vis = mean_pool_words(g, v[1], &mask)?;
                let s = similarity_matrix(g, w, vis)?;
                infonce_ccr(g, s, DEFAULT_TAU)
            },
            &[words, visual],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn invariants(seed in any::<u64>(), b in 1usize..6, shift in -5.0f64..5.0, tau in 0.1f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(&[b, b], &mut rng).map(|x| 3.0 * x);
            let l = loss(&s, tau);
            prop_assert!(l >= 0.0);
            prop_assert!((l - infonce_oracle(&s, tau)).abs() < 1e-12);

            // symmetric in transposition
            let mut st = s.clone();
            for i in 0..b { for j in 0..b { st.data_mut()[i * b + j] = s.at(&[j, i]); } }
            prop_assert!((l - loss(&st, tau)).abs() < 1e-12);

            // joint batch permutation
            let perm: Vec<usize> = (0..b).map(|i| (i * 2 + 1) % b).collect();
            let mut sp = s.clone();
            let distinct = perm.iter().collect::<std::collections::HashSet<_>>().len() == b;
            if distinct {
                for i in 0..b { for j in 0..b { sp.data_mut()[i * b + j] = s.at(&[perm[i], perm[j]]); } }
                prop_assert!((l - loss(&sp, tau)).abs() < 1e-12);
            }

            // shifting one row leaves that row's text→visual term unchanged
            let mut g = Graph::new();
            let sv = g.constant(s.clone());
            let t2v = infonce_rows(&mut g, sv, tau).unwrap();
            let mut shifted = s.clone();
            for j in 0..b { shifted.data_mut()[j] += shift; }
            let sv2 = g.constant(shifted);
            let t2v2 = infonce_rows(&mut g, sv2, tau).unwrap();
            prop_assert!((g.value(t2v).data()[0] - g.value(t2v2).data()[0]).abs() < 1e-12);
        }
    }
}
