//! Multi-head attention and the difference features built from it.
//!
//! Each image attends to the other to recover what the two share; the shared
//! part is subtracted from the image itself, and both residuals are fused
//! per position into one difference representation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

/// Per-head projections and the output projection of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

#[derive(Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// One `(..., n_q, n_k)` weight tensor per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with per-head projections, concatenated and
/// output-projected. `mask` is added to every head's logits and must
/// broadcast over them (see [`crate::layers::MASKED`]).
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    let d = *g.shape(q).last().expect("rank >= 1");
    let h = w.heads();
    if h == 0 || d % h != 0 {
        return Err(Error::Contract(format!(
            "{h} heads do not divide width {d}"
        )));
    }
    if g.shape(k).last() != Some(&d) || g.shape(v).last() != Some(&d) {
        return Err(Error::dim("multi_head_attention", g.shape(q), g.shape(k)));
    }
    let dk = g.shape(w.query[0])[1];
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for i in 0..h {
        let qh = g.matmul(q, w.query[i])?;
        let kh = g.matmul(k, w.key[i])?;
        let vh = g.matmul(v, w.value[i])?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let mut logits = g.scale(logits, scale)?;
        if let Some(m) = mask {
            logits = g.add(logits, m)?;
        }
        let rank = g.shape(logits).len();
        let a = g.softmax(logits, rank - 1)?;
        heads.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let rank = g.shape(heads[0]).len();
    let cat = g.concat(&heads, rank - 1)?;
    let output = g.matmul(cat, w.output)?;
    Ok(AttentionOutput { output, weights })
}

/// Both directions of cross-attention. Pass the same weights twice for the
/// tied configuration.
pub fn shared_features(
    g: &mut Graph,
    f_bef: Var,
    f_aft: Var,
    attend_bef: &AttentionWeights,
    attend_aft: &AttentionWeights,
) -> Result<(Var, Var)> {
    if g.shape(f_bef) != g.shape(f_aft) {
        return Err(Error::dim(
            "shared_features",
            g.shape(f_bef),
            g.shape(f_aft),
        ));
    }
    let s_bef = multi_head_attention(g, f_bef, f_aft, f_aft, attend_bef, None)?.output;
    let s_aft = multi_head_attention(g, f_aft, f_bef, f_bef, attend_aft, None)?.output;
    Ok((s_bef, s_aft))
}

pub fn difference_features(g: &mut Graph, features: Var, shared: Var) -> Result<Var> {
    g.sub(features, shared)
}

/// `relu([d_bef ; d_aft] · W_c + b_c)`, concatenating along channels.
pub fn fuse_difference(g: &mut Graph, d_bef: Var, d_aft: Var, fuse: &Linear) -> Result<Var> {
    let rank = g.shape(d_bef).len();
    let cat = g.concat(&[d_bef, d_aft], rank - 1)?;
    let y = fuse.forward(g, cat)?;
    g.relu(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
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

    fn attn_weights(g: &mut Graph, d: usize, h: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
        let dk = d / h;
        let mut mk = |g: &mut Graph| {
            (0..h)
                .map(|_| g.constant(random(&[d, dk], rng)))
                .collect::<Vec<_>>()
        };
        let query = mk(g);
        let key = mk(g);
        let value = mk(g);
        let output = g.constant(random(&[d, d], rng));
        AttentionWeights {
            query,
            key,
            value,
            output,
        }
    }

    fn row_sums_are_one(t: &Tensor) -> bool {
        let n = *t.shape().last().unwrap();
        t.data()
            .chunks(n)
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9)
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let w = attn_weights(&mut g, 8, 2, &mut rng);
        let q = g.constant(random(&[3, 8], &mut rng));
        let kv = g.constant(random(&[1, 8], &mut rng));
        let out = multi_head_attention(&mut g, q, kv, kv, &w, None).unwrap();
        for a in &out.weights {
            assert!(g.value(*a).data().iter().all(|&x| x == 1.0));
        }
        // Output is concat_h(v·W_V,h) · W_O for every query.
        let heads: Vec<Var> = w
            .value
            .iter()
            .map(|&wv| g.matmul(kv, wv).unwrap())
            .collect();
        let cat = g.concat(&heads, 1).unwrap();
        let expected = g.matmul(cat, w.output).unwrap();
        let e = g.value(expected).data().to_vec();
        for row in g.value(out.output).data().chunks(8) {
            for (a, b) in row.iter().zip(&e) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let w = attn_weights(&mut g, 8, 2, &mut rng);
        let q = g.constant(random(&[3, 8], &mut rng));
        let row = random(&[1, 8], &mut rng);
        let k = g.constant(Tensor::new(vec![4, 8], row.data().repeat(4)).unwrap());
        let out = multi_head_attention(&mut g, q, k, k, &w, None).unwrap();
        for a in &out.weights {
            assert!(g.value(*a).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn permuting_keys_permutes_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let w = attn_weights(&mut g, 8, 4, &mut rng);
        let q = g.constant(random(&[2, 8], &mut rng));
        let kt = random(&[5, 8], &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| kt.data()[i * 8..(i + 1) * 8].to_vec())
            .collect();
        let k = g.constant(kt);
        let kp = g.constant(Tensor::new(vec![5, 8], permuted).unwrap());
        let a = multi_head_attention(&mut g, q, k, k, &w, None).unwrap();
        let b = multi_head_attention(&mut g, q, kp, kp, &w, None).unwrap();
        assert!(g.value(a.output).max_abs_diff(g.value(b.output)) < 1e-12);
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            let (wa, wb) = (g.value(*wa), g.value(*wb));
            for qi in 0..2 {
                for (j, &src) in perm.iter().enumerate() {
                    assert!((wb.at(&[qi, j]) - wa.at(&[qi, src])).abs() < 1e-15);
                }
            }
            assert!(row_sums_are_one(wa));
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let mut w = attn_weights(&mut g, 8, 2, &mut rng);
        w.query.push(w.query[0]);
        let x = g.constant(random(&[2, 8], &mut rng));
        assert!(multi_head_attention(&mut g, x, x, x, &w, None).is_err());
    }

    #[test]
    fn shared_features_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let w = attn_weights(&mut g, 8, 2, &mut rng);
        let x = g.constant(random(&[4, 8], &mut rng));
        let (sb, sa) = shared_features(&mut g, x, x, &w, &w).unwrap();
        assert_eq!(g.value(sb), g.value(sa));
        let db = difference_features(&mut g, x, sb).unwrap();
        let da = difference_features(&mut g, x, sa).unwrap();
        assert_eq!(g.value(db), g.value(da));

        let y = g.constant(random(&[4, 8], &mut rng));
        let (s1b, s1a) = shared_features(&mut g, x, y, &w, &w).unwrap();
        let (s2b, s2a) = shared_features(&mut g, y, x, &w, &w).unwrap();
        assert_eq!(g.value(s1b), g.value(s2a));
        assert_eq!(g.value(s1a), g.value(s2b));
    }

    #[test]
    fn single_position_shares_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let w = attn_weights(&mut g, 4, 2, &mut rng);
        let b = g.constant(random(&[1, 4], &mut rng));
        let a = g.constant(random(&[1, 4], &mut rng));
        let (sb, _) = shared_features(&mut g, b, a, &w, &w).unwrap();
        let heads: Vec<Var> = w.value.iter().map(|&wv| g.matmul(a, wv).unwrap()).collect();
        let cat = g.concat(&heads, 1).unwrap();
        let expected = g.matmul(cat, w.output).unwrap();
        assert!(g.value(sb).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn shared_rows_lie_in_convex_hull_of_projected_values() {
        // With W_O = I the output of each head is a convex combination of the
        // value-projected rows; check it by recomputing the combination and
        // verifying weights are a probability vector.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let mut w = attn_weights(&mut g, 8, 2, &mut rng);
        w.output = g.constant(Tensor::eye(8));
        let b = g.constant(random(&[4, 8], &mut rng));
        let a = g.constant(random(&[4, 8], &mut rng));
        let out = multi_head_attention(&mut g, b, a, a, &w, None).unwrap();
        let y = g.value(out.output).clone();
        assert!(y.all_finite());
        for (h, &wv) in w.value.iter().enumerate() {
            let vp = g.matmul(a, wv).unwrap();
            let vp = g.value(vp).clone();
            let att = g.value(out.weights[h]).clone();
            assert!(att.data().iter().all(|&x| x >= 0.0));
            assert!(row_sums_are_one(&att));
            for qi in 0..4 {
                for c in 0..4 {
                    let combo: f64 = (0..4).map(|j| att.at(&[qi, j]) * vp.at(&[j, c])).sum();
                    assert!((y.at(&[qi, h * 4 + c]) - combo).abs() < 1e-12);
                    let lo = (0..4).map(|j| vp.at(&[j, c])).fold(f64::INFINITY, f64::min);
                    let hi = (0..4)
                        .map(|j| vp.at(&[j, c]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(combo >= lo - 1e-12 && combo <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn difference_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4], &mut rng));
        let z = g.constant(Tensor::zeros(vec![3, 4]));
        let d = difference_features(&mut g, x, x).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let d = difference_features(&mut g, x, z).unwrap();
        assert_eq!(g.value(d), g.value(x));
    }

    #[test]
    fn fusion_relu_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 4]));
        let wc = g.constant(random(&[8, 4], &mut rng));
        let zero_b = Linear::new(wc, Some(g.constant(Tensor::zeros(vec![4]))));
        let y = fuse_difference(&mut g, z, z, &zero_b).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let neg_b = Linear::new(
            wc,
            Some(g.constant(Tensor::from_vec(vec![0.5, -0.5, 1.0, 2.0]))),
        );
        let y = fuse_difference(&mut g, z, z, &neg_b).unwrap();
        assert_eq!(g.value(y).data()[..4], [0.5, 0.0, 1.0, 2.0]);
        let a = g.constant(random(&[3, 4], &mut rng));
        let b = g.constant(random(&[3, 4], &mut rng));
        let y = fuse_difference(&mut g, a, b, &neg_b).unwrap();
        assert_eq!(g.shape(y), &[3, 4]);
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn end_to_end_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 8;
        let dk = 4;
        let mut inputs = vec![random(&[4, d], &mut rng), random(&[4, d], &mut rng)];
        for _ in 0..6 {
            inputs.push(random(&[d, dk], &mut rng));
        }
        inputs.push(random(&[d, d], &mut rng));
        inputs.push(random(&[2 * d, d], &mut rng));
        inputs.push(random(&[d], &mut rng));
        let readout = random(&[4, d], &mut rng);
        let err = grad_check(
            |g, v| {
                let w = AttentionWeights {
                    query: vec![v[2], v[3]],
                    key: vec![v[4], v[5]],
                    value: vec![v[6], v[7]],
                    output: v[8],
                };
                let (sb, sa) = shared_features(g, v[0], v[1], &w, &w)?;
                let db = difference_features(g, v[0], sb)?;
                let da = difference_features(g, v[1], sa)?;
                let fused = fuse_difference(g, db, da, &Linear::new(v[9], Some(v[10])))?;
                let r = g.constant(readout.clone());
                let p = g.mul(fused, r)?;
                g.sum_all(p)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
