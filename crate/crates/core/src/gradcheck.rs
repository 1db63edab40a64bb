//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a fresh graph from one `Var` per input. Returns
/// the maximum over every input coordinate of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    if let Some(i) = inputs.iter().position(|t| !t.all_finite()) {
        return Err(Error::Contract(format!(
            "grad_check input {i} is not finite"
        )));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param grad"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = 0.0_f64;
    let mut work = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..inputs[ti].numel() {
            let x0 = inputs[ti].data()[k];
            work[ti].data_mut()[k] = x0 + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = x0 - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 3], &mut rng);
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum_all(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|g, v| g.sum(v[0], 0), &[x.clone()], 1e-2).is_err());
        assert!(matches!(
            grad_check(|g, v| g.square(v[0]), &[x], 1e-5),
            Err(Error::Contract(_))
        ));
    }

    /// Each primitive's backward rule against central differences, ten seeds.
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Case = (
            &'static str,
            Vec<Vec<usize>>,
            fn(&mut Graph, &[Var]) -> Result<Var>,
        );
        let cases: Vec<Case> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
                g.matmul(v[0], v[1])
            }),
            (
                "batched matmul",
                vec![vec![2, 3, 4], vec![2, 4, 2]],
                |g, v| g.matmul(v[0], v[1]),
            ),
            ("shared matmul", vec![vec![2, 3, 4], vec![4, 2]], |g, v| {
                g.matmul(v[0], v[1])
            }),
            ("add", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
            ("subtract", vec![vec![2, 3, 4], vec![3, 4]], |g, v| {
                g.sub(v[0], v[1])
            }),
            ("multiply", vec![vec![3, 4], vec![3, 4]], |g, v| {
                g.mul(v[0], v[1])
            }),
            ("scale", vec![vec![5]], |g, v| g.scale(v[0], -2.5)),
            ("relu", vec![vec![3, 4]], |g, v| g.relu(v[0])),
            ("softmax last", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
            ("softmax first", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
            ("layer norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
                g.layer_norm(v[0], v[1], v[2])
            }),
            ("mean", vec![vec![2, 3, 4]], |g, v| g.mean(v[0], 1)),
            ("sum", vec![vec![2, 3, 4]], |g, v| g.sum(v[0], 2)),
            ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
                g.concat(&[v[0], v[1]], 1)
            }),
            ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
            ("reshape", vec![vec![2, 6]], |g, v| {
                g.reshape(v[0], vec![3, 4])
            }),
            ("gather", vec![vec![4, 3]], |g, v| {
                g.gather(v[0], &[2, 0, 2, 3], &[2, 2])
            }),
            ("exp", vec![vec![6]], |g, v| g.exp(v[0])),
            ("log", vec![vec![6]], |g, v| {
                let s = g.square(v[0])?;
                let one = g.constant(Tensor::full(vec![6], 1.0));
                let p = g.add(s, one)?;
                g.log(p)
            }),
            ("square", vec![vec![6]], |g, v| g.square(v[0])),
            ("sqrt", vec![vec![6]], |g, v| {
                let s = g.square(v[0])?;
                let one = g.constant(Tensor::full(vec![6], 0.5));
                let p = g.add(s, one)?;
                g.sqrt(p)
            }),
        ];
        for (name, shapes, op) in cases {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
                let n_out = {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                    let y = op(&mut g, &vars).unwrap();
                    g.value(y).numel()
                };
                // Contract the output with a fixed random weight so every
                // output coordinate's Jacobian row is exercised.
                let weights =
                    Tensor::from_vec((0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect());
                let err = grad_check(
                    |g, v| {
                        let y = op(g, v)?;
                        let n = g.value(y).numel();
                        let flat = g.reshape(y, vec![n])?;
                        let w = g.constant(weights.clone());
                        let p = g.mul(flat, w)?;
                        g.sum(p, 0)
                    },
                    &inputs,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }
}
