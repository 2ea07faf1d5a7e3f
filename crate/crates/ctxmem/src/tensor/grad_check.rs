//! Finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};

const STEP: f64 = 1e-4;

/// Compare analytic gradients against central finite differences.
///
/// `f` must rebuild the same deterministic scalar loss from the given leaves
/// on every call. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(params: &[Tensor], mut f: F) -> f64
where
    F: FnMut(&mut Tape, &[Var]) -> Var,
{
    let run = |f: &mut F, values: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        assert!(
            tape.tensor(loss).is_scalar(),
            "grad_check requires a scalar loss"
        );
        let value = tape.data(loss)[0];
        tape.backward(loss).expect("scalar loss");
        let grads = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.tensor(v).numel()])
            })
            .collect();
        (value, grads)
    };

    let eval = |f: &mut F, values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.data(loss)[0]
    };

    let base: Vec<Tensor> = params.to_vec();
    let (_, analytic) = run(&mut f, &base);

    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let mut plus = base.clone();
            plus[pi].data[ci] += STEP;
            let mut minus = base.clone();
            minus[pi].data[ci] -= STEP;
            let numeric = (eval(&mut f, &plus) - eval(&mut f, &minus)) / (2.0 * STEP);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn matmul_sum_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, vec![3, 4]);
        let b = random_tensor(&mut rng, vec![4, 2]);
        let err = grad_check(&[a, b], |tape, vars| {
            let y = tape.matmul(vars[0], vars[1]).unwrap();
            tape.sum(y)
        });
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn softmax_and_layer_norm_path_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&mut rng, vec![3, 5]);
        let gain = random_tensor(&mut rng, vec![5]);
        let bias = random_tensor(&mut rng, vec![5]);
        let err = grad_check(&[x, gain, bias], |tape, vars| {
            let n = tape.layer_norm(vars[0], vars[1], vars[2]);
            let s = tape.softmax_rows(n);
            let t = tape.activation(s, Activation::Tanh);
            tape.sum(t)
        });
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.4, -0.9]);
        let err = grad_check(&[x], |tape, _vars| tape.input(Tensor::scalar(5.0)));
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mlp_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, vec![2, 4]);
        let w1 = random_tensor(&mut rng, vec![4, 6]);
        let b1 = random_tensor(&mut rng, vec![6]);
        let w2 = random_tensor(&mut rng, vec![6, 3]);
        let err = grad_check(&[x, w1, b1, w2], |tape, v| {
            let h = tape.matmul(v[0], v[1]).unwrap();
            let h = tape.add_row(h, v[2]).unwrap();
            let h = tape.activation(h, Activation::Relu);
            let y = tape.matmul(h, v[3]).unwrap();
            let sq = tape.mul(y, y).unwrap();
            tape.sum(sq)
        });
        assert!(err < 1e-4, "max relative error {err}");
    }
}
