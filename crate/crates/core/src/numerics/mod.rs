//! Dense linear algebra, small MLPs, gradients and the Adam optimizer.

mod adam;
pub mod check;
mod matrix;
mod mlp;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use matrix::DenseMatrix;
pub use mlp::{mlp_apply, Activation, DenseLayer, Mlp, MlpGrads, MlpTrace};
pub use tape::{gradient, Tape, Var};

#[cfg(test)]
mod tests {
    use super::check::{central_difference, max_relative_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Squared-error loss of a batched MLP.
    fn loss(m: &Mlp, x: &DenseMatrix, target: &DenseMatrix) -> f64 {
        let y = m.forward(x).unwrap();
        y.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum()
    }

    #[test]
    fn mlp_backprop_matches_finite_differences_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = rng.random_range(1..=3usize);
            let mut dims = vec![rng.random_range(1..=16usize)];
            for _ in 0..depth {
                dims.push(rng.random_range(1..=16usize));
            }
            let act = if seed % 2 == 0 {
                Activation::Tanh
            } else {
                Activation::leaky_default()
            };
            let mut m = Mlp::init(&dims, act, false, &mut rng).unwrap();
            let batch = 3;
            let x = DenseMatrix::from_fn(batch, dims[0], |_, _| rng.random_range(-1.0..1.0));
            let out = *dims.last().unwrap();
            let t = DenseMatrix::from_fn(batch, out, |_, _| rng.random_range(-1.0..1.0));

            let (y, trace) = m.forward_traced(&x).unwrap();
            let mut gout = y.clone();
            for (g, tv) in gout.data_mut().iter_mut().zip(t.data()) {
                *g -= tv;
            }
            let mut grads = m.zero_grads();
            m.backward(&trace, &gout, &mut grads).unwrap();
            let mut analytic = Vec::new();
            grads.flatten_into(&mut analytic);

            let mut flat = Vec::new();
            m.flatten_into(&mut flat);
            let numeric = central_difference(
                |p| {
                    m.load_from(p).unwrap();
                    loss(&m, &x, &t)
                },
                &flat,
                1e-5,
            );
            m.load_from(&flat).unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err <= 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn tape_and_backprop_agree_on_a_tiny_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut m = Mlp::init(&[2, 3, 1], Activation::leaky_default(), false, &mut rng).unwrap();
        let x = [0.4, -0.7];
        let mut flat = Vec::new();
        m.flatten_into(&mut flat);

        // Same network written directly against the tape: params are
        // [W1 (3x2), b1 (3), W2 (1x3), b2 (1)].
        let tape_grad = gradient(
            |_, p| {
                let hidden: Vec<_> = (0..3)
                    .map(|j| (p[2 * j] * x[0] + p[2 * j + 1] * x[1] + p[6 + j]).leaky_relu(0.01))
                    .collect();
                let y = hidden[0] * p[9] + hidden[1] * p[10] + hidden[2] * p[11] + p[12];
                y.square() * 0.5
            },
            &flat,
        )
        .unwrap();

        let xb = DenseMatrix::from_rows(&[x], 2).unwrap();
        let (y, trace) = m.forward_traced(&xb).unwrap();
        let mut grads = m.zero_grads();
        m.backward(&trace, &y, &mut grads).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);
        assert!(max_relative_error(&tape_grad, &analytic, 1e-12) < 1e-12);
        m.load_from(&flat).unwrap();
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mlp::init(
            &[6, 16, 16, 4],
            Activation::leaky_default(),
            false,
            &mut rng,
        )
        .unwrap();
        let x = DenseMatrix::from_fn(7, 6, |r, c| (r * c) as f64 * 0.01 - 0.2);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
