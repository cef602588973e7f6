//! Minimal differentiable-layer toolkit with manual backpropagation: dense,
//! batch norm, ReLU, embedding, dropout, gradient reversal, the two losses,
//! SGD/Adam, and a finite-difference gradient checker. Everything is f64;
//! model sizes here make speed irrelevant and gradient checks reliable.

pub mod checkpoint;
pub mod gradcheck;
pub mod gradcheck_suite;
pub mod layers;
pub mod loss;
pub mod matrix;
pub mod optim;

pub use checkpoint::{Checkpoint, CheckpointError, TensorRecord, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff, max_rel_error, FD_STEP};
pub use layers::{BatchNorm, Dense, Dropout, Embedding, GradRev, Mode, Relu};
pub use loss::{sigmoid, sigmoid_ce, squared_loss};
pub use matrix::Matrix;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch of {0} too small for batchnorm train mode (needs >= 2)")]
    SmallBatch(usize),
    #[error("embedding index {idx} out of range (table has {rows} rows)")]
    EmbedIndex { idx: usize, rows: usize },
    #[error("{0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::layers::{BatchNorm, Dense, Mode, Relu};
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    /// Two dense layers with ReLU between, summed-output loss; checked against
    /// finite differences over all parameters.
    fn two_layer_relu_check(seed: u64, din: usize, hidden: usize, batch: usize) -> f64 {
        let mut rng = substream(seed, 0);
        let d1 = Dense::new(din, hidden, &mut rng);
        let d2 = Dense::new(hidden, 1, &mut rng);
        let x = Matrix::from_vec(
            batch,
            din,
            (0..batch * din)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        )
        .unwrap();

        let run = |d1: &Dense, d2: &Dense, want_grads: bool| -> (f64, Vec<f64>) {
            let mut d1 = d1.clone();
            let mut d2 = d2.clone();
            let mut relu = Relu::new();
            let h = relu.forward(&d1.forward(&x).unwrap());
            let y = d2.forward(&h).unwrap();
            let loss: f64 = y.data.iter().sum();
            if !want_grads {
                return (loss, Vec::new());
            }
            d1.zero_grad();
            d2.zero_grad();
            let up = Matrix::from_vec(y.rows, y.cols, vec![1.0; y.rows * y.cols]).unwrap();
            let gh = d2.backward(&up).unwrap();
            let gr = relu.backward(&gh).unwrap();
            d1.backward(&gr).unwrap();
            let grads: Vec<f64> = d1
                .gw
                .data
                .iter()
                .chain(d1.gb.iter())
                .chain(d2.gw.data.iter())
                .chain(d2.gb.iter())
                .copied()
                .collect();
            (loss, grads)
        };

        let (_, analytic) = run(&d1, &d2, true);
        let mut theta: Vec<f64> = d1
            .w
            .data
            .iter()
            .chain(d1.b.iter())
            .chain(d2.w.data.iter())
            .chain(d2.b.iter())
            .copied()
            .collect();
        let n1w = d1.w.data.len();
        let n1b = d1.b.len();
        let n2w = d2.w.data.len();
        let mut f = |t: &[f64]| {
            let mut a = d1.clone();
            let mut b = d2.clone();
            a.w.data.copy_from_slice(&t[..n1w]);
            a.b.copy_from_slice(&t[n1w..n1w + n1b]);
            b.w.data.copy_from_slice(&t[n1w + n1b..n1w + n1b + n2w]);
            b.b.copy_from_slice(&t[n1w + n1b + n2w..]);
            run(&a, &b, false).0
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        max_rel_error(&analytic, &numeric)
    }

    #[test]
    fn linear_network_gradcheck_is_exact() {
        // No ReLU: loss is linear in each weight, finite differences are exact
        // to rounding.
        let mut rng = substream(2, 0);
        let d = Dense::new(4, 3, &mut rng);
        let x = Matrix::from_vec(
            5,
            4,
            (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let run = |d: &Dense| -> f64 {
            d.clone().forward(&x).unwrap().data.iter().sum()
        };
        let mut dd = d.clone();
        let y = dd.forward(&x).unwrap();
        dd.zero_grad();
        let up = Matrix::from_vec(y.rows, y.cols, vec![1.0; y.rows * y.cols]).unwrap();
        dd.backward(&up).unwrap();
        let analytic: Vec<f64> = dd.gw.data.iter().chain(dd.gb.iter()).copied().collect();

        let mut theta: Vec<f64> = d.w.data.iter().chain(d.b.iter()).copied().collect();
        let nw = d.w.data.len();
        let mut f = |t: &[f64]| {
            let mut a = d.clone();
            a.w.data.copy_from_slice(&t[..nw]);
            a.b.copy_from_slice(&t[nw..]);
            run(&a)
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        assert!(max_rel_error(&analytic, &numeric) < 1e-8);
    }

    #[test]
    fn two_layer_relu_gradcheck() {
        for seed in 0..10u64 {
            let err = two_layer_relu_check(seed, 3, 5, 6);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn bn_stack_gradcheck() {
        // dense -> batchnorm(train) -> relu -> dense, weighted-sum loss
        let mut rng = substream(8, 0);
        let d1 = Dense::new(3, 4, &mut rng);
        let bn = BatchNorm::new(4);
        let d2 = Dense::new(4, 1, &mut rng);
        let x = Matrix::from_vec(
            6,
            3,
            (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let w: Vec<f64> = (0..6).map(|i| 1.0 + 0.2 * i as f64).collect();

        let run = |d1: &Dense, bn: &BatchNorm, d2: &Dense, grads: bool| -> (f64, Vec<f64>) {
            let mut d1 = d1.clone();
            let mut bn = bn.clone();
            let mut d2 = d2.clone();
            let mut relu = Relu::new();
            let a = d1.forward(&x).unwrap();
            let b = bn.forward(&a, Mode::Train).unwrap();
            let c = relu.forward(&b);
            let y = d2.forward(&c).unwrap();
            let loss: f64 = y.data.iter().zip(&w).map(|(a, b)| a * b).sum();
            if !grads {
                return (loss, Vec::new());
            }
            d1.zero_grad();
            bn.zero_grad();
            d2.zero_grad();
            let up = Matrix::from_vec(6, 1, w.clone()).unwrap();
            let g = d2.backward(&up).unwrap();
            let g = relu.backward(&g).unwrap();
            let g = bn.backward(&g).unwrap();
            d1.backward(&g).unwrap();
            let flat: Vec<f64> = d1
                .gw
                .data
                .iter()
                .chain(d1.gb.iter())
                .chain(bn.g_gamma.iter())
                .chain(bn.g_beta.iter())
                .chain(d2.gw.data.iter())
                .chain(d2.gb.iter())
                .copied()
                .collect();
            (loss, flat)
        };

        let (_, analytic) = run(&d1, &bn, &d2, true);
        let mut theta: Vec<f64> = d1
            .w
            .data
            .iter()
            .chain(d1.b.iter())
            .chain(bn.gamma.iter())
            .chain(bn.beta.iter())
            .chain(d2.w.data.iter())
            .chain(d2.b.iter())
            .copied()
            .collect();
        let (n1w, n1b, nbn) = (d1.w.data.len(), d1.b.len(), bn.gamma.len());
        let n2w = d2.w.data.len();
        let mut f = |t: &[f64]| {
            let mut a = d1.clone();
            let mut b = bn.clone();
            let mut c = d2.clone();
            let mut o = 0;
            a.w.data.copy_from_slice(&t[o..o + n1w]);
            o += n1w;
            a.b.copy_from_slice(&t[o..o + n1b]);
            o += n1b;
            b.gamma.copy_from_slice(&t[o..o + nbn]);
            o += nbn;
            b.beta.copy_from_slice(&t[o..o + nbn]);
            o += nbn;
            c.w.data.copy_from_slice(&t[o..o + n2w]);
            o += n2w;
            c.b.copy_from_slice(&t[o..]);
            run(&a, &b, &c, false).0
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn corrupted_network_gradient_is_detected() {
        let mut rng = substream(5, 0);
        let d = Dense::new(2, 2, &mut rng);
        let x = Matrix::from_vec(3, 2, vec![0.3, -0.4, 1.1, 0.2, -0.9, 0.5]).unwrap();
        let mut dd = d.clone();
        let y = dd.forward(&x).unwrap();
        dd.zero_grad();
        let up = Matrix::from_vec(y.rows, y.cols, vec![1.0; 6]).unwrap();
        dd.backward(&up).unwrap();
        let mut analytic: Vec<f64> = dd.gw.data.iter().chain(dd.gb.iter()).copied().collect();
        analytic[0] *= 1.5; // corrupt one entry

        let mut theta: Vec<f64> = d.w.data.iter().chain(d.b.iter()).copied().collect();
        let nw = d.w.data.len();
        let mut f = |t: &[f64]| {
            let mut a = d.clone();
            a.w.data.copy_from_slice(&t[..nw]);
            a.b.copy_from_slice(&t[nw..]);
            a.forward(&x).unwrap().data.iter().sum()
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        assert!(max_rel_error(&analytic, &numeric) > 1e-2);
    }
}
