//! Randomized gradient-check suite over every layer kind: random shapes
//! (widths 1..=32, batches 2..=64) and seeds, analytic backward vs central
//! differences. Used by the CLI self-check and the acceptance tests.

use rand::Rng;

use super::gradcheck::{finite_diff, max_rel_error, FD_STEP};
use super::layers::{BatchNorm, Dense, Dropout, Embedding, GradRev, Mode, Relu};
use super::matrix::Matrix;
use crate::rng::substream;

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    /// Random shape/seed trials per case.
    pub trials: u64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { trials: 100, seed: 0x6ead }
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub trials: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CaseResult {
    pub fn new(name: &str, trials: u64, max_rel_err: f64, tolerance: f64) -> Self {
        CaseResult {
            name: name.to_string(),
            trials,
            max_rel_err,
            passed: max_rel_err < tolerance,
            tolerance,
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    }
}

/// Weighted-sum loss makes upstream gradients non-uniform without a second
/// network on top.
fn loss_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.2..1.8)).collect()
}

fn weighted_sum(y: &Matrix, w: &[f64]) -> f64 {
    y.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

fn dense_linear_case(trials: u64, seed: u64) -> CaseResult {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let din = rng.gen_range(1..=32);
        let dout = rng.gen_range(1..=32);
        let batch = rng.gen_range(2..=64);
        let d = Dense::new(din, dout, &mut rng);
        let x = random_matrix(batch, din, &mut rng);
        let w = loss_weights(batch * dout, &mut rng);

        let mut dd = d.clone();
        let y = dd.forward(&x).unwrap();
        dd.zero_grad();
        let up = Matrix::from_vec(y.rows, y.cols, w.clone()).unwrap();
        dd.backward(&up).unwrap();
        let analytic: Vec<f64> = dd.gw.data.iter().chain(dd.gb.iter()).copied().collect();

        let mut theta: Vec<f64> = d.w.data.iter().chain(d.b.iter()).copied().collect();
        let nw = d.w.data.len();
        let mut f = |t: &[f64]| {
            let mut a = d.clone();
            a.w.data.copy_from_slice(&t[..nw]);
            a.b.copy_from_slice(&t[nw..]);
            weighted_sum(&a.forward(&x).unwrap(), &w)
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    CaseResult::new("dense (linear loss)", trials, worst, 1e-8)
}

fn relu_stack_case(trials: u64, seed: u64) -> CaseResult {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let din = rng.gen_range(1..=16);
        let hidden = rng.gen_range(1..=32);
        let batch = rng.gen_range(2..=32);
        let d1 = Dense::new(din, hidden, &mut rng);
        let d2 = Dense::new(hidden, 1, &mut rng);
        let x = random_matrix(batch, din, &mut rng);
        let w = loss_weights(batch, &mut rng);

        let run = |d1: &Dense, d2: &Dense| -> f64 {
            let mut d1 = d1.clone();
            let mut d2 = d2.clone();
            let mut relu = Relu::new();
            let h = relu.forward(&d1.forward(&x).unwrap());
            weighted_sum(&d2.forward(&h).unwrap(), &w)
        };

        let mut a = d1.clone();
        let mut b = d2.clone();
        let mut relu = Relu::new();
        let h = relu.forward(&a.forward(&x).unwrap());
        let y = b.forward(&h).unwrap();
        a.zero_grad();
        b.zero_grad();
        let up = Matrix::from_vec(y.rows, 1, w.clone()).unwrap();
        let g = b.backward(&up).unwrap();
        let g = relu.backward(&g).unwrap();
        a.backward(&g).unwrap();
        let analytic: Vec<f64> = a
            .gw
            .data
            .iter()
            .chain(a.gb.iter())
            .chain(b.gw.data.iter())
            .chain(b.gb.iter())
            .copied()
            .collect();

        let (n1w, n1b, n2w) = (d1.w.data.len(), d1.b.len(), d2.w.data.len());
        let mut theta: Vec<f64> = d1
            .w
            .data
            .iter()
            .chain(d1.b.iter())
            .chain(d2.w.data.iter())
            .chain(d2.b.iter())
            .copied()
            .collect();
        let mut f = |t: &[f64]| {
            let mut p = d1.clone();
            let mut q = d2.clone();
            p.w.data.copy_from_slice(&t[..n1w]);
            p.b.copy_from_slice(&t[n1w..n1w + n1b]);
            q.w.data.copy_from_slice(&t[n1w + n1b..n1w + n1b + n2w]);
            q.b.copy_from_slice(&t[n1w + n1b + n2w..]);
            run(&p, &q)
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    CaseResult::new("dense + relu stack", trials, worst, 1e-4)
}

fn batchnorm_case(trials: u64, seed: u64) -> CaseResult {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let din = rng.gen_range(1..=12);
        let width = rng.gen_range(1..=16);
        let batch = rng.gen_range(2..=32);
        let d1 = Dense::new(din, width, &mut rng);
        let mut bn0 = BatchNorm::new(width);
        for v in bn0.gamma.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn0.beta.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let d2 = Dense::new(width, 1, &mut rng);
        let x = random_matrix(batch, din, &mut rng);
        let w = loss_weights(batch, &mut rng);

        let run = |d1: &Dense, bn: &BatchNorm, d2: &Dense| -> f64 {
            let mut d1 = d1.clone();
            let mut bn = bn.clone();
            let mut d2 = d2.clone();
            let mut relu = Relu::new();
            let a = d1.forward(&x).unwrap();
            let b = bn.forward(&a, Mode::Train).unwrap();
            let c = relu.forward(&b);
            weighted_sum(&d2.forward(&c).unwrap(), &w)
        };

        let mut a = d1.clone();
        let mut bn = bn0.clone();
        let mut b = d2.clone();
        let mut relu = Relu::new();
        let h = bn.forward(&a.forward(&x).unwrap(), Mode::Train).unwrap();
        let c = relu.forward(&h);
        let y = b.forward(&c).unwrap();
        a.zero_grad();
        bn.zero_grad();
        b.zero_grad();
        let up = Matrix::from_vec(y.rows, 1, w.clone()).unwrap();
        let g = b.backward(&up).unwrap();
        let g = relu.backward(&g).unwrap();
        let g = bn.backward(&g).unwrap();
        a.backward(&g).unwrap();
        let analytic: Vec<f64> = a
            .gw
            .data
            .iter()
            .chain(a.gb.iter())
            .chain(bn.g_gamma.iter())
            .chain(bn.g_beta.iter())
            .chain(b.gw.data.iter())
            .chain(b.gb.iter())
            .copied()
            .collect();

        let (n1w, n1b, nbn, n2w) = (d1.w.data.len(), d1.b.len(), width, d2.w.data.len());
        let mut theta: Vec<f64> = d1
            .w
            .data
            .iter()
            .chain(d1.b.iter())
            .chain(bn0.gamma.iter())
            .chain(bn0.beta.iter())
            .chain(d2.w.data.iter())
            .chain(d2.b.iter())
            .copied()
            .collect();
        let mut f = |t: &[f64]| {
            let mut p = d1.clone();
            let mut n = bn0.clone();
            let mut q = d2.clone();
            let mut o = 0;
            p.w.data.copy_from_slice(&t[o..o + n1w]);
            o += n1w;
            p.b.copy_from_slice(&t[o..o + n1b]);
            o += n1b;
            n.gamma.copy_from_slice(&t[o..o + nbn]);
            o += nbn;
            n.beta.copy_from_slice(&t[o..o + nbn]);
            o += nbn;
            q.w.data.copy_from_slice(&t[o..o + n2w]);
            o += n2w;
            q.b.copy_from_slice(&t[o..]);
            run(&p, &n, &q)
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    CaseResult::new("dense + batchnorm + relu", trials, worst, 1e-4)
}

fn embedding_case(trials: u64, seed: u64) -> CaseResult {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let rows = rng.gen_range(2..=32);
        let dim = rng.gen_range(1..=8);
        let batch = rng.gen_range(2..=32);
        let e = Embedding::new(rows, dim, &mut rng);
        let head = Dense::new(dim, 1, &mut rng);
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..rows)).collect();
        let w = loss_weights(batch, &mut rng);

        let run = |e: &Embedding, head: &Dense| -> f64 {
            let mut e = e.clone();
            let mut head = head.clone();
            let h = e.forward(&idx).unwrap();
            weighted_sum(&head.forward(&h).unwrap(), &w)
        };

        let mut ee = e.clone();
        let mut hh = head.clone();
        let h = ee.forward(&idx).unwrap();
        let y = hh.forward(&h).unwrap();
        ee.zero_grad();
        hh.zero_grad();
        let up = Matrix::from_vec(y.rows, 1, w.clone()).unwrap();
        let g = hh.backward(&up).unwrap();
        ee.backward(&g).unwrap();
        let analytic: Vec<f64> = ee
            .gtable
            .data
            .iter()
            .chain(hh.gw.data.iter())
            .chain(hh.gb.iter())
            .copied()
            .collect();

        let (ne, nw) = (e.table.data.len(), head.w.data.len());
        let mut theta: Vec<f64> = e
            .table
            .data
            .iter()
            .chain(head.w.data.iter())
            .chain(head.b.iter())
            .copied()
            .collect();
        let mut f = |t: &[f64]| {
            let mut p = e.clone();
            let mut q = head.clone();
            p.table.data.copy_from_slice(&t[..ne]);
            q.w.data.copy_from_slice(&t[ne..ne + nw]);
            q.b.copy_from_slice(&t[ne + nw..]);
            run(&p, &q)
        };
        let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    CaseResult::new("embedding + dense head", trials, worst, 1e-8)
}

fn dropout_case(trials: u64, seed: u64) -> CaseResult {
    // frozen mask: sample once, then the masked map is linear and exactly
    // differentiable
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let width = rng.gen_range(1..=32);
        let batch = rng.gen_range(2..=32);
        let tau = rng.gen_range(0.0..0.9);
        let mut layer = Dropout::new(tau).unwrap();
        let x = random_matrix(batch, width, &mut rng);
        let w = loss_weights(batch * width, &mut rng);

        let _ = layer.forward(&x, Mode::Train, &mut rng);
        let mask: Vec<f64> = layer.last_mask().unwrap().to_vec();
        let up = Matrix::from_vec(batch, width, w.clone()).unwrap();
        let gx = Dropout::apply_mask(&up, &mask);

        let mut xs = x.data.clone();
        let mut f = |t: &[f64]| {
            let xm = Matrix::from_vec(batch, width, t.to_vec()).unwrap();
            weighted_sum(&Dropout::apply_mask(&xm, &mask), &w)
        };
        let numeric = finite_diff(&mut f, &mut xs, FD_STEP);
        worst = worst.max(max_rel_error(&gx.data, &numeric));
    }
    CaseResult::new("dropout (frozen mask)", trials, worst, 1e-8)
}

fn gradrev_contract_case(trials: u64, seed: u64) -> CaseResult {
    // exact contract, no finite differences: forward is bit-identical,
    // backward is exactly -eta * upstream
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = substream(seed, t);
        let width = rng.gen_range(1..=32);
        let batch = rng.gen_range(2..=32);
        let eta = [0.0, 0.5, 1.0][t as usize % 3];
        let layer = GradRev::new(eta).unwrap();
        let x = random_matrix(batch, width, &mut rng);
        let y = layer.forward(&x);
        for (a, b) in x.data.iter().zip(&y.data) {
            if a.to_bits() != b.to_bits() {
                worst = worst.max(1.0);
            }
        }
        let up = random_matrix(batch, width, &mut rng);
        let g = layer.backward(&up);
        for (u, gv) in up.data.iter().zip(&g.data) {
            let expect = -eta * u;
            if expect.to_bits() != gv.to_bits() {
                worst = worst.max((expect - gv).abs().max(1.0));
            }
        }
    }
    CaseResult::new("gradrev contract (exact)", trials, worst, f64::MIN_POSITIVE)
}

fn negative_control_case(seed: u64) -> CaseResult {
    // corrupting one analytic gradient entry must push the error above 1e-2
    let mut rng = substream(seed, 9999);
    let d = Dense::new(4, 3, &mut rng);
    let x = random_matrix(8, 4, &mut rng);
    let w = loss_weights(24, &mut rng);
    let mut dd = d.clone();
    let y = dd.forward(&x).unwrap();
    dd.zero_grad();
    let up = Matrix::from_vec(y.rows, y.cols, w.clone()).unwrap();
    dd.backward(&up).unwrap();
    let mut analytic: Vec<f64> = dd.gw.data.iter().chain(dd.gb.iter()).copied().collect();
    analytic[0] += (0.5 * analytic[0].abs()).max(0.1);

    let nw = d.w.data.len();
    let mut theta: Vec<f64> = d.w.data.iter().chain(d.b.iter()).copied().collect();
    let mut f = |t: &[f64]| {
        let mut a = d.clone();
        a.w.data.copy_from_slice(&t[..nw]);
        a.b.copy_from_slice(&t[nw..]);
        weighted_sum(&a.forward(&x).unwrap(), &w)
    };
    let numeric = finite_diff(&mut f, &mut theta, FD_STEP);
    let err = max_rel_error(&analytic, &numeric);
    // pass means the corruption WAS detected
    CaseResult {
        name: "corrupted gradient detected".into(),
        trials: 1,
        max_rel_err: err,
        tolerance: 1e-2,
        passed: err > 1e-2,
    }
}

/// All layer-level cases. Model-variant cases live beside the model code.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CaseResult> {
    vec![
        dense_linear_case(cfg.trials, cfg.seed),
        relu_stack_case(cfg.trials, cfg.seed + 1),
        batchnorm_case(cfg.trials, cfg.seed + 2),
        embedding_case(cfg.trials, cfg.seed + 3),
        dropout_case(cfg.trials, cfg.seed + 4),
        gradrev_contract_case(cfg.trials, cfg.seed + 5),
        negative_control_case(cfg.seed + 6),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_reduced_trials() {
        let results = run_suite(&SuiteConfig {
            trials: 10,
            seed: 1,
        });
        for r in &results {
            assert!(r.passed, "{}: max_rel_err {} vs tol {}", r.name, r.max_rel_err, r.tolerance);
        }
    }
}
