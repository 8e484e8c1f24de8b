#![allow(dead_code)]

use acseg::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// Loss `Σ R ⊙ f(inputs)` with fixed random `R`; compares tape gradients
/// with central differences and returns the worst relative error.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var, h: f64) -> f64 {
    let loss = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(99);
        let n: usize = shape.iter().product();
        let weights = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = tape.constant(weights);
        let prod = tape.mul(out, w).unwrap();
        let l = tape.sum(prod).unwrap();
        let value = tape.value(l).item();
        if !grads {
            return (value, vec![]);
        }
        let g = tape.backward(l).unwrap();
        (value, vars.iter().map(|&v| g.get(v)).collect())
    };
    let (_, analytic) = loss(inputs, true);
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[t].len() {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[i] -= h;
            let numeric = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Row-major `rows × cols` as nested vectors.
pub fn nested(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Modularity loss by direct double loop over all ordered pairs.
pub fn brute_modularity_loss(x: &Tensor<f64>, s: &Tensor<f64>, include_diagonal: bool) -> f64 {
    let n = x.rows();
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cosine(x.row(i), x.row(j)).max(0.0)).collect()).collect();
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = deg.iter().sum();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j && !include_diagonal {
                continue;
            }
            let w = a[i][j] - deg[i] * deg[j] / two_m;
            let delta = (0..s.cols()).map(|c| s.get(i, c).max(0.0) * s.get(j, c).max(0.0)).fold(f64::MIN, f64::max);
            total += w * delta;
        }
    }
    -total / two_m
}
