mod common;

use acseg::acg::{AcgConfig, AcgParams, AttentionParams, LayerNormParams};
use acseg::Tensor;
use common::{nested, rng, uniform};

type M = Vec<Vec<f64>>;

fn mm(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn cols(a: &M, lo: usize, hi: usize) -> M {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

fn attention(q_in: &M, kv: &M, p: &AttentionParams, heads: usize) -> M {
    let (q, k, v) = (mm(q_in, &nested(&p.w_q)), mm(kv, &nested(&p.w_k)), mm(kv, &nested(&p.w_v)));
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * dh, (h + 1) * dh), cols(&k, h * dh, (h + 1) * dh), cols(&v, h * dh, (h + 1) * dh));
        for (i, qi) in qh.iter().enumerate() {
            let logits: Vec<f64> = kh.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()).collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                merged[i].push(e.iter().zip(&vh).map(|(w, vj)| w / z * vj[c]).sum());
            }
        }
    }
    add(q_in, &mm(&merged, &nested(&p.w_o)))
}

fn layer_norm(a: &M, p: &LayerNormParams, eps: f64) -> M {
    a.iter()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + eps).sqrt() * p.gamma.data()[j] + p.beta.data()[j])
                .collect()
        })
        .collect()
}

fn oracle_forward(params: &AcgParams, x: &Tensor<f64>) -> M {
    let cfg = &params.config;
    let x = nested(x);
    let mut c = nested(&params.prototypes);
    for s in &params.steps {
        c = layer_norm(&attention(&c, &x, &s.cross_attn, cfg.num_heads), &s.cross_norm, cfg.layer_norm_eps);
        c = layer_norm(&attention(&c, &c, &s.self_attn, cfg.num_heads), &s.self_norm, cfg.layer_norm_eps);
        let hidden: M = mm(&c, &nested(&s.ffn.w_in)).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        c = layer_norm(&add(&c, &mm(&hidden, &nested(&s.ffn.w_out))), &s.ffn_norm, cfg.layer_norm_eps);
    }
    c
}

fn max_diff(a: &M, b: &Tensor<f64>) -> f64 {
    a.iter().enumerate().flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (v - b.get(i, j)).abs())).fold(0.0, f64::max)
}

/// Non-identity norm affine parameters so they are exercised too.
fn perturbed(cfg: AcgConfig, seed: u64) -> AcgParams {
    let mut p = AcgParams::init(cfg).unwrap();
    let mut r = rng(seed);
    let d = p.config.embed_dim;
    for s in &mut p.steps {
        for norm in [&mut s.cross_norm, &mut s.self_norm, &mut s.ffn_norm] {
            norm.gamma = uniform(&mut r, 1, d, 0.5, 1.5);
            norm.beta = uniform(&mut r, 1, d, -0.3, 0.3);
        }
    }
    p
}

#[test]
fn matches_dense_oracle_few_pixels() {
    let params = perturbed(AcgConfig::new(4, 8, 2).with_seed(1), 10);
    let x = uniform(&mut rng(2), 6, 8, -1.0, 1.0);
    let got = params.forward(&x).unwrap().concepts;
    assert!(max_diff(&oracle_forward(&params, &x), &got) < 1e-10);
}

#[test]
fn matches_dense_oracle_many_pixels() {
    let params = perturbed(AcgConfig::new(3, 8, 3).with_seed(4), 11);
    let x = uniform(&mut rng(3), 30, 8, -1.0, 1.0);
    let got = params.forward(&x).unwrap().concepts;
    assert!(max_diff(&oracle_forward(&params, &x), &got) < 1e-10);
}

#[test]
fn matches_dense_oracle_multi_head() {
    for n in [5, 40] {
        let params = perturbed(AcgConfig::new(5, 16, 2).with_seed(6).with_heads(4), 12);
        let x = uniform(&mut rng(n as u64), n, 16, -1.0, 1.0);
        let got = params.forward(&x).unwrap().concepts;
        assert!(max_diff(&oracle_forward(&params, &x), &got) < 1e-10, "n = {n}");
    }
}

#[test]
fn zeroed_outputs_reduce_to_normalized_prototypes() {
    let mut params = AcgParams::init(AcgConfig::new(3, 8, 4).with_seed(9)).unwrap();
    for s in &mut params.steps {
        s.cross_attn.w_o = Tensor::zeros(&[8, 8]);
        s.self_attn.w_o = Tensor::zeros(&[8, 8]);
        s.ffn.w_out = Tensor::zeros(&[32, 8]);
    }
    let x = uniform(&mut rng(1), 10, 8, -1.0, 1.0);
    let got = params.forward(&x).unwrap().concepts;
    // repeated normalization of the prototype rows
    let id = LayerNormParams::identity(8);
    let mut c = nested(&params.prototypes);
    for _ in 0..3 * 4 {
        c = layer_norm(&c, &id, params.config.layer_norm_eps);
    }
    assert!(max_diff(&c, &got) < 1e-9);
}

#[test]
fn single_precision_tracks_double() {
    let params = perturbed(AcgConfig::new(4, 8, 2).with_seed(3), 13);
    let x = uniform(&mut rng(5), 12, 8, -1.0, 1.0);
    let double = params.forward(&x).unwrap().concepts;
    let single = params.cast::<f32>().forward(&x.cast()).unwrap().concepts;
    let diff = single.cast::<f64>().max_abs_diff(&double);
    assert!(diff < 1e-4, "{diff}");
}
