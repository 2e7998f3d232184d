// scratch probe, will be replaced by the real examples
use cogo::graph::Graph;
use cogo::rng::CogoRng;
use cogo::tensor::Tensor;
use std::time::Instant;

fn t(shape: &[usize], rng: &mut CogoRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(t.data_mut(), -1.0, 1.0);
    t
}

fn time_op(name: &str, mut f: impl FnMut()) {
    let reps = 20;
    f();
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = CogoRng::new(0, 0);
    let b = 64usize;
    let tn = 65usize;
    let d = 64usize;
    let x_bt_d = t(&[b * tn, d], &mut rng);
    let w_qkv = t(&[d, 3 * d], &mut rng);
    let qkv = t(&[b, tn, 3 * d], &mut rng);
    let q4 = t(&[b, tn, 4, 16], &mut rng);
    let scores = t(&[b, 4, tn, tn], &mut rng);
    let hidden = t(&[b * tn, 4 * d], &mut rng);
    let x_tok = t(&[b, tn, d], &mut rng);
    let img = t(&[b, 3, 32, 32], &mut rng);
    let gamma = t(&[d], &mut rng);

    time_op("matmul qkv (4160x64x192)", || {
        let mut g = Graph::new();
        let a = g.constant(x_bt_d.clone());
        let w = g.constant(w_qkv.clone());
        let _ = g.matmul(a, w).unwrap();
    });
    time_op("slice qkv thirds x3", || {
        let mut g = Graph::new();
        let a = g.constant(qkv.clone());
        let _ = g.slice(a, 2, 0, d).unwrap();
        let _ = g.slice(a, 2, d, 2 * d).unwrap();
        let _ = g.slice(a, 2, 2 * d, 3 * d).unwrap();
    });
    time_op("transpose 0213 x3", || {
        let mut g = Graph::new();
        let a = g.constant(q4.clone());
        let _ = g.transpose(a, &[0, 2, 1, 3]).unwrap();
        let _ = g.transpose(a, &[0, 2, 1, 3]).unwrap();
        let _ = g.transpose(a, &[0, 2, 1, 3]).unwrap();
    });
    time_op("transpose 0132 (kt)", || {
        let mut g = Graph::new();
        let a = g.constant(q4.clone());
        let _ = g.transpose(a, &[0, 1, 3, 2]).unwrap();
    });
    time_op("bmm scores (256 of 65x16x65)", || {
        let mut g = Graph::new();
        let q = g.constant(q4.reshape(&[b, 4, tn, 16]).unwrap());
        let k = g.constant(q4.reshape(&[b, 4, 16, tn]).unwrap());
        let _ = g.matmul(q, k).unwrap();
    });
    time_op("softmax axis3 (64x4x65x65)", || {
        let mut g = Graph::new();
        let a = g.constant(scores.clone());
        let _ = g.softmax(a, 3).unwrap();
    });
    time_op("gelu (4160x256)", || {
        let mut g = Graph::new();
        let a = g.constant(hidden.clone());
        let _ = g.gelu(a).unwrap();
    });
    time_op("layer_norm (64x65x64)", || {
        let mut g = Graph::new();
        let a = g.constant(x_tok.clone());
        let ga = g.constant(gamma.clone());
        let be = g.constant(gamma.clone());
        let _ = g.layer_norm(a, ga, be).unwrap();
    });
    time_op("mlp fc1 (4160x64x256)", || {
        let mut g = Graph::new();
        let a = g.constant(x_bt_d.clone());
        let w = g.constant(hidden.reshape(&[d, 4 * tn * 64 / 65 * 65 / 64]).unwrap_or_else(|_| t(&[d, 256], &mut CogoRng::new(1, 1))));
        let _ = g.matmul(a, w).unwrap();
    });
    time_op("im2col patch (64 imgs 4x4s4)", || {
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let _ = g.im2col(a, 4, 4, 0).unwrap();
    });
    time_op("concat tokens", || {
        let mut g = Graph::new();
        let a = g.constant(t(&[b, 1, d], &mut CogoRng::new(2, 2)));
        let p = g.constant(t(&[b, 64, d], &mut CogoRng::new(3, 3)));
        let _ = g.concat(a, p, 1).unwrap();
    });
    time_op("add residual (64x65x64) x2", || {
        let mut g = Graph::new();
        let a = g.constant(x_tok.clone());
        let bb = g.constant(x_tok.clone());
        let _ = g.add(a, bb).unwrap();
        let _ = g.add(a, bb).unwrap();
    });
    time_op("add_bias (4160x192)", || {
        let mut g = Graph::new();
        let a = g.constant(t(&[b * tn, 3 * d], &mut CogoRng::new(4, 4)));
        let bias = g.constant(t(&[3 * d], &mut CogoRng::new(5, 5)));
        let _ = g.add_bias(a, bias).unwrap();
    });
}
