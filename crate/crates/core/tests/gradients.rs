//! Central-difference checks of every differentiable graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vda_core::{Graph, Padding, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Builds `f(inputs)` reduced to a scalar by a fixed random projection so
/// that every output element gets a distinct upstream gradient.
fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eval = |vals: &[Tensor], rng_seed: u64| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("p{i}"), t, true))
            .collect();
        let y = f(&mut g, &vars);
        let mut r = ChaCha8Rng::seed_from_u64(rng_seed);
        let proj = random(&mut r, g.shape(y));
        let p = g.input(proj);
        let prod = g.mul(y, p).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        let gs = (0..vals.len())
            .map(|i| {
                grads
                    .param(&format!("p{i}"))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(vals[i].shape()))
            })
            .collect();
        (g.value(s).item(), gs)
    };
    let (_, analytic) = eval(inputs, 99);
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = (0..12).map(|_| rng.gen_range(0..t.len())).collect();
        for i in picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, 99).0 - eval(&minus, 99).0) / (2.0 * h);
            let a = analytic[k].data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / scale < 1e-5,
                "{name}: input {k}[{i}] analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_transpose_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ins = [
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[5]),
    ];
    check("matmul", &ins, |g, v| {
        let t = g.transpose(v[1]).unwrap();
        let m = g.matmul(v[0], t).unwrap();
        g.add_bias(m, v[2]).unwrap()
    });
}

#[test]
fn conv2d_stride_one_and_two() {
    for stride in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(2 + stride as u64);
        let ins = [
            random(&mut rng, &[2, 3, 7, 6]),
            random(&mut rng, &[4, 3, 3, 3]),
            random(&mut rng, &[4]),
        ];
        check(&format!("conv stride {stride}"), &ins, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Same)
                .unwrap()
        });
        check(&format!("conv valid stride {stride}"), &ins, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, Padding::Valid)
                .unwrap()
        });
    }
}

#[test]
fn pooling_and_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ins = [random(&mut rng, &[2, 4, 6, 6])];
    check("maxout", &ins, |g, v| g.maxout(v[0]).unwrap());
    check("vmax", &ins, |g, v| g.vmax_pool(v[0]).unwrap());
    check("avg", &ins, |g, v| g.avg_pool(v[0], 3).unwrap());
    check("relu", &ins, |g, v| g.relu(v[0]));
    check("leaky", &ins, |g, v| g.leaky_relu(v[0], 0.1));
    check("max_pool odd", &ins, |g, v| {
        g.max_pool(v[0], 1, 3, 2).unwrap()
    });
}

#[test]
fn softmax_family_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ins = [random(&mut rng, &[4, 5])];
    check("softmax", &ins, |g, v| g.softmax(v[0]).unwrap());
    check("log_softmax", &ins, |g, v| g.log_softmax(v[0]).unwrap());
    check("l2_normalize", &ins, |g, v| g.l2_normalize(v[0]).unwrap());
    check("log", &ins, |g, v| {
        let s = g.softmax(v[0]).unwrap();
        g.log(s).unwrap()
    });
}

#[test]
fn elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ins = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
    check("add", &ins, |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", &ins, |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", &ins, |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &ins, |g, v| g.scale(v[0], -2.5));
    check("square", &ins, |g, v| g.square(v[0]));
    check("sum_rows", &ins, |g, v| g.sum_rows(v[0]).unwrap());
    check("mean", &ins, |g, v| g.mean(v[0]));
}

#[test]
fn indexing_and_reshaping() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ins = [random(&mut rng, &[4, 3]), random(&mut rng, &[2, 3])];
    check("gather", &ins, |g, v| {
        g.gather(v[0], vec![2, 0, 1, 2]).unwrap()
    });
    check("select_rows", &ins, |g, v| {
        g.select_rows(v[0], vec![3, 1, 1]).unwrap()
    });
    check("concat_rows", &ins, |g, v| {
        g.concat_rows(&[v[0], v[1], v[0]]).unwrap()
    });
    check("reshape", &ins, |g, v| g.reshape(v[0], vec![2, 6]).unwrap());
}
