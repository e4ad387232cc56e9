//! Reverse-mode gradients of randomly composed smooth graphs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revseg::gradcheck::{check_graph, random_projection, GradcheckOptions};
use revseg::tensor::{Graph, Shape, Tensor, Var};
use revseg::Result;

const SHAPE: Shape = Shape::new(2, 2, 4, 4);

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Appends `depth` random smooth ops to the pool of live nodes and returns
/// a scalar projection of the last one. Deterministic in `seed`.
fn build(g: &mut Graph<f64>, inputs: &[Var], seed: u64, depth: usize) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = inputs[2];
    let mut pool = vec![inputs[0], inputs[1]];
    for _ in 0..depth {
        let a = pool[rng.gen_range(0..pool.len())];
        let b = pool[rng.gen_range(0..pool.len())];
        let next = match rng.gen_range(0..10) {
            0 => g.sigmoid(a),
            1 => g.gelu(a),
            2 => g.softmax_channels(a),
            3 => g.add(a, b)?,
            4 => g.mul(a, b)?,
            5 => {
                let s = rng.gen_range(-2.0..2.0);
                g.scalar_mul(a, s)
            }
            6 => g.sub_from_scalar(1.0, a),
            7 => g.conv2d(a, weight, None, 1, 1)?,
            8 => {
                let up = g.resize(a, 6, 7)?;
                let t = g.sigmoid(up);
                g.resize(t, 4, 4)?
            }
            _ => {
                let cat = g.concat_channels(&[a, b])?;
                let s = g.sigmoid(cat);
                g.slice_channels(s, 1, 2)?
            }
        };
        pool.push(next);
    }
    let last = *pool.last().expect("non-empty pool");
    random_projection(g, last, seed ^ 0xABCD)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_smooth_graphs_match_finite_differences(seed in any::<u64>(), depth in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(SHAPE, &mut rng),
            random(SHAPE, &mut rng),
            random(Shape::new(2, 2, 3, 3), &mut rng),
        ];
        let report = check_graph(
            "random",
            &inputs,
            |g, v| build(g, v, seed, depth),
            &GradcheckOptions::new(1e-4),
        )
        .unwrap();
        prop_assert!(report.passed, "{report:?}");
    }

    #[test]
    fn gradient_accumulates_over_reuse(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(SHAPE, &mut rng);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x, true);
        let mut total = g.sum(v);
        for _ in 1..k {
            let s = g.sum(v);
            total = g.add(total, s).unwrap();
        }
        g.backward(total).unwrap();
        prop_assert!(g.grad(v).unwrap().iter().all(|&d| d == k as f64));
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(SHAPE, 0.5), true);
    let c = g.constant(Tensor::full(SHAPE, 2.0));
    let y = g.mul(x, c).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none() || g.grad(c).unwrap().iter().all(|&d| d == 0.0));
    assert!(g.grad(x).unwrap().iter().all(|&d| d == 2.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(SHAPE, 0.5), true);
    let y = g.sigmoid(x);
    assert!(g.backward(y).is_err());
}
