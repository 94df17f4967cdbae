//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values, so it stays independent of the
//! backward rules it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Worst elementwise error between analytic and numeric gradients, measured
/// as `|a − n| / max(|a|, |n|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
}

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;

/// Checks `d build(inputs) / d inputs` for a scalar-valued `build`.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_with(inputs, h, Graph::new, build)
}

/// Like [`check`] but every evaluation starts from `make_graph()`, so
/// training-mode graphs with a fixed dropout seed replay the same mask.
pub fn check_with<F, M>(inputs: &[Tensor], h: f64, make_graph: M, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    M: Fn() -> Graph,
{
    let mut g = make_graph();
    let vars = inputs.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = make_graph();
        let vars = ins.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: err,
                    worst_input: i,
                    worst_index: j,
                };
            }
        }
    }
    Ok(worst)
}

/// One registered op wrapped into a scalar-valued test function.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Inputs must be strictly positive (`log`).
    pub positive: bool,
    /// Evaluate on a seeded training graph (`dropout`).
    pub training: bool,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

impl OpCase {
    /// Draws inputs uniformly from `[-2, 2]` (or `[0.2, 2]` for positive
    /// cases), keeping clear of the `relu` kink.
    pub fn random_inputs(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let v: f64 = if self.positive {
                            rng.random_range(0.2..2.0)
                        } else {
                            rng.random_range(-2.0..2.0)
                        };
                        if v.abs() > 1e-2 {
                            break v;
                        }
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("static shape")
            })
            .collect()
    }

    pub fn run(&self, seed: u64) -> Result<GradCheck> {
        let inputs = self.random_inputs(seed);
        if self.training {
            check_with(&inputs, DEFAULT_STEP, || Graph::training(17), self.build)
        } else {
            check(&inputs, DEFAULT_STEP, self.build)
        }
    }
}

/// Contracts an arbitrary tensor to a scalar with fixed, uneven weights so
/// every output element contributes a distinct gradient.
fn reduce(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect();
    let y = g.mul_const(x, w)?;
    g.sum(y)
}

fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

/// Every op the graph supports.
pub fn op_catalog() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        shapes: &'static [&'static [usize]],
        build: fn(&mut Graph, &[Var]) -> Result<Var>,
    ) -> OpCase {
        OpCase { name, shapes, positive: false, training: false, build }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, v| { let y = g.add(v[0], v[1])?; reduce(g, y) }),
        case("sub", &[&[3, 4], &[3, 4]], |g, v| { let y = g.sub(v[0], v[1])?; reduce(g, y) }),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| { let y = g.mul(v[0], v[1])?; reduce(g, y) }),
        case("mul_const", &[&[2, 5]], |g, v| {
            let y = g.mul_const(v[0], (0..10).map(|i| i as f64 - 4.5).collect())?;
            reduce(g, y)
        }),
        case("scale", &[&[6]], |g, v| { let y = g.scale(v[0], -1.7)?; reduce(g, y) }),
        case("add_bias", &[&[2, 3, 4], &[4]], |g, v| { let y = g.add_bias(v[0], v[1])?; reduce(g, y) }),
        case("matmul", &[&[3, 4], &[4, 2]], |g, v| { let y = g.matmul(v[0], v[1])?; reduce(g, y) }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| { let y = g.bmm(v[0], v[1], false)?; reduce(g, y) }),
        case("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |g, v| { let y = g.bmm(v[0], v[1], true)?; reduce(g, y) }),
        case("transpose", &[&[3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            let z = g.mul(y, y)?;
            reduce(g, z)
        }),
        case("reshape", &[&[2, 6]], |g, v| {
            let y = g.reshape(v[0], vec![3, 4])?;
            let z = g.softmax_rows(y)?;
            reduce(g, z)
        }),
        case("slice_cols", &[&[3, 5]], |g, v| { let y = g.slice_cols(v[0], 1, 3)?; reduce(g, y) }),
        case("concat_cols", &[&[3, 2], &[3, 3]], |g, v| {
            let y = g.concat_cols(&[v[0], v[1], v[0]])?;
            reduce(g, y)
        }),
        case("gather_rows", &[&[5, 3]], |g, v| { let y = g.gather_rows(v[0], &[0, 2, 2, 4])?; reduce(g, y) }),
        case("one_hot_matmul", &[&[3, 4]], |g, v| {
            let oh = Tensor::new(vec![4, 3], vec![1., 0., 0., 0., 0., 1., 1., 0., 0., 0., 1., 0.])?;
            let c = g.constant(oh)?;
            let y = g.matmul(c, v[0])?;
            reduce(g, y)
        }),
        case("tanh", &[&[7]], |g, v| { let y = g.tanh(v[0])?; reduce(g, y) }),
        case("sigmoid", &[&[7]], |g, v| { let y = g.sigmoid(v[0])?; reduce(g, y) }),
        case("relu", &[&[7]], |g, v| { let y = g.relu(v[0])?; reduce(g, y) }),
        case("exp", &[&[7]], |g, v| { let y = g.exp(v[0])?; reduce(g, y) }),
        OpCase {
            positive: true,
            ..case("log", &[&[7]], |g, v| { let y = g.log(v[0])?; reduce(g, y) })
        },
        OpCase {
            training: true,
            ..case("dropout", &[&[4, 5]], |g, v| { let y = g.dropout(v[0], 0.3)?; reduce(g, y) })
        },
        case("softmax_rows", &[&[3, 4]], |g, v| { let y = g.softmax_rows(v[0])?; reduce(g, y) }),
        case("layer_norm", &[&[3, 4], &[4], &[4]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            reduce(g, y)
        }),
        case("masked_fill", &[&[2, 3, 3]], |g, v| {
            let y = g.masked_fill(v[0], causal_mask(3))?;
            let z = g.softmax_rows(y)?;
            reduce(g, z)
        }),
        case("row_sum", &[&[3, 4]], |g, v| { let y = g.row_sum(v[0])?; reduce(g, y) }),
        case("sum", &[&[3, 4]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        case("mean", &[&[3, 4]], |g, v| {
            let y = g.exp(v[0])?;
            g.mean(y)
        }),
        case("weighted_sq_error", &[&[5]], |g, v| {
            g.weighted_sq_error(v[0], vec![0.5, -1.0, 0.0, 2.0, 1.0], vec![0.1, 0.2, 0.3, 0.25, 0.15])
        }),
        case("mse", &[&[2, 3]], |g, v| g.mse(v[0], vec![1.0, -1.0, 0.5, 0.0, 0.3, 1.5])),
        case("weighted_cross_entropy", &[&[4, 3]], |g, v| {
            g.weighted_cross_entropy(v[0], vec![0, 2, 1, 2], vec![0.4, 0.1, 0.3, 0.2])
        }),
        case("cross_entropy", &[&[3, 2]], |g, v| g.cross_entropy(v[0], vec![1, 0, 1])),
    ]
}
