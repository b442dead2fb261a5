//! Central finite-difference checks of every graph primitive in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, NodeId, ParamStore, QuantMode, Tensor, STE_CLIP};

pub(crate) const EPS: f64 = 1e-4;

/// Per-element relative error with a 1e-3 floor on the denominator so
/// gradients that are analytically ~0 are judged on absolute error.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid by construction")
}

type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, NnError>;

/// Loss `Σ wᵢ·yᵢ` with fixed random weights, so every output gradient is exercised.
fn weighted_loss(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y).to_vec(), -1.0, 1.0);
    let w = g.input(w);
    let p = g.mul(y, w).expect("valid by construction");
    g.sum(p).expect("valid by construction")
}

fn eval(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &ids).expect("primitive builds");
    let l = weighted_loss(&mut g, y, seed);
    g.scalar(l)
}

/// Max relative error between analytic and central-difference gradients over all inputs.
fn grad_check(inputs: Vec<Tensor<f64>>, build: &Build, seed: u64) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &ids).expect("valid by construction");
    let l = weighted_loss(&mut g, y, seed);
    let back = g.backward(l).expect("valid by construction");
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = back.wrt(*id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (eval(&plus, build, seed) - eval(&minus, build, seed)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Values bounded away from zero (kinks of relu / clamp).
fn away_from(rng: &mut ChaCha8Rng, shape: Vec<usize>, kink: f64) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if (*v - kink).abs() < 0.05 {
            *v += 0.1;
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Checks each primitive on `trials` random input sets. The loss is a fixed
/// random weighting of the primitive's output, so every output gradient counts.
pub fn primitive_gradcheck(seed: u64, trials: usize) -> Vec<PrimitiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>, Box<Build>)> = vec![
        (
            "matmul",
            Box::new(|r| vec![rand_tensor(r, vec![3, 4], -1.0, 1.0), rand_tensor(r, vec![4, 2], -1.0, 1.0)]),
            Box::new(|g, x| g.matmul(x[0], x[1])),
        ),
        (
            "transpose",
            Box::new(|r| vec![rand_tensor(r, vec![3, 5], -1.0, 1.0)]),
            Box::new(|g, x| g.transpose(x[0])),
        ),
        (
            "bias_add",
            Box::new(|r| vec![rand_tensor(r, vec![3, 4], -1.0, 1.0), rand_tensor(r, vec![4], -1.0, 1.0)]),
            Box::new(|g, x| g.bias_add(x[0], x[1])),
        ),
        (
            "add",
            Box::new(|r| vec![rand_tensor(r, vec![6], -1.0, 1.0), rand_tensor(r, vec![6], -1.0, 1.0)]),
            Box::new(|g, x| g.add(x[0], x[1])),
        ),
        (
            "sub",
            Box::new(|r| vec![rand_tensor(r, vec![6], -1.0, 1.0), rand_tensor(r, vec![6], -1.0, 1.0)]),
            Box::new(|g, x| g.sub(x[0], x[1])),
        ),
        (
            "mul",
            Box::new(|r| vec![rand_tensor(r, vec![2, 3], -1.0, 1.0), rand_tensor(r, vec![2, 3], -1.0, 1.0)]),
            Box::new(|g, x| g.mul(x[0], x[1])),
        ),
        ("scale", Box::new(|r| vec![rand_tensor(r, vec![5], -1.0, 1.0)]), Box::new(|g, x| g.scale(x[0], -2.5))),
        ("tanh", Box::new(|r| vec![rand_tensor(r, vec![7], -2.0, 2.0)]), Box::new(|g, x| g.tanh(x[0]))),
        ("gelu", Box::new(|r| vec![rand_tensor(r, vec![7], -3.0, 3.0)]), Box::new(|g, x| g.gelu(x[0]))),
        ("relu", Box::new(|r| vec![away_from(r, vec![7], 0.0)]), Box::new(|g, x| g.relu(x[0]))),
        (
            "clamp",
            Box::new(|r| {
                let mut t = rand_tensor(r, vec![8], -0.5, 1.5);
                for v in t.data_mut() {
                    if v.abs() < 0.05 || (*v - 1.0).abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                vec![t]
            }),
            Box::new(|g, x| g.clamp(x[0], 0.0, 1.0)),
        ),
        (
            "quantize_ste",
            Box::new(|r| {
                let mut t = rand_tensor(r, vec![8], -6.0, 6.0);
                for v in t.data_mut() {
                    if (v.abs() - STE_CLIP).abs() < 0.05 {
                        *v *= 0.9;
                    }
                }
                vec![t]
            }),
            Box::new(|g, x| g.quantize_ste(x[0], QuantMode::Surrogate)),
        ),
        (
            "complex_gain",
            Box::new(|r| vec![rand_tensor(r, vec![6], -1.0, 1.0)]),
            Box::new(|g, x| g.complex_gain(x[0], vec![(0.3, -1.2), (2.0, 0.5), (-0.7, 0.1)])),
        ),
        ("softmax", Box::new(|r| vec![rand_tensor(r, vec![3, 5], -2.0, 2.0)]), Box::new(|g, x| g.softmax(x[0]))),
        (
            "layer_norm",
            Box::new(|r| {
                vec![
                    rand_tensor(r, vec![3, 6], -2.0, 2.0),
                    rand_tensor(r, vec![6], 0.5, 1.5),
                    rand_tensor(r, vec![6], -0.5, 0.5),
                ]
            }),
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        ),
        (
            "conv2d",
            Box::new(|r| {
                vec![
                    rand_tensor(r, vec![2, 5, 5], -1.0, 1.0),
                    rand_tensor(r, vec![3, 2, 3, 3], -1.0, 1.0),
                    rand_tensor(r, vec![3], -1.0, 1.0),
                ]
            }),
            Box::new(|g, x| g.conv2d(x[0], x[1], x[2], 2, 1)),
        ),
        (
            "conv_transpose2d",
            Box::new(|r| {
                vec![
                    rand_tensor(r, vec![3, 3, 3], -1.0, 1.0),
                    rand_tensor(r, vec![3, 2, 4, 4], -1.0, 1.0),
                    rand_tensor(r, vec![2], -1.0, 1.0),
                ]
            }),
            Box::new(|g, x| g.conv_transpose2d(x[0], x[1], x[2], 2, 1)),
        ),
        (
            "reshape",
            Box::new(|r| vec![rand_tensor(r, vec![2, 6], -1.0, 1.0)]),
            Box::new(|g, x| g.reshape(x[0], vec![3, 4])),
        ),
        (
            "patchify",
            Box::new(|r| vec![rand_tensor(r, vec![4, 6, 2], -1.0, 1.0)]),
            Box::new(|g, x| g.patchify(x[0], 2)),
        ),
        (
            "unpatchify",
            Box::new(|r| vec![rand_tensor(r, vec![6, 8], -1.0, 1.0)]),
            Box::new(|g, x| g.unpatchify(x[0], 4, 6, 2, 2)),
        ),
        (
            "slice_cols",
            Box::new(|r| vec![rand_tensor(r, vec![3, 5], -1.0, 1.0)]),
            Box::new(|g, x| g.slice_cols(x[0], 1, 3)),
        ),
        (
            "concat_cols",
            Box::new(|r| vec![rand_tensor(r, vec![3, 2], -1.0, 1.0), rand_tensor(r, vec![3, 4], -1.0, 1.0)]),
            Box::new(|g, x| g.concat_cols(&[x[0], x[1]])),
        ),
        (
            "concat0",
            Box::new(|r| vec![rand_tensor(r, vec![1, 2, 2], -1.0, 1.0), rand_tensor(r, vec![2, 2, 2], -1.0, 1.0)]),
            Box::new(|g, x| g.concat0(&[x[0], x[1]])),
        ),
        ("sum", Box::new(|r| vec![rand_tensor(r, vec![2, 3], -1.0, 1.0)]), Box::new(|g, x| g.sum(x[0]))),
        ("mean", Box::new(|r| vec![rand_tensor(r, vec![5], -1.0, 1.0)]), Box::new(|g, x| g.mean(x[0]))),
        (
            "mse_loss",
            Box::new(|r| vec![rand_tensor(r, vec![2, 3], 0.0, 1.0), rand_tensor(r, vec![2, 3], 0.0, 1.0)]),
            Box::new(|g, x| g.mse_loss(x[0], x[1])),
        ),
        (
            "masked_mse_loss",
            Box::new(|r| vec![rand_tensor(r, vec![2, 4], 0.0, 1.0), rand_tensor(r, vec![2, 4], 0.0, 1.0)]),
            Box::new(|g, x| g.masked_mse_loss(x[0], x[1], &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0], 8, 5)),
        ),
        (
            "attention",
            Box::new(|r| {
                vec![
                    rand_tensor(r, vec![4, 3], -1.0, 1.0),
                    rand_tensor(r, vec![4, 3], -1.0, 1.0),
                    rand_tensor(r, vec![4, 3], -1.0, 1.0),
                ]
            }),
            Box::new(|g, x| g.attention(x[0], x[1], x[2])),
        ),
    ];
    cases
        .iter()
        .map(|(name, make, build)| {
            let max_rel_err = (0..trials)
                .map(|t| grad_check(make(&mut rng), build.as_ref(), 1000 + t as u64))
                .fold(0.0, f64::max);
            PrimitiveCheck { name, trials, max_rel_err }
        })
        .collect()
}
