//! Central finite-difference gradient checks.

use rand::{Rng, RngCore};

use crate::{OpKind, Tape, Tensor, Var};

/// Builds an output from leaf inputs.
pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;
/// Draws one input entry.
pub type Sampler = dyn Fn(&mut dyn RngCore) -> f64;

/// Every op kind a tape can record besides leaves.
pub const DIFFERENTIABLE_OPS: [OpKind; 22] = [
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Tanh,
    OpKind::Sigmoid,
    OpKind::Exp,
    OpKind::Sin,
    OpKind::Square,
    OpKind::Recip,
    OpKind::Softplus,
    OpKind::Prelu,
    OpKind::ClampMin,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::RowSums,
    OpKind::Broadcast,
    OpKind::SliceCols,
    OpKind::Reshape,
    OpKind::Im2Col,
];

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` along coordinate `j` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], j: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[j] += h;
    let mut m = x.to_vec();
    m[j] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Scalar objective `sum(out ⊙ weights)` so every output entry matters.
fn objective(tape: &mut Tape, inputs: &[Var], build: &Build, weights: &Tensor) -> Var {
    let out = build(tape, inputs);
    let w = tape.constant(
        weights
            .reshaped(tape.shape(out))
            .expect("weights sized from the output"),
    );
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

fn eval(inputs: &[Tensor], build: &Build, weights: &Tensor) -> f64 {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = objective(&mut tape, &vars, build, weights);
    tape.value(root).item()
}

/// Worst relative error between analytic and numeric gradients over every
/// input entry, for a random linear functional of `build`'s output.
pub fn max_relative_error(inputs: &[Tensor], build: &Build, h: f64, rng: &mut dyn RngCore) -> f64 {
    let out_len = {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).numel()
    };
    let weights = Tensor::vector((0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = objective(&mut tape, &vars, build, &weights);
    let grads = tape.backward(root).expect("objective depends on the leaves");

    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).expect("leaf gradient");
        for j in 0..input.numel() {
            let mut f = |x: &[f64]| {
                let mut moved = inputs.to_vec();
                moved[idx].data_mut().copy_from_slice(x);
                eval(&moved, build, &weights)
            };
            let numeric = central_difference(&mut f, input.data(), j, h);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}

/// Runs every case at `points` random inputs; returns the worst error per case.
pub fn run_op_suite(points: usize, h: f64, rng: &mut dyn RngCore) -> Vec<(OpKind, f64)> {
    op_cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..points {
                let inputs: Vec<Tensor> = case
                    .shapes
                    .iter()
                    .map(|s| {
                        let n = s.iter().product();
                        Tensor::new(s, (0..n).map(|_| (case.sample)(&mut *rng)).collect())
                            .expect("sized from shape")
                    })
                    .collect();
                worst = worst.max(max_relative_error(&inputs, &*case.build, h, &mut *rng));
            }
            (case.kind, worst)
        })
        .collect()
}

fn uniform(lo: f64, hi: f64) -> impl Fn(&mut dyn RngCore) -> f64 {
    move |r| r.random_range(lo..hi)
}

/// Values bounded away from `kink` by at least `gap`.
fn away_from(kink: f64, gap: f64) -> impl Fn(&mut dyn RngCore) -> f64 {
    move |r| {
        let mag = r.random_range(gap..2.0);
        if r.random_bool(0.5) {
            kink + mag
        } else {
            kink - mag
        }
    }
}

/// One op under test: input shapes, how to sample inputs, and how to build it.
pub struct OpCase {
    pub kind: OpKind,
    pub shapes: Vec<Vec<usize>>,
    pub sample: Box<Sampler>,
    pub build: Box<Build>,
}

/// At least one case for every non-leaf [`OpKind`], with kinks avoided.
pub fn op_cases() -> Vec<OpCase> {
    let std = || -> Box<Sampler> { Box::new(uniform(-2.0, 2.0)) };
    vec![
        OpCase {
            kind: OpKind::MatMul,
            shapes: vec![vec![3, 4], vec![4, 2]],
            sample: std(),
            build: Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::Add,
            shapes: vec![vec![3, 4], vec![4]],
            sample: std(),
            build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::Sub,
            shapes: vec![vec![3, 4], vec![3, 1]],
            sample: std(),
            build: Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::Mul,
            shapes: vec![vec![3, 4], vec![3, 4]],
            sample: std(),
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::Mul,
            shapes: vec![vec![2, 5], vec![1]],
            sample: std(),
            build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::Scale,
            shapes: vec![vec![5]],
            sample: std(),
            build: Box::new(|t, v| t.scale(v[0], -1.7)),
        },
        OpCase {
            kind: OpKind::AddScalar,
            shapes: vec![vec![5]],
            sample: std(),
            build: Box::new(|t, v| t.add_scalar(v[0], 0.3)),
        },
        OpCase {
            kind: OpKind::Tanh,
            shapes: vec![vec![6]],
            sample: std(),
            build: Box::new(|t, v| t.tanh(v[0])),
        },
        OpCase {
            kind: OpKind::Sigmoid,
            shapes: vec![vec![6]],
            sample: std(),
            build: Box::new(|t, v| t.sigmoid(v[0])),
        },
        OpCase {
            kind: OpKind::Exp,
            shapes: vec![vec![6]],
            sample: std(),
            build: Box::new(|t, v| t.exp(v[0])),
        },
        OpCase {
            kind: OpKind::Sin,
            shapes: vec![vec![6]],
            sample: Box::new(uniform(-6.0, 6.0)),
            build: Box::new(|t, v| t.sin(v[0])),
        },
        OpCase {
            kind: OpKind::Square,
            shapes: vec![vec![6]],
            sample: std(),
            build: Box::new(|t, v| t.square(v[0])),
        },
        OpCase {
            kind: OpKind::Recip,
            shapes: vec![vec![6]],
            sample: Box::new(away_from(0.0, 0.3)),
            build: Box::new(|t, v| t.recip(v[0])),
        },
        OpCase {
            kind: OpKind::Softplus,
            shapes: vec![vec![6]],
            sample: Box::new(uniform(-4.0, 4.0)),
            build: Box::new(|t, v| t.softplus(v[0])),
        },
        OpCase {
            kind: OpKind::Prelu,
            shapes: vec![vec![2, 4], vec![1]],
            sample: Box::new(away_from(0.0, 1e-3)),
            build: Box::new(|t, v| t.prelu(v[0], v[1]).unwrap()),
        },
        OpCase {
            kind: OpKind::ClampMin,
            shapes: vec![vec![8]],
            sample: Box::new(away_from(0.5, 1e-3)),
            build: Box::new(|t, v| t.clamp_min(v[0], 0.5)),
        },
        OpCase {
            kind: OpKind::Sum,
            shapes: vec![vec![2, 3]],
            sample: std(),
            build: Box::new(|t, v| {
                let s = t.square(v[0]);
                t.sum(s)
            }),
        },
        OpCase {
            kind: OpKind::Mean,
            shapes: vec![vec![2, 3]],
            sample: std(),
            build: Box::new(|t, v| {
                let s = t.tanh(v[0]);
                t.mean(s)
            }),
        },
        OpCase {
            kind: OpKind::RowSums,
            shapes: vec![vec![3, 4]],
            sample: std(),
            build: Box::new(|t, v| t.row_sums(v[0]).unwrap()),
        },
        OpCase {
            kind: OpKind::Broadcast,
            shapes: vec![vec![3, 1]],
            sample: std(),
            build: Box::new(|t, v| t.broadcast(v[0], &[3, 5]).unwrap()),
        },
        OpCase {
            kind: OpKind::Broadcast,
            shapes: vec![vec![5]],
            sample: std(),
            build: Box::new(|t, v| t.broadcast(v[0], &[3, 5]).unwrap()),
        },
        OpCase {
            kind: OpKind::SliceCols,
            shapes: vec![vec![3, 6]],
            sample: std(),
            build: Box::new(|t, v| t.slice_cols(v[0], 1, 4).unwrap()),
        },
        OpCase {
            kind: OpKind::Reshape,
            shapes: vec![vec![2, 6]],
            sample: std(),
            build: Box::new(|t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        },
        OpCase {
            kind: OpKind::Im2Col,
            shapes: vec![vec![2, 6, 6, 2]],
            sample: std(),
            build: Box::new(|t, v| t.im2col(v[0], 3, 2, 1).unwrap()),
        },
    ]
}

