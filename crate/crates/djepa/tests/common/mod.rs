//! Shared test support: a central finite-difference oracle for gradients.
//!
//! The oracle only ever evaluates forward passes on detached tensors; it is
//! independent of the reverse-mode path it checks.

use djepa::rng::Stream;
use djepa::tensor::{Tape, Tensor};

/// A differentiable scalar function of several tensor inputs, described by
/// the input shapes and an evaluation over tensors (attached or not).
pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub eval: Box<dyn Fn(&[Tensor]) -> Tensor>,
}

/// Max guarded relative error between reverse-mode and central-difference
/// gradients over every input element.
pub fn gradcheck(case: &Case, stream: &mut Stream) -> f64 {
    let data: Vec<Vec<f64>> = case
        .shapes
        .iter()
        .map(|s| stream.normal_vec(s.iter().product()))
        .collect();

    // reverse mode
    let tape = Tape::new();
    let leaves: Vec<Tensor> = data
        .iter()
        .zip(&case.shapes)
        .map(|(d, s)| tape.leaf(d.clone(), s))
        .collect();
    let loss = (case.eval)(&leaves);
    assert_eq!(loss.numel(), 1, "{}: loss must be scalar", case.name);
    let grads = tape.backward(&loss).expect("backward");

    // forward-only evaluation for the oracle
    let f = |data: &[Vec<f64>]| -> f64 {
        let tensors: Vec<Tensor> = data
            .iter()
            .zip(&case.shapes)
            .map(|(d, s)| Tensor::from_vec(d.clone(), s))
            .collect();
        (case.eval)(&tensors).item()
    };

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let ad = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; data[which].len()]);
        for idx in 0..data[which].len() {
            let mut lo = data.to_vec();
            let mut hi = data.to_vec();
            lo[which][idx] -= h;
            hi[which][idx] += h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let err = (ad[idx] - fd).abs() / f64::max(1.0, f64::max(ad[idx].abs(), fd.abs()));
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Run `instances` random instances of a case builder, returning the worst
/// relative error seen.
pub fn gradcheck_many(
    instances: usize,
    stream: &mut Stream,
    build: impl Fn(&mut Stream) -> Case,
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let case = build(stream);
        worst = worst.max(gradcheck(&case, stream));
    }
    worst
}

/// The op-kind registry: every differentiable operation the engine exposes,
/// as randomized gradcheck cases. Integer arguments (indices, labels, axes)
/// are drawn per instance.
pub fn op_cases(stream: &mut Stream) -> Vec<Case> {
    let mut cases = Vec::new();
    let dim = |stream: &mut Stream| 2 + stream.below(3); // 2..=4

    let (m, k, n) = (dim(stream), dim(stream), dim(stream));
    let b = 1 + stream.below(3);

    cases.push(Case {
        name: "add",
        shapes: vec![vec![m, n], vec![m, n]],
        eval: Box::new(|t| t[0].add(&t[1]).unwrap().mean_all().unwrap()),
    });
    cases.push(Case {
        name: "sub",
        shapes: vec![vec![m, n], vec![m, n]],
        eval: Box::new(|t| t[0].sub(&t[1]).unwrap().mean_all().unwrap()),
    });
    cases.push(Case {
        name: "mul",
        shapes: vec![vec![m, n], vec![m, n]],
        eval: Box::new(|t| t[0].mul(&t[1]).unwrap().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "scale",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].scale(-1.7).sum_all().unwrap()),
    });
    cases.push(Case {
        name: "add_scalar",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].add_scalar(0.3).mul(&t[0]).unwrap().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "matmul2d",
        shapes: vec![vec![m, k], vec![k, n]],
        eval: Box::new(|t| t[0].matmul(&t[1]).unwrap().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "matmul3d",
        shapes: vec![vec![b, m, k], vec![b, k, n]],
        eval: Box::new(|t| t[0].matmul(&t[1]).unwrap().mean_all().unwrap()),
    });
    cases.push(Case {
        name: "reshape",
        shapes: vec![vec![m, 2 * n]],
        eval: Box::new(move |t| {
            t[0].reshape(&[2 * t[0].shape()[0], t[0].shape()[1] / 2])
                .unwrap()
                .silu()
                .sum_all()
                .unwrap()
        }),
    });
    let (d0, d1) = (stream.below(3), stream.below(3));
    cases.push(Case {
        name: "transpose",
        shapes: vec![vec![m, k, n]],
        eval: Box::new(move |t| t[0].transpose(d0, d1).unwrap().gelu().sum_all().unwrap()),
    });
    let sel: Vec<usize> = (0..m + 1).map(|_| stream.below(m)).collect();
    cases.push(Case {
        name: "index_select",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| {
            t[0].index_select(0, &sel).unwrap().silu().sum_all().unwrap()
        }),
    });
    cases.push(Case {
        name: "concat",
        shapes: vec![vec![m, n], vec![k, n]],
        eval: Box::new(|t| {
            djepa::tensor::concat(&[&t[0], &t[1]], 0)
                .unwrap()
                .silu()
                .sum_all()
                .unwrap()
        }),
    });
    let sm_w = Tensor::from_vec(stream.normal_vec(m * n), &[m, n]);
    cases.push(Case {
        name: "softmax",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| {
            // fixed random weights exercise the full softmax Jacobian
            t[0].softmax().unwrap().mul(&sm_w).unwrap().sum_all().unwrap()
        }),
    });
    cases.push(Case {
        name: "layer_norm",
        shapes: vec![vec![m, n + 1], vec![m, n + 1], vec![m, n + 1]],
        eval: Box::new(|t| {
            t[0].layer_norm(&t[1], &t[2], 1e-6)
                .unwrap()
                .silu()
                .sum_all()
                .unwrap()
        }),
    });
    cases.push(Case {
        name: "silu",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].silu().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "gelu",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].gelu().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "sum_all",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].mul(&t[0]).unwrap().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "mean_all",
        shapes: vec![vec![m, n]],
        eval: Box::new(|t| t[0].mul(&t[0]).unwrap().mean_all().unwrap()),
    });
    let ax = stream.below(2);
    cases.push(Case {
        name: "sum_axis",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| t[0].sum_axis(ax).unwrap().silu().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "mean_axis",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| t[0].mean_axis(ax).unwrap().gelu().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "broadcast",
        shapes: vec![vec![n]],
        eval: Box::new(move |t| {
            t[0].broadcast_to(&[3, 2, t[0].shape()[0]])
                .unwrap()
                .silu()
                .sum_all()
                .unwrap()
        }),
    });
    // embedding lookup with repeated ids: gradient must accumulate
    let ids: Vec<usize> = (0..m + 2).map(|_| stream.below(m)).collect();
    cases.push(Case {
        name: "embedding",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| t[0].embedding(&ids).unwrap().silu().sum_all().unwrap()),
    });
    cases.push(Case {
        name: "smooth_l1",
        shapes: vec![vec![m, n], vec![m, n]],
        eval: Box::new(|t| {
            // keep the difference away from the C¹ junction so the central
            // difference stays on one branch
            let beta = 1.0;
            let a = nudge_off_kink(&t[0], &t[1], beta);
            a.smooth_l1(&t[1], beta).unwrap().mean_all().unwrap()
        }),
    });
    let labels: Vec<usize> = (0..m).map(|_| stream.below(n)).collect();
    cases.push(Case {
        name: "cross_entropy",
        shapes: vec![vec![m, n]],
        eval: Box::new(move |t| t[0].cross_entropy(&labels).unwrap()),
    });
    cases.push(Case {
        name: "attention_composite",
        shapes: vec![vec![b, m, k], vec![b, m, k], vec![b, m, k]],
        eval: Box::new(|t| {
            djepa::tensor::scaled_dot_attention(&t[0], &t[1], &t[2])
                .unwrap()
                .sum_all()
                .unwrap()
        }),
    });
    cases
}

/// Shift `a` so that |a − b| never lands within 1e-3 of `beta` (elementwise).
fn nudge_off_kink(a: &Tensor, b: &Tensor, beta: f64) -> Tensor {
    let margin = 1e-3;
    let shifted: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&av, &bv)| {
            let d = av - bv;
            if (d.abs() - beta).abs() < margin {
                av + 2.0 * margin * d.signum()
            } else {
                av
            }
        })
        .collect();
    // preserve tape participation by adding the (constant) shift
    let delta: Vec<f64> = shifted
        .iter()
        .zip(a.data())
        .map(|(s, o)| s - o)
        .collect();
    a.add(&Tensor::from_vec(delta, a.shape())).unwrap()
}
