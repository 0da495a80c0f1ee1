//! Central finite-difference checks of tape gradients.
//!
//! Errors are vector-norm relative: `‖a − f‖ / max(‖a‖, ‖f‖, FLOOR)`, where
//! `a` is the reverse-mode gradient and `f` the finite-difference estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::model::{log_prob_on_tape, InitScale, ModelDims, ModelParams, Which};
use crate::objectives::{self, Betas, BundleVars, Objective, SftSide};
use crate::synth::{gen_pair, ContrastType, GenOptions};

pub const STEP: f64 = 1e-5;
/// Denominator floor so that two near-zero gradients do not blow up the ratio.
pub const FLOOR: f64 = 1e-8;

pub fn relative_error(a: &[f64], f: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(f).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(f)).max(FLOOR)
}

type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

fn eval(inputs: &[Tensor], f: &Graph) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Worst relative error over all inputs of a scalar graph, every coordinate.
pub fn check_inputs(inputs: &[Tensor], f: &Graph) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            *slot = (eval(&plus, f)? - eval(&minus, f)?) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape")
}

/// `Σ out ⊙ R` for a fixed random `R`, to reduce a tensor to a scalar.
fn project(tape: &mut Tape, out: Var, rng_seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = tape.constant(randn(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

pub const OPS: [&str; 19] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "neg",
    "tanh",
    "exp",
    "log_sigmoid",
    "softplus",
    "log_softmax",
    "gather_rows",
    "pick_per_row",
    "sum",
    "sum_rows",
    "index",
    "stack",
    "mean",
];

/// One random configuration of a named op; returns its worst relative error.
pub fn check_op(op: &str, seed: u64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let proj = rng.random::<u64>();
    let unary = |rng: &mut ChaCha8Rng, std: f64| vec![randn(rng, &[n, m], std)];
    let (inputs, graph): (Vec<Tensor>, Box<Graph>) = match op {
        "matmul" => (
            vec![randn(&mut rng, &[n, k], 1.0), randn(&mut rng, &[k, m], 1.0)],
            Box::new(move |t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o, proj)
            }),
        ),
        "add" | "sub" | "mul" => {
            let name = op.to_string();
            (
                vec![randn(&mut rng, &[n, m], 1.0), randn(&mut rng, &[n, m], 1.0)],
                Box::new(move |t, v| {
                    let o = match name.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    project(t, o, proj)
                }),
            )
        }
        "add_row" => (
            vec![randn(&mut rng, &[n, m], 1.0), randn(&mut rng, &[1, m], 1.0)],
            Box::new(move |t, v| {
                let o = t.add_row(v[0], v[1])?;
                project(t, o, proj)
            }),
        ),
        "scale" => {
            let c: f64 = StandardNormal.sample(&mut rng);
            (
                unary(&mut rng, 1.0),
                Box::new(move |t, v| {
                    let o = t.scale(v[0], c);
                    project(t, o, proj)
                }),
            )
        }
        "neg" | "tanh" | "exp" | "log_sigmoid" | "softplus" => {
            let name = op.to_string();
            let std = if op == "exp" { 1.0 } else { 3.0 };
            (
                unary(&mut rng, std),
                Box::new(move |t, v| {
                    let o = match name.as_str() {
                        "neg" => t.neg(v[0]),
                        "tanh" => t.tanh(v[0]),
                        "exp" => t.exp(v[0]),
                        "log_sigmoid" => t.log_sigmoid(v[0]),
                        _ => t.softplus(v[0]),
                    };
                    project(t, o, proj)
                }),
            )
        }
        "log_softmax" => {
            let three_d = rng.random_bool(0.5);
            let shape = if three_d { vec![n, m, k] } else { vec![n, m] };
            let axis = rng.random_range(0..shape.len());
            (
                vec![randn(&mut rng, &shape, 2.0)],
                Box::new(move |t, v| {
                    let o = t.log_softmax(v[0], axis)?;
                    project(t, o, proj)
                }),
            )
        }
        "gather_rows" => {
            let ids: Vec<usize> = (0..k + 1).map(|_| rng.random_range(0..n)).collect();
            (
                vec![randn(&mut rng, &[n, m], 1.0)],
                Box::new(move |t, v| {
                    let o = t.gather_rows(v[0], &ids)?;
                    project(t, o, proj)
                }),
            )
        }
        "pick_per_row" => {
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            (
                vec![randn(&mut rng, &[n, m], 1.0)],
                Box::new(move |t, v| {
                    let o = t.pick_per_row(v[0], &ids)?;
                    project(t, o, proj)
                }),
            )
        }
        "sum" | "mean" => {
            let name = op.to_string();
            (
                unary(&mut rng, 1.0),
                Box::new(move |t, v| {
                    let s = if name == "sum" { t.sum(v[0]) } else { t.mean(v[0]) };
                    // Square so the gradient depends on the input value.
                    t.mul(s, s)
                }),
            )
        }
        "sum_rows" => (
            unary(&mut rng, 1.0),
            Box::new(move |t, v| {
                let o = t.sum_rows(v[0])?;
                project(t, o, proj)
            }),
        ),
        "index" => {
            let i = rng.random_range(0..n * m);
            (
                unary(&mut rng, 1.0),
                Box::new(move |t, v| {
                    let o = t.index(v[0], i)?;
                    let e = t.exp(o);
                    t.mul(e, o)
                }),
            )
        }
        "stack" => {
            let count = n + 1;
            (
                (0..count).map(|_| randn(&mut rng, &[], 1.0)).collect(),
                Box::new(move |t, v| {
                    let o = t.stack(v)?;
                    let sq = t.mul(o, o)?;
                    project(t, sq, proj)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    };
    check_inputs(&inputs, graph.as_ref())
}

/// Loss shapes checked against the six policy log-likelihoods.
pub const LOSSES: [&str; 9] = [
    "dpo", "viscon", "attend", "reject", "vco", "svco", "mdpo", "sft_w", "sft_l",
];

/// One random bundle pair for a named loss; policy entries are the inputs.
pub fn check_loss(name: &str, seed: u64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let betas = Betas {
        beta: rng.random_range(0.05..2.0),
        beta1: rng.random_range(0.05..2.0),
        beta2: rng.random_range(0.05..2.0),
    };
    let pol = randn(&mut rng, &[6], 4.0);
    let refs: Vec<f64> = (0..6).map(|_| rng.random_range(-20.0..0.0)).collect();
    let name = name.to_string();
    let graph = move |t: &mut Tape, v: &[Var]| -> Result<Var, TensorError> {
        let pick = |t: &mut Tape, i: usize| t.index(v[0], i);
        let mut slots = Vec::with_capacity(6);
        for i in 0..6 {
            slots.push(pick(t, i)?);
        }
        let r: Vec<Var> = refs.iter().map(|&x| t.constant(Tensor::scalar(x))).collect();
        let w = BundleVars {
            pol_iw: slots[0],
            pol_il: slots[1],
            pol_noimg: slots[2],
            ref_iw: r[0],
            ref_il: r[1],
            ref_noimg: r[2],
        };
        let l = BundleVars {
            pol_iw: slots[3],
            pol_il: slots[4],
            pol_noimg: slots[5],
            ref_iw: r[3],
            ref_il: r[4],
            ref_noimg: r[5],
        };
        let wrap = |e: objectives::ObjectiveError| match e {
            objectives::ObjectiveError::Tensor(t) => t,
            other => panic!("{other}"),
        };
        Ok(match name.as_str() {
            "dpo" => objectives::dpo_on(t, &w, &l, &betas).map_err(wrap)?,
            "viscon" => objectives::viscon_on(t, &w, &betas).map_err(wrap)?,
            "attend" => objectives::attend_on(t, &w, &betas).map_err(wrap)?,
            "reject" => objectives::reject_on(t, &w, &betas).map_err(wrap)?,
            "vco" => objectives::vco_on(t, &w, &betas).map_err(wrap)?,
            "svco" => objectives::svco_on(t, &w, &l, &betas).map_err(wrap)?,
            "mdpo" => objectives::mdpo_on(t, &w, &l, &betas, None).map_err(wrap)?,
            "sft_w" => objectives::sft_on(t, &w, SftSide::WOnIw),
            "sft_l" => objectives::sft_on(t, &l, SftSide::LOnIl),
            other => panic!("unknown loss {other}"),
        })
    };
    check_inputs(&[pol], &graph)
}

/// Result of one end-to-end model check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheck {
    pub objective: Objective,
    /// Worst error over random directional derivatives and the vector of
    /// sampled coordinates.
    pub error: f64,
    /// Largest |gradient| reaching the reference parameters.
    pub reference_grad_max: f64,
}

fn model_loss(
    tape: &mut Tape,
    policy: &crate::model::ParamVars,
    reference: &crate::model::ParamVars,
    pairs: &[crate::synth::ContrastPair],
    objective: Objective,
    betas: &Betas,
) -> Result<Var, TensorError> {
    let lift = |e: crate::model::ModelError| match e {
        crate::model::ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    };
    let mut terms = Vec::new();
    for pair in pairs {
        let conds = pair.conditions();
        let mut bundles = Vec::new();
        for which in [Which::W, Which::L] {
            let y = pair.response(which);
            let mut pol = Vec::new();
            let mut rf = Vec::new();
            for c in &conds {
                pol.push(log_prob_on_tape(tape, policy, c, &pair.query, y).map_err(lift)?.0);
                let r = log_prob_on_tape(tape, reference, c, &pair.query, y).map_err(lift)?.0;
                rf.push(tape.detach(r));
            }
            bundles.push(BundleVars {
                pol_iw: pol[0],
                pol_il: pol[1],
                pol_noimg: pol[2],
                ref_iw: rf[0],
                ref_il: rf[1],
                ref_noimg: rf[2],
            });
        }
        let t = objective
            .pair_terms(tape, &bundles[0], &bundles[1], betas, None)
            .map_err(|e| match e {
                objectives::ObjectiveError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
        terms.extend(t);
    }
    objectives::batch_mean(tape, &terms).map_err(|e| match e {
        objectives::ObjectiveError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

/// Random small model, random pairs, one objective; policy perturbed away
/// from the reference so margins are non-zero.
pub fn check_model(objective: Objective, seed: u64) -> Result<ModelCheck, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        width: rng.random_range(3..=6),
        hidden_layers: rng.random_range(1..=2),
        ..ModelDims::default()
    };
    let reference = ModelParams::init(dims, InitScale::default(), rng.random()).expect("valid dims");
    let mut policy = reference.clone();
    for t in policy.tensors_mut() {
        for x in t.data_mut() {
            *x += 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let opts = GenOptions {
        shortcut: rng.random_bool(0.5),
        ..GenOptions::default()
    };
    let pairs: Vec<_> = (0..2)
        .map(|i| {
            let ct = ContrastType::ALL[rng.random_range(0..4)];
            gen_pair(seed, i, ct, &opts)
        })
        .collect();
    let betas = Betas {
        beta: rng.random_range(0.1..1.0),
        beta1: rng.random_range(0.1..1.0),
        beta2: rng.random_range(0.1..1.0),
    };

    let mut tape = Tape::new();
    let pv = policy.on_tape(&mut tape, true);
    let rv = reference.on_tape(&mut tape, true);
    let loss = model_loss(&mut tape, &pv, &rv, &pairs, objective, &betas)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = pv.vars().into_iter().map(|v| grads.wrt(v)).collect();
    let reference_grad_max = rv
        .vars()
        .into_iter()
        .flat_map(|v| grads.wrt(v).into_data())
        .fold(0.0f64, |m, g| m.max(g.abs()));

    let value_at = |p: &ModelParams| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let pv = p.on_tape(&mut tape, false);
        let rv = reference.on_tape(&mut tape, false);
        let loss = model_loss(&mut tape, &pv, &rv, &pairs, objective, &betas)?;
        Ok(tape.value(loss).item())
    };
    let shift = |dir: &[Tensor], h: f64| -> ModelParams {
        let mut p = policy.clone();
        for (t, d) in p.tensors_mut().into_iter().zip(dir) {
            for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
                *x += h * dx;
            }
        }
        p
    };

    let mut error = 0.0f64;
    // Directional derivatives along random unit directions.
    for _ in 0..3 {
        let dir: Vec<Tensor> = analytic.iter().map(|g| randn(&mut rng, g.shape(), 1.0)).collect();
        let norm = dir
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let dir: Vec<Tensor> = dir
            .into_iter()
            .map(|t| {
                let shape = t.shape().to_vec();
                Tensor::new(shape, t.into_data().into_iter().map(|x| x / norm).collect()).expect("shape")
            })
            .collect();
        let a: f64 = analytic
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.data().iter().zip(d.data()).map(|(x, y)| x * y))
            .sum();
        let f = (value_at(&shift(&dir, STEP))? - value_at(&shift(&dir, -STEP))?) / (2.0 * STEP);
        error = error.max(relative_error(&[a], &[f]));
    }
    // Sampled coordinates from every tensor, compared as one vector.
    let mut a = Vec::new();
    let mut f = Vec::new();
    for (ti, g) in analytic.iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..g.len());
            let mut dir: Vec<Tensor> = analytic.iter().map(|t| Tensor::zeros(t.shape())).collect();
            dir[ti].data_mut()[j] = 1.0;
            a.push(g.data()[j]);
            f.push((value_at(&shift(&dir, STEP))? - value_at(&shift(&dir, -STEP))?) / (2.0 * STEP));
        }
    }
    error = error.max(relative_error(&a, &f));
    Ok(ModelCheck {
        objective,
        error,
        reference_grad_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·stop(x) is stop(x), but finite differences see 2x.
        let x = Tensor::vector(vec![1.5]);
        let err = check_inputs(&[x], &|t, v| {
            let d = t.detach(v[0]);
            let p = t.mul(v[0], d)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(err > 0.3, "{err}");
    }

    #[test]
    fn one_of_each() {
        for op in OPS {
            assert!(check_op(op, 1).unwrap() < 1e-4, "{op}");
        }
        for l in LOSSES {
            assert!(check_loss(l, 1).unwrap() < 1e-4, "{l}");
        }
        let m = check_model(Objective::Svco, 1).unwrap();
        assert!(m.error < 1e-4, "{m:?}");
        assert_eq!(m.reference_grad_max, 0.0);
    }
}
