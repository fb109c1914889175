//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use batchless::network::{ForwardOptions, Model, ParamRole};
use batchless::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-2)`; the floor keeps near-zero gradients
/// from inflating the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Uniform magnitude in `[lo, hi)` with a random sign.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error over `probes` randomly chosen parameter entries.
/// `build` receives one tape variable per tensor in `params` (registered in
/// order as parameters) and returns a scalar loss.
pub fn gradcheck(
    params: &[Tensor],
    probes: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut flat = r.random_range(0..total);
        let mut which = 0;
        while flat >= params[which].len() {
            flat -= params[which].len();
            which += 1;
        }
        let analytic = grads.get(vars[which]).unwrap().data()[flat];
        let mut ps = params.to_vec();
        let base = ps[which].data()[flat];
        ps[which].data_mut()[flat] = base + FD_STEP;
        let up = eval(&ps);
        ps[which].data_mut()[flat] = base - FD_STEP;
        let down = eval(&ps);
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Gradcheck of a model's total loss (task, likelihood and weight decay)
/// with respect to its own parameters.
pub fn model_gradcheck(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    opts: ForwardOptions,
    probes: usize,
    seed: u64,
) -> f64 {
    // The outputs see μ and σ only through stop-gradients and each
    // likelihood sees its input only through one. So μ and σ are
    // differenced on their own layer's likelihood (they still move the
    // inputs of later layers), everything else on task loss plus decay.
    // Clones keep batch-norm moving averages identical across evaluations.
    let info = model.param_info();
    let loss_of = |m: &Model, which: Option<usize>| -> (f64, Vec<Tensor>) {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, x, opts).unwrap();
        let loss = m.total_loss(&mut tape, &pass, labels, None, true).unwrap();
        let nll = |layer: Option<usize>| -> f64 {
            pass.nll
                .iter()
                .zip(&pass.norm_layers)
                .filter(|&(_, &l)| layer.is_none_or(|k| k == l))
                .map(|(&v, _)| tape.value(v).item())
                .sum()
        };
        let value = match which.map(|w| &info[w]) {
            Some(i) if matches!(i.role, ParamRole::Mu | ParamRole::Sigma) => nll(Some(i.layer)),
            _ => tape.value(loss.total).item() - nll(None),
        };
        let g = tape.backward(loss.total).unwrap();
        let grads = pass
            .params
            .iter()
            .map(|&v| g.get(v).unwrap().clone())
            .collect();
        (value, grads)
    };
    let (_, grads) = loss_of(model, None);
    let total: usize = grads.iter().map(Tensor::len).sum();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut flat = r.random_range(0..total);
        let mut which = 0;
        while flat >= grads[which].len() {
            flat -= grads[which].len();
            which += 1;
        }
        let base = model.params()[which].data()[flat];
        model.params_mut()[which].data_mut()[flat] = base + FD_STEP;
        let up = loss_of(model, Some(which)).0;
        model.params_mut()[which].data_mut()[flat] = base - FD_STEP;
        let down = loss_of(model, Some(which)).0;
        model.params_mut()[which].data_mut()[flat] = base;
        worst = worst.max(rel_err(
            grads[which].data()[flat],
            (up - down) / (2.0 * FD_STEP),
        ));
    }
    worst
}

/// Per-unit mean and ML standard deviation of a `[n, units]` matrix.
pub fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, u) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; u];
    for row in x.data().chunks(u) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; u];
    for row in x.data().chunks(u) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable operation under test: its inputs and a scalar loss
/// that depends on every output entry.
pub struct OpCase {
    pub name: String,
    pub params: Vec<Tensor>,
    pub build: Builder,
}

/// `Σ w ⊙ y` with fixed random weights, so every output entry carries a
/// distinct gradient.
pub fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = uniform(&mut rng(seed), tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum_all(p).unwrap()
}

fn case(
    name: impl Into<String>,
    params: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> OpCase {
    OpCase {
        name: name.into(),
        params,
        build: Box::new(build),
    }
}

/// Every differentiable primitive, including the normalization layers.
/// Inputs keep clear of kinks (|x| ≥ 0.05 for abs and leaky ReLU, distinct
/// pool candidates), so central differences stay on one smooth piece.
pub fn op_cases() -> Vec<OpCase> {
    use batchless::network::{dropout, DropoutStream, Phase};
    use batchless::norm::{
        batchless_forward, batchnorm_forward, batchrenorm_forward, BatchNormState, BatchlessVars,
        NllWeighting, NormLayerState, RenormClip, Sharing, SigmaMode,
    };
    use batchless::{Binary, Reduction, Unary};

    let mut r = rng(0x0C0DE);
    let mut cases = Vec::new();
    let unaries: [(&str, Unary, f64, f64, bool); 11] = [
        ("isrlu", Unary::Isrlu(4.0), 0.0, 2.0, true),
        ("leaky_relu", Unary::LeakyRelu(0.3), 0.05, 2.0, true),
        ("exp", Unary::Exp, -2.0, 2.0, false),
        ("log", Unary::Log, 0.3, 3.0, false),
        ("abs", Unary::Abs, 0.05, 2.0, true),
        ("square", Unary::Square, -2.0, 2.0, false),
        ("sqrt", Unary::Sqrt, 0.3, 3.0, false),
        ("recip", Unary::Recip, 0.3, 3.0, true),
        ("neg", Unary::Neg, -2.0, 2.0, false),
        ("scale", Unary::Scale(-1.7), -2.0, 2.0, false),
        ("add_scalar", Unary::AddScalar(0.3), -2.0, 2.0, false),
    ];
    for (name, f, lo, hi, sign) in unaries {
        let x = if sign {
            signed(&mut r, &[4, 5], lo, hi)
        } else {
            uniform(&mut r, &[4, 5], lo, hi)
        };
        cases.push(case(name, vec![x], move |t, v| {
            let y = t.unary(v[0], f).unwrap();
            weighted(t, y, 1)
        }));
    }
    for (name, kind) in [
        ("add", Binary::Add),
        ("sub", Binary::Sub),
        ("mul", Binary::Mul),
        ("div", Binary::Div),
    ] {
        let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let b = signed(&mut r, &[3, 4], 0.5, 2.0);
        cases.push(case(name, vec![a, b], move |t, v| {
            let y = t.binary(v[0], v[1], kind).unwrap();
            weighted(t, y, 2)
        }));
        let a = uniform(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
        let b = signed(&mut r, &[3, 1, 1], 0.5, 2.0);
        cases.push(case(
            format!("{name} (broadcast)"),
            vec![a, b],
            move |t, v| {
                let y = t.binary(v[0], v[1], kind).unwrap();
                weighted(t, y, 3)
            },
        ));
    }
    cases.push(case(
        "matmul",
        vec![
            uniform(&mut r, &[3, 4], -1.0, 1.0),
            uniform(&mut r, &[4, 5], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted(t, y, 4)
        },
    ));
    for (name, kind, axes) in [
        ("sum over axis 1", Reduction::Sum, vec![1]),
        ("mean over axes 0, 2", Reduction::Mean, vec![0, 2]),
        ("mean over all axes", Reduction::Mean, vec![0, 1, 2]),
    ] {
        cases.push(case(
            name,
            vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)],
            move |t, v| {
                let y = t.reduce(v[0], kind, &axes).unwrap();
                let y = t.square(y).unwrap();
                weighted(t, y, 5)
            },
        ));
    }
    cases.push(case(
        "broadcast_to rows",
        vec![uniform(&mut r, &[3], -1.0, 1.0)],
        |t, v| {
            let y = t.broadcast_to(v[0], &[4, 3]).unwrap();
            weighted(t, y, 6)
        },
    ));
    cases.push(case(
        "broadcast_to channels",
        vec![uniform(&mut r, &[3, 1, 1], -1.0, 1.0)],
        |t, v| {
            let y = t.broadcast_to(v[0], &[2, 3, 2, 2]).unwrap();
            weighted(t, y, 7)
        },
    ));
    cases.push(case(
        "reshape",
        vec![uniform(&mut r, &[2, 6], -1.0, 1.0)],
        |t, v| {
            let y = t.reshape(v[0], &[3, 4]).unwrap();
            let y = t.square(y).unwrap();
            weighted(t, y, 8)
        },
    ));
    cases.push(case(
        "conv2d 3x3",
        vec![
            uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1]).unwrap();
            weighted(t, y, 9)
        },
    ));
    cases.push(case(
        "conv2d 5x5",
        vec![
            uniform(&mut r, &[1, 1, 6, 6], -1.0, 1.0),
            uniform(&mut r, &[2, 1, 5, 5], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.conv2d(v[0], v[1]).unwrap();
            weighted(t, y, 10)
        },
    ));
    for shape in [[2usize, 2, 4, 4], [1, 1, 5, 5]] {
        let n: usize = shape.iter().product();
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut r);
        let x = Tensor::new(shape.to_vec(), values).unwrap();
        cases.push(case(format!("maxpool2d {shape:?}"), vec![x], |t, v| {
            let y = t.maxpool2d(v[0]).unwrap();
            weighted(t, y, 11)
        }));
    }
    let labels = vec![0, 2, 1, 1, 0];
    cases.push(case(
        "softmax_cross_entropy",
        vec![uniform(&mut r, &[5, 3], -2.0, 2.0)],
        move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
    ));
    cases.push(case(
        "softmax_cross_entropy (fixed normalizer)",
        vec![uniform(&mut r, &[2, 4], -2.0, 2.0)],
        |t, v| {
            t.softmax_cross_entropy_normalized(v[0], &[3, 1], 7.0)
                .unwrap()
        },
    ));
    cases.push(case(
        "dropout",
        vec![uniform(&mut r, &[6, 5], -1.0, 1.0)],
        |t, v| {
            let stream = DropoutStream {
                seed: 3,
                layer: 1,
                offset: 0,
            };
            let y = dropout(t, v[0], 0.3, Phase::Train, stream).unwrap();
            weighted(t, y, 12)
        },
    ));

    for mode in [SigmaMode::Direct, SigmaMode::Log, SigmaMode::Inverse] {
        for (shape, sharing) in [
            (vec![6, 4], Sharing::PerFeature),
            (vec![3, 2, 3, 3], Sharing::PerChannel),
        ] {
            let units = shape[1];
            let sigma = match mode {
                SigmaMode::Log => uniform(&mut r, &[units], -0.5, 0.5),
                _ => signed(&mut r, &[units], 0.5, 2.0),
            };
            let state = NormLayerState {
                mu: uniform(&mut r, &[units], -0.5, 0.5),
                sigma_param: sigma,
                gamma: uniform(&mut r, &[units], 0.5, 1.5),
                beta: uniform(&mut r, &[units], -0.5, 0.5),
                mode,
                lambda: 0.7,
                sharing,
            };
            let params = vec![
                uniform(&mut r, &shape, -2.0, 2.0),
                state.mu.clone(),
                state.sigma_param.clone(),
                state.gamma.clone(),
                state.beta.clone(),
            ];
            // the output path treats μ and σ as constants and the
            // likelihood path treats the input as one, so each is checked
            // against differences taken with the other side held fixed
            let out_state = state.clone();
            cases.push(case(
                format!("batchless output {mode:?} {sharing:?}"),
                vec![params[0].clone(), params[3].clone(), params[4].clone()],
                move |t, v| {
                    let vars = BatchlessVars {
                        mu: t.constant(out_state.mu.clone()),
                        sigma_param: t.constant(out_state.sigma_param.clone()),
                        gamma: v[1],
                        beta: v[2],
                    };
                    let out = batchless_forward(t, v[0], vars, &out_state, NllWeighting::default())
                        .unwrap();
                    weighted(t, out.output, 13)
                },
            ));
            let input = params[0].clone();
            cases.push(case(
                format!("batchless likelihood {mode:?} {sharing:?}"),
                vec![params[1].clone(), params[2].clone()],
                move |t, v| {
                    let vars = BatchlessVars {
                        mu: v[0],
                        sigma_param: v[1],
                        gamma: t.constant(state.gamma.clone()),
                        beta: t.constant(state.beta.clone()),
                    };
                    let x = t.constant(input.clone());
                    batchless_forward(t, x, vars, &state, NllWeighting::default())
                        .unwrap()
                        .nll
                },
            ));
        }
    }
    for (shape, sharing) in [
        (vec![6, 4], Sharing::PerFeature),
        (vec![3, 2, 2, 2], Sharing::PerChannel),
    ] {
        let units = shape[1];
        let params = vec![
            uniform(&mut r, &shape, -2.0, 2.0),
            uniform(&mut r, &[units], 0.5, 1.5),
            uniform(&mut r, &[units], -0.5, 0.5),
        ];
        let state = BatchNormState::new(units, sharing, None);
        cases.push(case(
            format!("batchnorm {sharing:?}"),
            params.clone(),
            move |t, v| {
                let mut s = state.clone();
                let y = batchnorm_forward(t, v[0], v[1], v[2], &mut s, Phase::Train).unwrap();
                weighted(t, y, 14)
            },
        ));
        // Moving statistics far from the batch push r and d onto their clip
        // bounds, where the stop-gradient factors are locally constant.
        let mut state = BatchNormState::new(units, sharing, Some(RenormClip::default()));
        state.moving_mu = Tensor::full(&[units], 1e3);
        state.moving_var = Tensor::full(&[units], 1e4);
        cases.push(case(
            format!("batchrenorm (clipped) {sharing:?}"),
            params,
            move |t, v| {
                let mut s = state.clone();
                let y = batchrenorm_forward(
                    t,
                    v[0],
                    v[1],
                    v[2],
                    &mut s,
                    Phase::Train,
                    RenormClip::default(),
                )
                .unwrap();
                weighted(t, y, 15)
            },
        ));
    }
    cases
}
