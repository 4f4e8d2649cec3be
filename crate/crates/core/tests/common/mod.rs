//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::StandardNormal;
use rope_core::npe::{FlowModel, FlowSpec};
use rope_core::tensor::OpKind;
use rope_core::{seed, Tape, TaskId, Tensor, Var};

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Dense primal solve of the entropic transport problem by damped Newton.
///
/// Feasible directions span the null space of the marginal constraints:
/// `E_ij − E_i,last` keeps rows fixed; balanced mode (`rho = None`) uses
/// `E_ij − E_i,last − E_last,j + E_last,last`, which also keeps columns fixed.
/// Returns `(objective, P)`.
pub fn ot_newton_oracle(c: &[Vec<f64>], gamma: f64, rho: Option<f64>) -> (f64, Vec<Vec<f64>>) {
    let (n, m) = (c.len(), c[0].len());
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let idx = |i: usize, j: usize| i * m + j;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let row_range = if rho.is_some() { n } else { n - 1 };
    for i in 0..row_range {
        for j in 0..m - 1 {
            let mut v = vec![0.0; n * m];
            v[idx(i, j)] += 1.0;
            v[idx(i, m - 1)] -= 1.0;
            if rho.is_none() {
                v[idx(n - 1, j)] -= 1.0;
                v[idx(n - 1, m - 1)] += 1.0;
            }
            basis.push(v);
        }
    }
    let objective = |p: &[f64]| -> f64 {
        if p.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        let mut val = 0.0;
        for i in 0..n {
            for j in 0..m {
                let v = p[idx(i, j)];
                val += v * c[i][j] + gamma * v * v.ln();
            }
        }
        if let Some(rho) = rho {
            for j in 0..m {
                let q: f64 = (0..n).map(|i| p[idx(i, j)]).sum();
                val += rho * q * (q / b).ln();
            }
        }
        val
    };
    let mut p = vec![a * b; n * m];
    let dim = basis.len();
    for _ in 0..200 {
        let q: Vec<f64> = (0..m).map(|j| (0..n).map(|i| p[idx(i, j)]).sum()).collect();
        let mut grad_p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut g = c[i][j] + gamma * (p[idx(i, j)].ln() + 1.0);
                if let Some(rho) = rho {
                    g += rho * ((q[j] / b).ln() + 1.0);
                }
                grad_p[idx(i, j)] = g;
            }
        }
        // Hessian in P: diag(γ/P) plus ρ/q_j on every pair within column j.
        let hess_p = |u: &[f64], v: &[f64]| -> f64 {
            let mut s = 0.0;
            for k in 0..n * m {
                s += gamma / p[k] * u[k] * v[k];
            }
            if let Some(rho) = rho {
                for j in 0..m {
                    let su: f64 = (0..n).map(|i| u[idx(i, j)]).sum();
                    let sv: f64 = (0..n).map(|i| v[idx(i, j)]).sum();
                    s += rho / q[j] * su * sv;
                }
            }
            s
        };
        let g: Vec<f64> = basis
            .iter()
            .map(|bv| bv.iter().zip(&grad_p).map(|(x, y)| x * y).sum())
            .collect();
        if g.iter().all(|v| v.abs() < 1e-14) {
            break;
        }
        let h: Vec<Vec<f64>> = (0..dim)
            .map(|r| (0..dim).map(|s| hess_p(&basis[r], &basis[s])).collect())
            .collect();
        let step = solve(h, g.iter().map(|v| -v).collect());
        let dir: Vec<f64> = (0..n * m)
            .map(|k| (0..dim).map(|r| step[r] * basis[r][k]).sum())
            .collect();
        let f0 = objective(&p);
        let slope: f64 = g.iter().zip(&step).map(|(x, y)| x * y).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = p.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let f1 = objective(&cand);
            if f1 <= f0 + 1e-4 * t * slope || t < 1e-12 {
                if f1.is_finite() {
                    p = cand;
                }
                break;
            }
            t *= 0.5;
        }
    }
    let val = objective(&p);
    (
        val,
        (0..n).map(|i| p[i * m..(i + 1) * m].to_vec()).collect(),
    )
}

/// Central finite difference of `f` along coordinate `k` of `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[k] += h;
    xm[k] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, s: u64) -> Tensor {
    let mut rng = seed::rng(s);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Differentiable ops with generic inputs. Inputs of `log`, `sqrt` and `abs`
/// stay away from zero and `relu` inputs stay away from the kink.
pub fn op_cases() -> Vec<(&'static str, OpKind, Vec<Tensor>)> {
    let m = |s: u64| random_tensor(&[3, 4], -2.0, 2.0, s);
    let pos = |s: u64| random_tensor(&[3, 4], 0.5, 2.0, s);
    let kinked = Tensor::new(
        vec![3, 4],
        vec![
            -1.3, 0.7, 1.1, -0.4, 0.3, -0.9, 1.8, 0.6, -1.7, 0.2, -0.25, 1.4,
        ],
    )
    .unwrap();
    vec![
        ("add", OpKind::Add, vec![m(1), m(2)]),
        (
            "add_bias",
            OpKind::Add,
            vec![m(3), random_tensor(&[4], -1.0, 1.0, 4)],
        ),
        ("sub", OpKind::Sub, vec![m(5), m(6)]),
        (
            "sub_bias",
            OpKind::Sub,
            vec![m(7), random_tensor(&[4], -1.0, 1.0, 8)],
        ),
        ("mul", OpKind::Mul, vec![m(9), m(10)]),
        (
            "mul_bias",
            OpKind::Mul,
            vec![m(11), random_tensor(&[4], -1.0, 1.0, 12)],
        ),
        (
            "matmul",
            OpKind::MatMul,
            vec![m(13), random_tensor(&[4, 2], -1.0, 1.0, 14)],
        ),
        ("relu", OpKind::Relu, vec![kinked.clone()]),
        ("tanh", OpKind::Tanh, vec![m(15)]),
        ("exp", OpKind::Exp, vec![m(16)]),
        ("log", OpKind::Log, vec![pos(17)]),
        ("sqrt", OpKind::Sqrt, vec![pos(18)]),
        ("square", OpKind::Square, vec![m(19)]),
        ("abs", OpKind::Abs, vec![kinked]),
        ("scale", OpKind::Scale(-1.7), vec![m(20)]),
        ("sum", OpKind::Sum, vec![m(21)]),
        ("mean", OpKind::Mean, vec![m(22)]),
        ("sum_last", OpKind::SumLast, vec![m(23)]),
        ("logsumexp", OpKind::LogSumExp, vec![m(24)]),
        (
            "broadcast",
            OpKind::Broadcast(3),
            vec![random_tensor(&[4], -1.0, 1.0, 25)],
        ),
        ("slice", OpKind::Slice(1, 3), vec![m(26)]),
        (
            "concat",
            OpKind::Concat,
            vec![m(27), random_tensor(&[3, 2], -1.0, 1.0, 28)],
        ),
    ]
}

/// Output contracted with fixed pseudo-random weights, so every output
/// entry contributes a distinct amount to the scalar.
fn contract<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    let w = random_tensor(&out.shape(), 0.5, 1.5, 99);
    out.mul(tape.constant(&w)).unwrap().sum()
}

fn op_value(kind: OpKind, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    contract(&tape, tape.forward_op(kind, &vars).unwrap()).item()
}

/// Max relative error between reverse-mode and central-difference gradients.
pub fn op_gradient_error(kind: OpKind, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().requiring_grad()))
        .collect();
    let loss = contract(&tape, tape.forward_op(kind, &vars).unwrap());
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (a, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for k in 0..inputs[a].numel() {
            let numeric = central_diff(
                |x| {
                    let mut ins = inputs.to_vec();
                    ins[a] = Tensor::new(inputs[a].shape().to_vec(), x.to_vec()).unwrap();
                    op_value(kind, &ins)
                },
                inputs[a].data(),
                k,
                1e-6,
            );
            worst = worst.max(rel_err(analytic[k], numeric, 1e-6));
        }
    }
    worst
}

/// A small pendulum flow with every parameter perturbed off its
/// initialisation, plus a batch of interior θ and raw observations.
pub fn perturbed_flow(s: u64) -> (FlowModel, Tensor, Tensor) {
    let sim = TaskId::Pendulum.simulator();
    let mut model = FlowModel::new(FlowSpec::for_simulator(&sim, 2, &[8]), s);
    let mut rng = seed::rng(seed::derive(s, 1));
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (theta, x) = rope_core::simulators::sample_pairs(
        &sim,
        &rope_core::BoxPrior::new(vec![0.3, 1.0], vec![2.7, 9.5]),
        6,
        s,
        false,
    )
    .unwrap();
    model.nse.fit_standardization(&x);
    (model, theta, x)
}

/// Reverse-mode gradient of the mean log-probability with respect to every
/// parameter, checked against central differences of the tape-free forward
/// pass on up to `per_tensor` coordinates of each parameter tensor.
pub fn flow_gradient_error(per_tensor: usize) -> f64 {
    let (model, theta, x) = perturbed_flow(7);
    let tape = Tape::new();
    let bound = model.bind(&tape, true, true);
    let ctx = model.summaries_tape(&tape, &bound, &x).unwrap();
    let lp = model
        .log_prob_tape(&tape, &bound, &theta, ctx)
        .unwrap()
        .mean();
    let plain: f64 =
        model.log_prob_obs(&theta, &x).unwrap().iter().sum::<f64>() / theta.rows() as f64;
    assert!(
        (lp.item() - plain).abs() < 1e-10,
        "tape {} vs plain {plain}",
        lp.item()
    );
    let grads = tape.backward(lp).unwrap();
    let vars: Vec<Var> = bound.all().collect();
    let mut worst = 0.0f64;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = analytic.len();
        let stride = (n / per_tensor).max(1);
        for k in (0..n).step_by(stride).take(per_tensor) {
            let f = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[pi].data_mut()[k] += delta;
                m.log_prob_obs(&theta, &x).unwrap().iter().sum::<f64>() / theta.rows() as f64
            };
            let h = 1e-5;
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], numeric, 1e-4));
        }
    }
    worst
}

/// Max `|θ − g⁻¹(g(θ))|` through the squashing map and the flow, over a
/// batch of prior draws.
pub fn flow_roundtrip_error(n: usize) -> f64 {
    let (model, _, x) = perturbed_flow(11);
    let k = model.theta_dim();
    let sq = &model.spec.squash;
    let prior = rope_core::BoxPrior::new(sq.lo.clone(), sq.hi.clone());
    let theta = prior.sample_n(n, 5);
    let ctx = model.summaries(&x.select_rows(&[0])).unwrap();
    let mut z = vec![0.0; n * k];
    for i in 0..n {
        sq.forward(theta.row(i), &mut z[i * k..(i + 1) * k])
            .unwrap();
    }
    let (u, _) = model.flow.forward_plain(&z, ctx.data(), n);
    let z_back = model.flow.inverse_plain(&u, ctx.data(), n);
    let mut worst = 0.0f64;
    let mut back = vec![0.0; k];
    for i in 0..n {
        sq.inverse(&z_back[i * k..(i + 1) * k], &mut back);
        for d in 0..k {
            worst = worst.max((back[d] - theta.get(i, d)).abs());
        }
    }
    worst
}

/// Importance estimate of `∫ p̃(θ | x) dθ` under a uniform proposal on the
/// support box: `(estimate, standard error)`.
pub fn mc_normalization(n: usize) -> (f64, f64) {
    let (model, _, x) = perturbed_flow(13);
    let sq = &model.spec.squash;
    let prior = rope_core::BoxPrior::new(sq.lo.clone(), sq.hi.clone());
    let theta = prior.sample_n(n, 17);
    let ctx = model.summaries(&x.select_rows(&[0])).unwrap();
    let w: Vec<f64> = model
        .log_prob(&theta, &ctx)
        .unwrap()
        .iter()
        .map(|lp| lp.exp() * prior.volume())
        .collect();
    let mean = w.iter().sum::<f64>() / n as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
