use proptest::prelude::*;
use sim_core::gradcore::{FdCheck, Graph, ParamStore, Tensor, Var};
use sim_core::rng::Stream;

fn randn(shape: &[usize], rng: &mut Stream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// out[b, co, t] = bias[co] + Σ_ci Σ_k w[co, ci, k] · x[b, ci, t·s + k − p]
fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f32], s: usize, p: usize) -> Tensor {
    let (bn, ci_n, l) = (x.dim(0), x.dim(1), x.dim(2));
    let (co_n, k_n) = (w.dim(0), w.dim(2));
    let l_out = (l + 2 * p - k_n) / s + 1;
    let mut out = Tensor::zeros(&[bn, co_n, l_out]);
    for b in 0..bn {
        for co in 0..co_n {
            for t in 0..l_out {
                let mut acc = bias[co] as f64;
                for ci in 0..ci_n {
                    for k in 0..k_n {
                        let pos = (t * s + k) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w.data()[(co * ci_n + ci) * k_n + k] as f64
                                * x.data()[(b * ci_n + ci) * l + pos as usize] as f64;
                        }
                    }
                }
                out.data_mut()[(b * co_n + co) * l_out + t] = acc as f32;
            }
        }
    }
    out
}

/// Scatter form: out[b, co, i·s + k − p] += x[b, ci, i] · w[ci, co, k].
fn conv_t_oracle(x: &Tensor, w: &Tensor, bias: &[f32], s: usize, p: usize, op: usize) -> Tensor {
    let (bn, ci_n, l) = (x.dim(0), x.dim(1), x.dim(2));
    let (co_n, k_n) = (w.dim(1), w.dim(2));
    let l_out = (l - 1) * s + k_n + op - 2 * p;
    let mut acc = vec![0.0f64; bn * co_n * l_out];
    for b in 0..bn {
        for co in 0..co_n {
            for t in 0..l_out {
                acc[(b * co_n + co) * l_out + t] = bias[co] as f64;
            }
            for ci in 0..ci_n {
                for i in 0..l {
                    for k in 0..k_n {
                        let pos = (i * s + k) as isize - p as isize;
                        if pos >= 0 && (pos as usize) < l_out {
                            acc[(b * co_n + co) * l_out + pos as usize] += x.data()[(b * ci_n + ci) * l + i]
                                as f64
                                * w.data()[(ci * co_n + co) * k_n + k] as f64;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bn, co_n, l_out], acc.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-gate scalar GRU recomputation, PyTorch gate order (r, z, n).
fn gru_oracle(x: &Tensor, h0: &[f32], w_ih: &Tensor, w_hh: &Tensor, b_ih: &[f32], b_hh: &[f32]) -> Vec<f32> {
    let (t_n, d_in) = (x.dim(1), x.dim(2));
    let h = h0.len();
    let mut state: Vec<f64> = h0.iter().map(|&v| v as f64).collect();
    let mut out = Vec::new();
    for t in 0..t_n {
        let xt: Vec<f64> = (0..d_in).map(|i| x.data()[t * d_in + i] as f64).collect();
        let lin = |w: &Tensor, v: &[f64], row: usize, bias: f64| -> f64 {
            let cols = v.len();
            bias + (0..cols).map(|c| w.data()[row * cols + c] as f64 * v[c]).sum::<f64>()
        };
        let mut next = vec![0.0; h];
        for j in 0..h {
            let r = sigmoid(lin(w_ih, &xt, j, b_ih[j] as f64) + lin(w_hh, &state, j, b_hh[j] as f64));
            let z = sigmoid(lin(w_ih, &xt, h + j, b_ih[h + j] as f64) + lin(w_hh, &state, h + j, b_hh[h + j] as f64));
            let n = (lin(w_ih, &xt, 2 * h + j, b_ih[2 * h + j] as f64)
                + r * lin(w_hh, &state, 2 * h + j, b_hh[2 * h + j] as f64))
            .tanh();
            next[j] = (1.0 - z) * n + z * state[j];
        }
        state = next;
        out.extend(state.iter().map(|&v| v as f32));
    }
    out
}

#[test]
fn conv1d_matches_loop_oracle_on_small_case() {
    let mut rng = Stream::new(1, 0);
    let x = randn(&[1, 2, 9], &mut rng);
    let w = randn(&[3, 2, 3], &mut rng);
    let b = randn(&[3], &mut rng);
    let mut g: Graph = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1d(vx, vw, Some(vb), 2, 1).unwrap();
    let want = conv_oracle(&x, &w, b.data(), 2, 1);
    assert_eq!(g.value(y).shape(), &[1, 3, 5]);
    assert!(g.value(y).max_abs_diff(&want) < 1e-6);
}

#[test]
fn conv1d_identity_kernel_and_first_layer_shape() {
    let mut rng = Stream::new(2, 0);
    let x = randn(&[1, 1, 17], &mut rng);
    let mut g: Graph = Graph::new();
    let vx = g.constant(x.clone());
    let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(vx, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let wave = g.constant(randn(&[1, 1, 10240], &mut rng));
    let w1 = g.constant(randn(&[512, 1, 10], &mut rng));
    let y1 = g.conv1d(wave, w1, None, 5, 2).unwrap();
    assert_eq!(g.value(y1).shape(), &[1, 512, 2047]);
}

#[test]
fn conv1d_shape_errors_name_dimensions() {
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 8]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3]));
    let err = g.conv1d(x, w, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
    let w = g.constant(Tensor::zeros(&[4, 2, 12]));
    let err = g.conv1d(x, w, None, 1, 1).unwrap_err().to_string();
    assert!(err.contains("kernel 12"), "{err}");
}

#[test]
fn conv_transpose_matches_oracle_and_inverts_first_layer_length() {
    let mut rng = Stream::new(3, 0);
    let x = randn(&[2, 3, 5], &mut rng);
    let w = randn(&[3, 2, 4], &mut rng);
    let b = randn(&[2], &mut rng);
    let mut g: Graph = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv_transpose1d(vx, vw, Some(vb), 2, 1, 1).unwrap();
    let want = conv_t_oracle(&x, &w, b.data(), 2, 1, 1);
    assert_eq!(g.value(y).shape(), want.shape());
    assert!(g.value(y).max_abs_diff(&want) < 1e-6);

    let z = g.constant(randn(&[1, 512, 2047], &mut rng));
    let wt = g.constant(randn(&[512, 1, 10], &mut rng));
    let wave = g.conv_transpose1d(z, wt, None, 5, 2, 4).unwrap();
    assert_eq!(g.value(wave).shape(), &[1, 1, 10240]);

    let xi = g.constant(x.index0(0).reshape(&[1, 3, 5]).unwrap());
    let idw = g.constant(Tensor::new(vec![3, 3, 1], {
        let mut v = vec![0.0; 9];
        v[0] = 1.0;
        v[4] = 1.0;
        v[8] = 1.0;
        v
    })
    .unwrap());
    let yi = g.conv_transpose1d(xi, idw, None, 1, 0, 0).unwrap();
    assert_eq!(g.value(yi), g.value(xi));
}

fn gru_params(rng: &mut Stream, d_in: usize, h: usize, zero: bool) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut mk = |shape: &[usize]| {
        if zero {
            Tensor::zeros(shape)
        } else {
            randn(shape, rng)
        }
    };
    (mk(&[3 * h, d_in]), mk(&[3 * h, h]), mk(&[3 * h]), mk(&[3 * h]))
}

fn run_gru(x: &Tensor, h0: &Tensor, p: &(Tensor, Tensor, Tensor, Tensor)) -> Tensor {
    let mut g: Graph = Graph::new();
    let vars: Vec<Var> = [x, h0, &p.0, &p.1, &p.2, &p.3].iter().map(|t| g.constant((*t).clone())).collect();
    let y = g.gru(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
    g.value(y).clone()
}

#[test]
fn gru_zero_parameters_stay_at_zero() {
    let mut rng = Stream::new(4, 0);
    let x = randn(&[1, 6, 3], &mut rng);
    let p = gru_params(&mut rng, 3, 4, true);
    let y = run_gru(&x, &Tensor::zeros(&[1, 4]), &p);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_matches_scalar_oracle() {
    let mut rng = Stream::new(5, 0);
    let x = randn(&[1, 3, 2], &mut rng);
    let h0 = randn(&[1, 2], &mut rng);
    let p = gru_params(&mut rng, 2, 2, false);
    let y = run_gru(&x, &h0, &p);
    let want = gru_oracle(&x, h0.data(), &p.0, &p.1, p.2.data(), p.3.data());
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    // T = 1 is a single cell evaluation.
    let x1 = Tensor::new(vec![1, 1, 2], x.data()[..2].to_vec()).unwrap();
    let y1 = run_gru(&x1, &h0, &p);
    assert!((y1.data()[0] - y.data()[0]).abs() < 1e-7);
    assert!((y1.data()[1] - y.data()[1]).abs() < 1e-7);
}

/// Finite differences run in f64: f32 rounding of the loss alone is ~1e-7
/// relative, which swamps a 1e-3 step.
type Wide = f64;
const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-6;

/// Build `loss = Σ R ⊙ f(params)` with R fixed, then compare the analytic
/// gradient of every parameter with central differences.
fn fd_primitive(store: &ParamStore, seed: u64, f: impl Fn(&mut Graph<Wide>, &ParamStore<Wide>) -> Var) -> f64 {
    let mut store: ParamStore<Wide> = store.cast();
    let store = &mut store;
    let probe = {
        let mut g: Graph<Wide> = Graph::new();
        let y = f(&mut g, store);
        g.value(y).shape().to_vec()
    };
    let mut rng = Stream::new(seed, 99);
    let r: Tensor<Wide> = randn(&probe, &mut rng).cast();
    let eval = |g: &mut Graph<Wide>, store: &ParamStore<Wide>| {
        let y = f(g, store);
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv).unwrap();
        g.sum(prod)
    };
    let mut g: Graph<Wide> = Graph::new();
    let loss = eval(&mut g, store);
    g.backward(loss).unwrap().accumulate_into(&g, store).unwrap();
    let report = FdCheck::new(FD_H, FD_TOL)
        .run(store, |s| {
            let mut g: Graph<Wide> = Graph::new();
            let l = eval(&mut g, s);
            Ok(g.scalar(l))
        })
        .unwrap();
    assert!(report.passed(), "{:#?}", report.flagged());
    report.max_rel_error()
}

fn store_with(items: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = Stream::new(seed, 0);
    let mut s = ParamStore::new();
    for (name, shape) in items {
        s.add(*name, randn(shape, &mut rng)).unwrap();
    }
    s
}

#[test]
fn backward_of_conv_primitives_matches_finite_differences() {
    let s = store_with(&[("x", &[2, 2, 9]), ("w", &[3, 2, 3]), ("b", &[3])], 10);
    fd_primitive(&s, 1, |g, s| {
        let x = g.param_named(s, "x").unwrap();
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        g.conv1d(x, w, Some(b), 2, 1).unwrap()
    });
    let s = store_with(&[("x", &[2, 3, 5]), ("w", &[3, 2, 4]), ("b", &[2])], 11);
    fd_primitive(&s, 2, |g, s| {
        let x = g.param_named(s, "x").unwrap();
        let w = g.param_named(s, "w").unwrap();
        let b = g.param_named(s, "b").unwrap();
        g.conv_transpose1d(x, w, Some(b), 2, 1, 1).unwrap()
    });
}

#[test]
fn backward_of_gru_matches_finite_differences() {
    let s = store_with(
        &[("x", &[2, 4, 3]), ("h0", &[2, 2]), ("wi", &[6, 3]), ("wh", &[6, 2]), ("bi", &[6]), ("bh", &[6])],
        12,
    );
    fd_primitive(&s, 3, |g, s| {
        let v: Vec<Var> = ["x", "h0", "wi", "wh", "bi", "bh"].iter().map(|n| g.param_named(s, n).unwrap()).collect();
        g.gru(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap()
    });
}

#[test]
fn backward_of_elementwise_and_reductions_matches_finite_differences() {
    let s = store_with(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4]), ("w", &[5, 4]), ("c", &[5])], 13);
    fd_primitive(&s, 4, |g, s| {
        let a = g.param_named(s, "a").unwrap();
        let b = g.param_named(s, "b").unwrap();
        let w = g.param_named(s, "w").unwrap();
        let c = g.param_named(s, "c").unwrap();
        let half = g.scale(a, 0.5);
        let e = g.exp(half).unwrap();
        let m = g.mul(e, b).unwrap();
        let s1 = g.add(m, a).unwrap();
        let tr = g.transpose_last2(s1);
        let back = g.transpose_last2(tr);
        let pooled = g.mean_time(back).unwrap();
        g.linear(pooled, w, Some(c)).unwrap()
    });
}

#[test]
fn backward_of_relu_away_from_the_kink() {
    let mut s = ParamStore::new();
    s.add("x", Tensor::from_vec(vec![-1.0, -0.2, 0.3, 2.0, -0.7, 0.9])).unwrap();
    fd_primitive(&s, 5, |g, s| {
        let x = g.param_named(s, "x").unwrap();
        g.relu(x)
    });
}

#[test]
fn backward_of_loss_primitives_matches_finite_differences() {
    let s = store_with(&[("logits", &[4, 3]), ("pred", &[2, 5]), ("mu", &[2, 3]), ("ls", &[2, 3])], 14);
    let target = Tensor::<Wide>::from_fn(&[2, 5], |i| (i as f64 * 0.37).sin());
    store_loss_fd(&s, |g, s| {
        let l = g.param_named(s, "logits").unwrap();
        let ce = g.cross_entropy(l, &[0, 2, 1, 2]).unwrap();
        let p = g.param_named(s, "pred").unwrap();
        let mse = g.mse(p, &target).unwrap();
        let mu = g.param_named(s, "mu").unwrap();
        let ls = g.param_named(s, "ls").unwrap();
        let sigma = g.exp(ls).unwrap();
        let kl = g.kl_std_normal(mu, sigma, 2).unwrap();
        let a = g.add(ce, mse).unwrap();
        g.add(a, kl).unwrap()
    });
}

fn store_loss_fd(store: &ParamStore, f: impl Fn(&mut Graph<Wide>, &ParamStore<Wide>) -> Var) {
    let mut store: ParamStore<Wide> = store.cast();
    let store = &mut store;
    let mut g: Graph<Wide> = Graph::new();
    let loss = f(&mut g, store);
    g.backward(loss).unwrap().accumulate_into(&g, store).unwrap();
    let report = FdCheck::new(FD_H, FD_TOL)
        .run(store, |s| {
            let mut g: Graph<Wide> = Graph::new();
            let l = f(&mut g, s);
            Ok(g.scalar(l))
        })
        .unwrap();
    assert!(report.passed(), "{:#?}", report.flagged());
}

#[test]
fn sum_of_product_gradient_is_the_other_factor() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
    let x = Tensor::from_vec(vec![3.0, 4.0, -5.0]);
    let mut g: Graph = Graph::new();
    let vw = g.param(&s, w);
    let vx = g.constant(x.clone());
    let p = g.mul(vw, vx).unwrap();
    let l = g.sum(p);
    g.backward(l).unwrap().accumulate_into(&g, &mut s).unwrap();
    assert_eq!(s.grad(w), &x);
}

#[test]
fn constant_loss_gives_exactly_zero_gradient() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::from_vec(vec![0.5, -1.0])).unwrap();
    let mut g: Graph = Graph::new();
    let vw = g.param(&s, w);
    let zero = g.scale(vw, 0.0);
    let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let sum = g.add(zero, c).unwrap();
    let l = g.sum(sum);
    g.backward(l).unwrap().accumulate_into(&g, &mut s).unwrap();
    assert!(s.grad(w).data().iter().all(|&v| v == 0.0));
}

#[test]
fn using_a_parameter_twice_doubles_its_gradient() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::from_vec(vec![0.5, -1.0, 3.0])).unwrap();
    let x = Tensor::from_vec(vec![1.5, 2.0, -0.5]);
    let grad_of = |uses: usize, s: &mut ParamStore| {
        s.zero_grads();
        let mut g: Graph = Graph::new();
        let vx = g.constant(x.clone());
        let mut terms = Vec::new();
        for _ in 0..uses {
            let vw = g.param(s, w);
            terms.push(g.mul(vw, vx).unwrap());
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t).unwrap();
        }
        let l = g.sum(acc);
        g.backward(l).unwrap().accumulate_into(&g, s).unwrap();
        s.grad(w).clone()
    };
    let once = grad_of(1, &mut s);
    let twice = grad_of(2, &mut s);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    assert!(g.backward(x).is_err());
}

#[test]
fn fd_check_quadratic_is_tight_and_flags_corruption() {
    let mut s = ParamStore::new();
    let w = s.add("w", Tensor::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
    let quad = |s: &ParamStore| Ok(s.value(w).data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>());
    let vals = s.value(w).data().to_vec();
    s.grad_mut(w).data_mut().iter_mut().zip(&vals).for_each(|(g, v)| *g = 2.0 * v);
    let report = FdCheck::new(1e-3, 1e-6).run(&mut s, quad).unwrap();
    assert!(report.passed(), "{report:?}");

    s.grad_mut(w).data_mut()[1] += 0.5;
    let report = FdCheck::new(1e-3, 1e-6).run(&mut s, quad).unwrap();
    assert_eq!(report.flagged().len(), 1);
    assert_eq!(report.flagged()[0].worst.0, 1);
}

#[test]
fn forward_ops_do_not_mutate_inputs() {
    let mut rng = Stream::new(21, 0);
    let x = randn(&[1, 2, 9], &mut rng);
    let w = randn(&[2, 2, 3], &mut rng);
    let mut g: Graph = Graph::new();
    let vx = g.constant(x.clone());
    let vw = g.constant(w.clone());
    let y = g.conv1d(vx, vw, None, 1, 1).unwrap();
    let _ = g.relu(y);
    assert_eq!(g.value(vx), &x);
    assert_eq!(g.value(vw), &w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn conv_kernels_match_oracles(
        seed in 0u64..10_000,
        b in 1usize..3, ci in 1usize..5, co in 1usize..5,
        k in 1usize..5, s in 1usize..4, p in 0usize..3, extra in 0usize..6,
    ) {
        let l = (k + extra).saturating_sub(2 * p).max(1);
        prop_assume!(l + 2 * p >= k);
        let mut rng = Stream::new(seed, 1);
        let x = randn(&[b, ci, l], &mut rng);
        let w = randn(&[co, ci, k], &mut rng);
        let bias = randn(&[co], &mut rng);
        let mut g: Graph = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.conv1d(vx, vw, Some(vb), s, p).unwrap();
        prop_assert!(g.value(y).max_abs_diff(&conv_oracle(&x, &w, bias.data(), s, p)) < 1e-5);

        let op = seed as usize % s;
        let wt = randn(&[ci, co, k], &mut rng);
        let full = (l - 1) * s + k + op;
        prop_assume!(full > 2 * p);
        let vwt = g.constant(wt.clone());
        let yt = g.conv_transpose1d(vx, vwt, Some(vb), s, p, op).unwrap();
        prop_assert!(g.value(yt).max_abs_diff(&conv_t_oracle(&x, &wt, bias.data(), s, p, op)) < 1e-5);
    }

    #[test]
    fn gru_matches_oracle(seed in 0u64..10_000, t in 1usize..6, d_in in 1usize..5, h in 1usize..5) {
        let mut rng = Stream::new(seed, 2);
        let x = randn(&[1, t, d_in], &mut rng);
        let h0 = randn(&[1, h], &mut rng);
        let p = gru_params(&mut rng, d_in, h, false);
        let y = run_gru(&x, &h0, &p);
        let want = gru_oracle(&x, h0.data(), &p.0, &p.1, p.2.data(), p.3.data());
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
