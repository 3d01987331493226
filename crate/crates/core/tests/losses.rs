use proptest::prelude::*;
use sim_core::gradcore::{ContrastivePlan, Tensor};
use sim_core::losses::*;
use sim_core::rng::Stream;

fn randn(shape: &[usize], rng: &mut Stream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn eye(d: usize) -> Tensor {
    Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
}

#[test]
fn score_is_the_bilinear_form() {
    assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0], &eye(2)).unwrap(), 1.0);
    assert!((score(&[1.0, 0.0], &[1.0, 0.0], &eye(2)).unwrap().exp() - std::f64::consts::E).abs() < 1e-12);
    assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], &eye(2)).unwrap(), 0.0);

    let mut rng = Stream::new(1, 0);
    let w = randn(&[4, 4], &mut rng);
    let a: Vec<f32> = (0..4).map(|_| rng.normal()).collect();
    let b: Vec<f32> = (0..4).map(|_| rng.normal()).collect();
    // (W b) first, then aᵀ(W b)
    let wb: Vec<f64> = (0..4)
        .map(|i| (0..4).map(|j| w.data()[i * 4 + j] as f64 * b[j] as f64).sum())
        .collect();
    let want: f64 = a.iter().zip(&wb).map(|(&x, y)| x as f64 * y).sum();
    assert!((score(&a, &b, &w).unwrap() - want).abs() < 1e-12);
    assert!(score(&a[..3], &b, &w).is_err());
}

#[test]
fn uniform_logits_give_log_n() {
    for n_neg in [7usize, 15] {
        let z = Tensor::zeros(&[2, 12, 3]);
        let plan = negative_plan(2, 12, 2, n_neg, &mut Stream::new(0, 0)).unwrap();
        let v = info_nce(&z, &z, &[eye(3), eye(3)], &plan).unwrap();
        let ln_n = ((n_neg + 1) as f64).ln();
        assert!((v.loss - ln_n).abs() < 1e-12, "{} vs {ln_n}", v.loss);
        assert!(v.per_k.iter().all(|l| (l - ln_n).abs() < 1e-12));
    }
    assert!((2.079_441_541_679_836 - 8f64.ln()).abs() < 1e-15);
}

#[test]
fn saturated_positive_gives_zero_loss() {
    let mut logits = vec![0.0; 16];
    logits[0] = 40.0;
    assert!(nce_term(&logits) < 1e-15);
    assert!(nce_term(&logits) >= 0.0);
}

/// Enumerate every anchor and candidate explicitly in f64.
fn brute_force_nce(z: &Tensor, c: &Tensor, wks: &[Tensor], plan: &ContrastivePlan) -> f64 {
    let (b, t, dz) = (z.dim(0), z.dim(1), z.dim(2));
    let dc = c.dim(2);
    let frame = |x: &Tensor, d: usize, f: usize| x.data()[f * d..(f + 1) * d].to_vec();
    let mut total = 0.0;
    let mut count = 0;
    for (ki, w) in wks.iter().enumerate() {
        let k = ki + 1;
        for bi in 0..b {
            for ti in 0..t - k {
                let anchor = bi * (t - k) + ti;
                let ct = frame(c, dc, bi * t + ti);
                let mut logits = vec![score(&frame(z, dz, bi * t + ti + k), &ct, w).unwrap()];
                for j in 0..plan.n_neg {
                    let f = plan.negatives[ki][anchor * plan.n_neg + j] as usize;
                    logits.push(score(&frame(z, dz, f), &ct, w).unwrap());
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                total += lse - logits[0];
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn small_case_matches_enumeration() {
    let mut rng = Stream::new(5, 0);
    let z = randn(&[1, 4, 2], &mut rng);
    let w = randn(&[2, 2], &mut rng);
    let plan = negative_plan(1, 4, 1, 2, &mut Stream::new(5, 1)).unwrap();
    assert_eq!(plan.candidates(), 3);
    let got = info_nce(&z, &z, std::slice::from_ref(&w), &plan).unwrap().loss;
    let want = brute_force_nce(&z, &z, &[w], &plan);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    let z = randn(&[3, 9, 4], &mut rng);
    let c = randn(&[3, 9, 5], &mut rng);
    let wks: Vec<Tensor> = (0..3).map(|_| randn(&[4, 5], &mut rng)).collect();
    let plan = negative_plan(3, 9, 3, 15, &mut Stream::new(5, 2)).unwrap();
    let got = info_nce(&z, &c, &wks, &plan).unwrap().loss;
    let want = brute_force_nce(&z, &c, &wks, &plan);
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn too_few_frames_is_an_error() {
    assert!(negative_plan(2, 3, 3, 15, &mut Stream::new(0, 0)).is_err());
    let z = Tensor::zeros(&[1, 3, 2]);
    let plan = ContrastivePlan {
        batch: 1,
        time: 3,
        n_neg: 1,
        negatives: vec![vec![0; 2], vec![0; 1], vec![]],
    };
    assert!(info_nce(&z, &z, &[eye(2), eye(2), eye(2)], &plan).is_err());
}

#[test]
fn logit_shift_leaves_loss_unchanged() {
    let mut rng = Stream::new(8, 0);
    let (b, t, d) = (2, 14, 3);
    let z = randn(&[b, t, d], &mut rng);
    let wks: Vec<Tensor> = (0..2).map(|_| randn(&[d, d], &mut rng)).collect();
    let plan = negative_plan(b, t, 2, 15, &mut Stream::new(8, 1)).unwrap();
    let base = info_nce(&z, &z, &wks, &plan).unwrap().loss;

    // A constant extra target coordinate adds the same amount to every
    // candidate's log-score for a given anchor.
    let z1 = Tensor::from_fn(&[b, t, d + 1], |i| if i % (d + 1) == d { 1.0 } else { z.data()[i / (d + 1) * d + i % (d + 1)] });
    let shift: Vec<f32> = (0..d).map(|j| 3.0 + j as f32).collect();
    let wks1: Vec<Tensor> = wks
        .iter()
        .map(|w| {
            let mut data = w.data().to_vec();
            data.extend_from_slice(&shift);
            Tensor::new(vec![d + 1, d], data).unwrap()
        })
        .collect();
    let shifted = info_nce(&z1, &z, &wks1, &plan).unwrap().loss;
    assert!((shifted - base).abs() < 1e-6, "{shifted} vs {base}");

    let logits = [0.3, -1.2, 2.0, 0.7];
    let moved: Vec<f64> = logits.iter().map(|l| l + 123.4).collect();
    assert!((nce_term(&logits) - nce_term(&moved)).abs() < 1e-12);
}

#[test]
fn two_frames_always_pick_the_other() {
    let mut rng = Stream::new(3, 0);
    for _ in 0..100 {
        let set = draw_negatives(1, 2, Origin { batch: 0, time: 1 }, 4, &mut rng).unwrap();
        assert!(set.negatives.iter().all(|o| *o == Origin { batch: 0, time: 0 }));
    }
    assert!(draw_negatives(1, 1, Origin { batch: 0, time: 0 }, 1, &mut rng).is_err());
}

#[test]
fn negatives_exclude_the_positive_and_are_uniform() {
    let (b, t) = (3, 7);
    let pos = Origin { batch: 1, time: 4 };
    let mut counts = vec![0usize; b * t];
    let mut rng = Stream::new(4, 0);
    let draws = 100_000;
    for _ in 0..draws / 10 {
        for o in draw_negatives(b, t, pos, 10, &mut rng).unwrap().negatives {
            counts[o.batch * t + o.time] += 1;
        }
    }
    assert_eq!(counts[pos.batch * t + pos.time], 0);
    let expected = draws as f64 / (b * t - 1) as f64;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pos.batch * t + pos.time)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 19 degrees of freedom; the 0.999 quantile is 43.8
    assert!(chi2 < 43.8, "chi2 {chi2}");
}

/// E_q[log q(z) − log p(z)] from `n` samples.
fn kl_monte_carlo(mu: &[f64], sigma: &[f64], n: usize, rng: &mut Stream) -> f64 {
    let mut acc = 0.0;
    for _ in 0..n {
        for (&m, &s) in mu.iter().zip(sigma) {
            let e = rng.normal() as f64;
            let z = m + s * e;
            let log_q = -0.5 * e * e - s.ln();
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
    }
    acc / n as f64
}

#[test]
fn kl_closed_form_against_monte_carlo() {
    let zero = kl_standard_normal(&Tensor::zeros(&[3, 4]), &Tensor::full(&[3, 4], 1.0)).unwrap();
    assert_eq!(zero, 0.0);

    let mut rng = Stream::new(12, 0);
    let cases: [(&[f64], &[f64], f64); 2] = [(&[1.0, 1.0], &[1.0, 1.0], 1.0), (&[0.0], &[2.0], 0.806_852_819_440_054_7)];
    for (mu, sigma, frozen) in cases {
        let mu_t = Tensor::from_vec(mu.iter().map(|&v| v as f32).collect());
        let sg_t = Tensor::from_vec(sigma.iter().map(|&v| v as f32).collect());
        let closed = kl_standard_normal(&mu_t, &sg_t).unwrap();
        let mc = kl_monte_carlo(mu, sigma, 1_000_000, &mut rng);
        assert!((closed - mc).abs() <= 0.01 * closed, "closed {closed} mc {mc}");
        assert!((closed - frozen).abs() < 1e-6);
    }
    assert!(kl_standard_normal(&Tensor::zeros(&[2]), &Tensor::from_vec(vec![1.0, 0.0])).is_err());
}

#[test]
fn kl_averages_over_frames_and_sums_over_dims() {
    let mu = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let sigma = Tensor::full(&[2, 2], 1.0);
    assert!((kl_standard_normal(&mu, &sigma).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn smooth_loss_with_zero_beta_is_plain_infonce() {
    let mut rng = Stream::new(21, 0);
    let (b, t, d) = (2, 16, 4);
    let mu = randn(&[b, t, d], &mut rng);
    let sigma = Tensor::from_fn(&[b, t, d], |_| 0.5 + rng.uniform() as f32);
    let eps = randn(&[b, t, d], &mut rng);
    let z = Tensor::from_fn(&[b, t, d], |i| mu.data()[i] + sigma.data()[i] * eps.data()[i]);
    let wks: Vec<Tensor> = (0..3).map(|_| randn(&[d, d], &mut rng)).collect();
    let plan = negative_plan(b, t, 3, 15, &mut Stream::new(21, 1)).unwrap();
    let plain = info_nce(&z, &z, &wks, &plan).unwrap();
    let smooth = smooth_info_nce(&z, Some(&mu), Some(&sigma), &wks, &plan, 0.0).unwrap();
    assert_eq!(smooth.total.to_bits(), plain.loss.to_bits());
    assert!(smooth.kl_term > 0.0);

    let flat_mu = Tensor::zeros(&[b, t, d]);
    let unit = Tensor::full(&[b, t, d], 1.0);
    let s = smooth_info_nce(&z, Some(&flat_mu), Some(&unit), &wks, &plan, 0.01).unwrap();
    assert_eq!(s.total, s.nce_term);
    assert!(smooth_info_nce(&z, None, None, &wks, &plan, 0.01).is_err());
}

#[test]
fn mi_bound_arithmetic() {
    assert_eq!(mi_lower_bound(16f64.ln(), 16), 0.0);
    assert_eq!(mi_lower_bound(0.0, 16), 16f64.ln());
    assert!((mi_lower_bound(1.2, 8) - 0.879_441_541_679_836).abs() < 1e-12);
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::zeros(&[4, 3]);
    assert!((cross_entropy(&uniform, &[0, 1, 2, 0]).unwrap() - 3f64.ln()).abs() < 1e-12);
    let sharp = Tensor::new(vec![1, 3], vec![40.0, -40.0, -40.0]).unwrap();
    assert!(cross_entropy(&sharp, &[0]).unwrap() < 1e-15);

    let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]).unwrap();
    // row 0 label 2: lse(0.5,-1,2) − 2 ; row 1 label 0: lse(1.5,0,-0.5) − 1.5
    let r0 = (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln() - 2.0;
    let r1 = (1.5f64.exp() + 1.0 + (-0.5f64).exp()).ln() - 1.5;
    assert!((cross_entropy(&logits, &[2, 0]).unwrap() - (r0 + r1) / 2.0).abs() < 1e-6);
    assert!(cross_entropy(&logits, &[3, 0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kl_is_non_negative(seed in 0u64..100_000, n in 1usize..20) {
        let mut rng = Stream::new(seed, 0);
        let mu = Tensor::from_fn(&[n], |_| rng.normal() * 3.0);
        let sigma = Tensor::from_fn(&[n], |_| (rng.normal() * 2.0).exp());
        prop_assert!(kl_standard_normal(&mu, &sigma).unwrap() >= 0.0);
    }

    #[test]
    fn infonce_is_non_negative_and_bound_below_log_n(seed in 0u64..100_000) {
        let mut rng = Stream::new(seed, 0);
        let z = randn(&[2, 6, 3], &mut rng);
        let w = randn(&[3, 3], &mut rng);
        let plan = negative_plan(2, 6, 1, 15, &mut rng).unwrap();
        let v = info_nce(&z, &z, &[w], &plan).unwrap();
        prop_assert!(v.loss >= 0.0);
        prop_assert!(mi_lower_bound(v.loss, 16) <= 16f64.ln());
    }
}
