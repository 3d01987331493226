//! Contrastive and variational objectives.
//!
//! Value-level functions here evaluate a loss on plain tensors. Training
//! builds the same losses as graph nodes through [`nce_node`] and
//! [`smooth_nce_node`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gradcore::{kl_sum, ContrastivePlan, Graph, Real, Tensor, Var};
use crate::rng::Stream;

/// Negatives per anchor; with the positive this gives 16 candidates.
pub const DEFAULT_NEGATIVES: usize = 15;

/// Log of the log-bilinear score: `z_futureᵀ · W · z_t`.
pub fn score(z_future: &[f32], z_t: &[f32], w: &Tensor) -> Result<f64> {
    if w.shape() != [z_future.len(), z_t.len()] {
        return Err(Error::shape(
            "score",
            format!("W {:?} with z_future {} and z_t {}", w.shape(), z_future.len(), z_t.len()),
        ));
    }
    let cols = z_t.len();
    Ok(z_future
        .iter()
        .enumerate()
        .map(|(i, &zf)| {
            let row = &w.data()[i * cols..(i + 1) * cols];
            zf as f64 * row.iter().zip(z_t).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
        })
        .sum())
}

/// `−log softmax(logits)[0]`, the positive candidate first.
pub fn nce_term(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Origin {
    pub batch: usize,
    pub time: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub positive: Origin,
    pub negatives: Vec<Origin>,
}

/// Draw `n_neg` frames uniformly with replacement from the `batch × time`
/// frames of a batch, never the positive's own frame.
pub fn draw_negatives(
    batch: usize,
    time: usize,
    positive: Origin,
    n_neg: usize,
    rng: &mut Stream,
) -> Result<CandidateSet> {
    let total = batch * time;
    if total < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two frames to draw negatives, have {total}"
        )));
    }
    if n_neg == 0 {
        return Err(Error::InvalidArgument("at least one negative is required".into()));
    }
    if positive.batch >= batch || positive.time >= time {
        return Err(Error::InvalidArgument(format!(
            "positive {positive:?} outside batch {batch} × time {time}"
        )));
    }
    let skip = positive.batch * time + positive.time;
    let negatives = (0..n_neg)
        .map(|_| {
            let mut f = rng.below(total - 1);
            if f >= skip {
                f += 1;
            }
            Origin {
                batch: f / time,
                time: f % time,
            }
        })
        .collect();
    Ok(CandidateSet { positive, negatives })
}

/// Candidate sets for every anchor `(b, t)` and offset `k ∈ 1..=k_max`,
/// drawn offset-major then batch then time.
pub fn negative_plan(batch: usize, time: usize, k_max: usize, n_neg: usize, rng: &mut Stream) -> Result<ContrastivePlan> {
    if time <= k_max {
        return Err(Error::InvalidArgument(format!(
            "InfoNCE needs more frames ({time}) than prediction steps ({k_max})"
        )));
    }
    let mut negatives = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut flat = Vec::with_capacity(batch * (time - k) * n_neg);
        for b in 0..batch {
            for t in 0..time - k {
                let set = draw_negatives(batch, time, Origin { batch: b, time: t + k }, n_neg, rng)?;
                flat.extend(set.negatives.iter().map(|o| (o.batch * time + o.time) as u32));
            }
        }
        negatives.push(flat);
    }
    Ok(ContrastivePlan {
        batch,
        time,
        n_neg,
        negatives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceValue {
    pub loss: f64,
    pub per_k: Vec<f64>,
}

/// InfoNCE over `targets [B, T, Dz]` predicted from `contexts [B, T, Dc]`
/// with one `[Dz, Dc]` score matrix per offset.
pub fn info_nce(targets: &Tensor, contexts: &Tensor, wks: &[Tensor], plan: &ContrastivePlan) -> Result<NceValue> {
    let mut g: Graph = Graph::new();
    let z = g.constant(targets.clone());
    let c = g.constant(contexts.clone());
    let ws: Vec<Var> = wks.iter().map(|w| g.constant(w.clone())).collect();
    let loss = g.info_nce(z, c, &ws, Rc::new(plan.clone()))?;
    Ok(NceValue {
        loss: g.scalar(loss),
        per_k: g.aux(loss).to_vec(),
    })
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, summed over the last axis and
/// averaged over all leading positions.
pub fn kl_standard_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape(
            "kl_standard_normal",
            format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
        ));
    }
    let d = *mu.shape().last().expect("tensors have rank ≥ 1");
    let frames = mu.len() / d;
    Ok(kl_sum(mu.data(), sigma.data())? / frames as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nce_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub per_k: Vec<f64>,
    pub kl_per_dim: f64,
}

/// InfoNCE on sampled latents plus `beta` times the KL of their posterior.
/// `z`, `mu` and `sigma` are `[B, T, D]`.
pub fn smooth_info_nce(
    z: &Tensor,
    mu: Option<&Tensor>,
    sigma: Option<&Tensor>,
    wks: &[Tensor],
    plan: &ContrastivePlan,
    beta: f64,
) -> Result<LossBreakdown> {
    let (mu, sigma) = match (mu, sigma) {
        (Some(m), Some(s)) => (m, s),
        _ => return Err(Error::InvalidArgument("smooth InfoNCE needs mu and sigma".into())),
    };
    let nce = info_nce(z, z, wks, plan)?;
    let kl = kl_standard_normal(mu, sigma)?;
    let d = *mu.shape().last().expect("rank ≥ 1");
    Ok(LossBreakdown {
        nce_term: nce.loss,
        kl_term: kl,
        total: nce.loss + beta * kl,
        per_k: nce.per_k,
        kl_per_dim: kl / d as f64,
    })
}

/// `log N − L`: the InfoNCE bound on mutual information.
pub fn mi_lower_bound(nce_loss: f64, n_candidates: usize) -> f64 {
    (n_candidates as f64).ln() - nce_loss
}

/// Mean `−log softmax(logits)[label]` over rows of `[B, C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g: Graph = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, labels)?;
    Ok(g.scalar(ce))
}

/// Graph nodes of one module's objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub nce: Var,
    pub kl: Option<Var>,
}

/// InfoNCE node. `targets`/`contexts` are `[B, T, D]`.
pub fn nce_node<R: Real>(g: &mut Graph<R>, targets: Var, contexts: Var, wks: &[Var], plan: Rc<ContrastivePlan>) -> Result<LossNodes> {
    let nce = g.info_nce(targets, contexts, wks, plan)?;
    Ok(LossNodes {
        total: nce,
        nce,
        kl: None,
    })
}

/// Smooth-InfoNCE node: InfoNCE on `z` plus `beta · KL(mu, sigma)` with the
/// KL averaged over `frames` posteriors.
#[allow(clippy::too_many_arguments)]
pub fn smooth_nce_node<R: Real>(
    g: &mut Graph<R>,
    z: Var,
    mu: Var,
    sigma: Var,
    frames: usize,
    wks: &[Var],
    plan: Rc<ContrastivePlan>,
    beta: f64,
) -> Result<LossNodes> {
    let nce = g.info_nce(z, z, wks, plan)?;
    let kl = g.kl_std_normal(mu, sigma, frames)?;
    let total = g.add_weighted(nce, kl, beta)?;
    Ok(LossNodes {
        total,
        nce,
        kl: Some(kl),
    })
}

impl LossNodes {
    pub fn breakdown<R: Real>(&self, g: &Graph<R>, dims: usize) -> LossBreakdown {
        let kl = self.kl.map(|k| g.scalar(k)).unwrap_or(0.0);
        LossBreakdown {
            nce_term: g.scalar(self.nce),
            kl_term: kl,
            total: g.scalar(self.total),
            per_k: g.aux(self.nce).to_vec(),
            kl_per_dim: kl / dims.max(1) as f64,
        }
    }
}
