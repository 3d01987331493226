//! Tape-based reverse-mode differentiation over coarse tensor primitives.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. Leaves are either constants (never receive a
//! gradient; this is also how a gradient barrier is expressed) or bound
//! parameters from a [`ParamStore`].

use std::rc::Rc;

use super::kernels::{self, ConvGeom, GruCache, GruDims};
use super::linalg::{gemm, Mat};
use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Candidate layout for one contrastive loss evaluation.
///
/// For each prediction offset `k` (1-based), every anchor `(b, t)` with
/// `t + k < time` scores its positive frame `(b, t + k)` against
/// `n_neg` negative frames. Frames are addressed by flat index `b·time + t`.
#[derive(Clone, Debug)]
pub struct ContrastivePlan {
    pub batch: usize,
    pub time: usize,
    pub n_neg: usize,
    /// `negatives[k − 1]` holds `batch · (time − k) · n_neg` frame indices,
    /// anchors ordered by `(b, t)`.
    pub negatives: Vec<Vec<u32>>,
}

impl ContrastivePlan {
    pub fn max_offset(&self) -> usize {
        self.negatives.len()
    }

    pub fn candidates(&self) -> usize {
        self.n_neg + 1
    }
}

#[derive(Debug)]
struct ContrastiveCache<R> {
    /// Per offset: predictions `W_k c_t` for every frame, `[batch·time, d_target]`.
    preds: Vec<Vec<R>>,
    /// Per offset: softmax over candidates (positive first) per anchor.
    probs: Vec<Vec<R>>,
    /// Total number of scored anchors across all offsets.
    terms: usize,
}

#[derive(Debug)]
enum Op<R: Real> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    TransposeLast2(Var),
    MeanTime(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Gru {
        x: Var,
        h0: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        dims: GruDims,
        cache: GruCache<R>,
    },
    InfoNce {
        targets: Var,
        contexts: Var,
        wks: Vec<Var>,
        plan: Rc<ContrastivePlan>,
        cache: ContrastiveCache<R>,
    },
    KlStdNormal {
        mu: Var,
        sigma: Var,
        frames: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<R>,
    },
    Mse {
        pred: Var,
        target: Tensor<R>,
    },
}

struct Node<R: Real> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    /// Loss nodes keep their f64 reduction alongside the f32 value.
    exact: Option<f64>,
    aux: Vec<f64>,
}

pub struct Graph<R: Real = f32> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

fn check_same<R: Real>(op: &'static str, a: &Tensor<R>, b: &Tensor<R>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            exact: None,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn push_loss(&mut self, value: f64, aux: Vec<f64>, op: Op<R>, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(R::of(value)), op, requires_grad);
        self.nodes[v.0].exact = Some(value);
        self.nodes[v.0].aux = aux;
        v
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// The f64 reduction of a loss node, or the f32 value widened.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.item().as_f64())
    }

    /// Auxiliary statistics a loss node recorded (per-offset losses for
    /// contrastive nodes).
    pub fn aux(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].aux
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn param_named(&mut self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        Ok(self.param(store, id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Scalar `a + weight · b` whose f64 value is formed from the operands'
    /// f64 values, so a zero weight reproduces `a` bit for bit.
    pub fn add_weighted(&mut self, a: Var, b: Var, weight: f64) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::shape("add_weighted", "operands must be scalars"));
        }
        let exact = self.scalar(a) + weight * self.scalar(b);
        let scaled = self.scale(b, R::of(weight));
        let sum = self.add(a, scaled)?;
        self.nodes[sum.0].value = Tensor::scalar(R::of(exact));
        self.nodes[sum.0].exact = Some(exact);
        Ok(sum)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: R) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(R::exp);
        out.ensure_finite("exp")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Exp(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(R::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        let rg = self.rg(x);
        self.push_loss(s, Vec::new(), Op::Sum(x), rg)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose_last2();
        let rg = self.rg(x);
        self.push(out, Op::TransposeLast2(x), rg)
    }

    /// `[batch, time, d] → [batch, d]`, arithmetic mean over time.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::shape("mean_time", format!("expected rank 3, got {:?}", v.shape())));
        }
        let (b, t, d) = (v.dim(0), v.dim(1), v.dim(2));
        let mut acc = vec![0.0f64; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &v.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (a, &r) in acc[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *a += r.as_f64();
                }
            }
        }
        let out = Tensor::new(vec![b, d], acc.into_iter().map(|s| R::of(s / t as f64)).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanTime(x), rg))
    }

    /// `x [batch, d_in] · wᵀ [d_in, d_out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (batch, d_in, d_out) = (vx.dim(0), vx.dim(1), vw.dim(0));
        let mut out = vec![R::zero(); batch * d_out];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.len() != d_out {
                return Err(Error::shape("linear", format!("bias {:?} for {d_out} outputs", vb.shape())));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(
            R::one(),
            Mat::new(vx.data(), batch, d_in),
            Mat::new(vw.data(), d_out, d_in).t(),
            R::one(),
            &mut out,
        );
        let out = Tensor::new(vec![batch, d_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        transposed: Option<usize>,
    ) -> Result<ConvGeom> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 3 {
            return Err(Error::shape(
                op,
                format!("expected input [B, C, L] and weight rank 3, got {:?} and {:?}", vx.shape(), vw.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be >= 1")));
        }
        let (batch, c, l) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let kernel = vw.dim(2);
        let (c_in, c_out) = if transposed.is_some() {
            (vw.dim(0), vw.dim(1))
        } else {
            (vw.dim(1), vw.dim(0))
        };
        if c != c_in {
            return Err(Error::shape(
                op,
                format!("input has {c} channels but weight {:?} expects {c_in}", vw.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} for {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let l_out = match transposed {
            None => kernels::conv1d_out_len(l, kernel, stride, padding).ok_or_else(|| {
                Error::shape(
                    op,
                    format!("length {l} + 2·padding {padding} is shorter than kernel {kernel}"),
                )
            })?,
            Some(op_pad) => {
                kernels::conv_transpose_out_len(l, kernel, stride, padding, op_pad).ok_or_else(|| {
                    Error::shape(op, format!("length {l} with kernel {kernel}, padding {padding} gives empty output"))
                })?
            }
        };
        Ok(ConvGeom {
            batch,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            output_padding: transposed.unwrap_or(0),
            l_in: l,
            l_out,
        })
    }

    /// Cross-correlation over `[batch, c_in, len]` with weight `[c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geom("conv1d", x, w, b, stride, padding, None)?;
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.l_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv1d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with weight `[c_in, c_out, k]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        if output_padding >= stride.max(1) {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose1d: output_padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        let geom = self.conv_geom("conv_transpose1d", x, w, b, stride, padding, Some(output_padding))?;
        let out = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.l_out], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::ConvTranspose1d { x, w, b, geom }, rg))
    }

    /// GRU over `x [batch, time, d_in]` from hidden state `h0 [batch, hidden]`.
    pub fn gru(&mut self, x: Var, h0: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let vx = self.value(x);
        let vw_ih = self.value(w_ih);
        let vw_hh = self.value(w_hh);
        if vx.rank() != 3 || vw_ih.rank() != 2 || vw_hh.rank() != 2 {
            return Err(Error::shape("gru", "expected x [B, T, D] and rank-2 weights"));
        }
        let hidden = vw_hh.dim(1);
        let dims = GruDims {
            batch: vx.dim(0),
            time: vx.dim(1),
            d_in: vx.dim(2),
            hidden,
        };
        if vw_ih.shape() != [3 * hidden, dims.d_in]
            || vw_hh.shape() != [3 * hidden, hidden]
            || self.value(b_ih).len() != 3 * hidden
            || self.value(b_hh).len() != 3 * hidden
            || self.value(h0).len() != dims.batch * hidden
        {
            return Err(Error::shape(
                "gru",
                format!(
                    "input {:?}, w_ih {:?}, w_hh {:?}, h0 {:?}",
                    vx.shape(),
                    vw_ih.shape(),
                    vw_hh.shape(),
                    self.value(h0).shape()
                ),
            ));
        }
        let (out, cache) = kernels::gru_forward(
            vx.data(),
            self.value(h0).data(),
            vw_ih.data(),
            vw_hh.data(),
            self.value(b_ih).data(),
            self.value(b_hh).data(),
            dims,
        );
        let out = Tensor::new(vec![dims.batch, dims.time, hidden], out)?;
        out.ensure_finite("gru hidden state")?;
        let rg = [x, h0, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                dims,
                cache,
            },
            rg,
        ))
    }

    /// Contrastive loss: mean over anchors of `−log softmax` of the positive
    /// log-bilinear score `z_{t+k}ᵀ W_k c_t` against the planned negatives.
    ///
    /// `targets` is `[batch, time, d_z]`, `contexts` is `[batch, time, d_c]`,
    /// `wks[k−1]` is `[d_z, d_c]`. Per-offset mean losses go to [`Graph::aux`].
    pub fn info_nce(
        &mut self,
        targets: Var,
        contexts: Var,
        wks: &[Var],
        plan: Rc<ContrastivePlan>,
    ) -> Result<Var> {
        let vz = self.value(targets);
        let vc = self.value(contexts);
        if vz.rank() != 3 || vc.rank() != 3 || vz.dim(0) != vc.dim(0) || vz.dim(1) != vc.dim(1) {
            return Err(Error::shape(
                "info_nce",
                format!("targets {:?} vs contexts {:?}", vz.shape(), vc.shape()),
            ));
        }
        let (batch, time, dz, dc) = (vz.dim(0), vz.dim(1), vz.dim(2), vc.dim(2));
        if plan.batch != batch || plan.time != time || plan.max_offset() != wks.len() {
            return Err(Error::shape(
                "info_nce",
                format!(
                    "plan for batch {} time {} K {} used with batch {batch} time {time} and {} score matrices",
                    plan.batch,
                    plan.time,
                    plan.max_offset(),
                    wks.len()
                ),
            ));
        }
        if time <= wks.len() {
            return Err(Error::InvalidArgument(format!(
                "info_nce needs more frames ({time}) than prediction steps ({})",
                wks.len()
            )));
        }
        for &w in wks {
            if self.value(w).shape() != [dz, dc] {
                return Err(Error::shape(
                    "info_nce",
                    format!("score matrix {:?}, expected [{dz}, {dc}]", self.value(w).shape()),
                ));
            }
        }
        let n_cand = plan.candidates();
        let z = vz.data();
        let mut preds = Vec::with_capacity(wks.len());
        let mut probs = Vec::with_capacity(wks.len());
        let mut per_k = Vec::with_capacity(wks.len());
        let mut total = 0.0f64;
        let mut terms = 0usize;
        let mut logits = vec![R::zero(); n_cand];
        for (ki, &w) in wks.iter().enumerate() {
            let k = ki + 1;
            let mut pred = vec![R::zero(); batch * time * dz];
            gemm(
                R::one(),
                Mat::new(vc.data(), batch * time, dc),
                Mat::new(self.value(w).data(), dz, dc).t(),
                R::zero(),
                &mut pred,
            );
            let anchors = time - k;
            let negs = &plan.negatives[ki];
            let mut prob = vec![R::zero(); batch * anchors * n_cand];
            let mut sum_k = 0.0f64;
            for b in 0..batch {
                for t in 0..anchors {
                    let a = b * anchors + t;
                    let p = &pred[(b * time + t) * dz..(b * time + t + 1) * dz];
                    let pos = b * time + t + k;
                    logits[0] = dot(&z[pos * dz..(pos + 1) * dz], p);
                    for (j, &f) in negs[a * plan.n_neg..(a + 1) * plan.n_neg].iter().enumerate() {
                        let f = f as usize;
                        logits[j + 1] = dot(&z[f * dz..(f + 1) * dz], p);
                    }
                    let lse = softmax_into(&logits, &mut prob[a * n_cand..(a + 1) * n_cand]);
                    sum_k += lse - logits[0].as_f64();
                }
            }
            let n_terms = batch * anchors;
            per_k.push(sum_k / n_terms as f64);
            total += sum_k;
            terms += n_terms;
            preds.push(pred);
            probs.push(prob);
        }
        let loss = total / terms as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("info_nce loss".into()));
        }
        let rg = self.rg(targets) || self.rg(contexts) || wks.iter().any(|&w| self.rg(w));
        Ok(self.push_loss(
            loss,
            per_k,
            Op::InfoNce {
                targets,
                contexts,
                wks: wks.to_vec(),
                plan,
                cache: ContrastiveCache { preds, probs, terms },
            },
            rg,
        ))
    }

    /// `KL(N(μ, σ²) ‖ N(0, I))` summed over all entries and divided by `frames`.
    pub fn kl_std_normal(&mut self, mu: Var, sigma: Var, frames: usize) -> Result<Var> {
        check_same("kl_std_normal", self.value(mu), self.value(sigma))?;
        if frames == 0 {
            return Err(Error::InvalidArgument("kl_std_normal over zero frames".into()));
        }
        let total = kl_sum(self.value(mu).data(), self.value(sigma).data())?;
        let rg = self.rg(mu) || self.rg(sigma);
        Ok(self.push_loss(total / frames as f64, Vec::new(), Op::KlStdNormal { mu, sigma, frames }, rg))
    }

    /// Mean cross-entropy of `logits [batch, classes]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 2 || v.dim(0) != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} for {} labels", v.shape(), labels.len()),
            ));
        }
        let c = v.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {c} classes")));
        }
        let mut probs = vec![R::zero(); v.len()];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &v.data()[i * c..(i + 1) * c];
            let lse = softmax_into(row, &mut probs[i * c..(i + 1) * c]);
            total += lse - row[label].as_f64();
        }
        let loss = total / labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push_loss(
            loss,
            Vec::new(),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<R>) -> Result<Var> {
        check_same("mse", self.value(pred), target)?;
        let n = target.len() as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).as_f64();
                d * d
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push_loss(total / n, Vec::new(), Op::Mse { pred, target: target.clone() }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let send = |v: Var, t: Tensor<R>, grads: &mut [Option<Tensor<R>>]| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |like: Var, data: Vec<R>| Tensor::new(self.value(like).shape().to_vec(), data);
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, shaped(*a, d)?, grads);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, shaped(*b, d)?, grads);
                }
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s), grads),
            Op::Exp(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(&a, &e)| a * e).collect();
                send(*x, shaped(*x, d)?, grads);
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&a, &v)| if v > R::zero() { a } else { R::zero() })
                    .collect();
                send(*x, shaped(*x, d)?, grads);
            }
            Op::Sum(x) => {
                let s = g.item();
                send(*x, Tensor::full(self.value(*x).shape(), s), grads);
            }
            Op::TransposeLast2(x) => send(*x, g.transpose_last2(), grads),
            Op::MeanTime(x) => {
                let vx = self.value(*x);
                let (b, t, d) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let inv = R::one() / R::of(t as f64);
                let mut out = vec![R::zero(); vx.len()];
                for bi in 0..b {
                    let src = &g.data()[bi * d..(bi + 1) * d];
                    for ti in 0..t {
                        for (o, &s) in out[(bi * t + ti) * d..(bi * t + ti + 1) * d].iter_mut().zip(src) {
                            *o = s * inv;
                        }
                    }
                }
                send(*x, shaped(*x, out)?, grads);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (batch, d_in, d_out) = (vx.dim(0), vx.dim(1), vw.dim(0));
                if self.rg(*x) {
                    let mut dx = vec![R::zero(); batch * d_in];
                    gemm(R::one(), Mat::new(g.data(), batch, d_out), Mat::new(vw.data(), d_out, d_in), R::zero(), &mut dx);
                    send(*x, shaped(*x, dx)?, grads);
                }
                if self.rg(*w) {
                    let mut dw = vec![R::zero(); d_out * d_in];
                    gemm(R::one(), Mat::new(g.data(), batch, d_out).t(), Mat::new(vx.data(), batch, d_in), R::zero(), &mut dw);
                    send(*w, shaped(*w, dw)?, grads);
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    let mut db = vec![0.0f64; d_out];
                    for row in g.data().chunks(d_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v.as_f64();
                        }
                    }
                    send(b, shaped(b, db.into_iter().map(R::of).collect())?, grads);
                }
            }
            Op::Conv1d { x, w, b, geom } | Op::ConvTranspose1d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let f = if matches!(node.op, Op::Conv1d { .. }) {
                    kernels::conv1d_backward::<R>
                } else {
                    kernels::conv_transpose_backward::<R>
                };
                let cg = f(self.value(*x).data(), self.value(*w).data(), g.data(), geom, need);
                if let Some(dx) = cg.dx {
                    send(*x, shaped(*x, dx)?, grads);
                }
                if let Some(dw) = cg.dw {
                    send(*w, shaped(*w, dw)?, grads);
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    send(*b, shaped(*b, db)?, grads);
                }
            }
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                dims,
                cache,
            } => {
                let gg = kernels::gru_backward(
                    self.value(*x).data(),
                    self.value(*w_ih).data(),
                    self.value(*w_hh).data(),
                    cache,
                    g.data(),
                    *dims,
                );
                send(*x, shaped(*x, gg.dx)?, grads);
                send(*h0, shaped(*h0, gg.dh0)?, grads);
                send(*w_ih, shaped(*w_ih, gg.dw_ih)?, grads);
                send(*w_hh, shaped(*w_hh, gg.dw_hh)?, grads);
                send(*b_ih, shaped(*b_ih, gg.db_ih)?, grads);
                send(*b_hh, shaped(*b_hh, gg.db_hh)?, grads);
            }
            Op::InfoNce {
                targets,
                contexts,
                wks,
                plan,
                cache,
            } => {
                let upstream = g.item() / R::of(cache.terms as f64);
                let vz = self.value(*targets);
                let vc = self.value(*contexts);
                let (batch, time, dz, dc) = (vz.dim(0), vz.dim(1), vz.dim(2), vc.dim(2));
                let z = vz.data();
                let n_cand = plan.candidates();
                let mut dz_all = vec![R::zero(); vz.len()];
                let mut dc_all = vec![R::zero(); vc.len()];
                for (ki, &w) in wks.iter().enumerate() {
                    let k = ki + 1;
                    let anchors = time - k;
                    let pred = &cache.preds[ki];
                    let prob = &cache.probs[ki];
                    let negs = &plan.negatives[ki];
                    let mut dpred = vec![R::zero(); batch * time * dz];
                    for b in 0..batch {
                        for t in 0..anchors {
                            let a = b * anchors + t;
                            let row = (b * time + t) * dz;
                            let p = &pred[row..row + dz];
                            let pr = &prob[a * n_cand..(a + 1) * n_cand];
                            let pos = b * time + t + k;
                            let cand = std::iter::once(pos)
                                .chain(negs[a * plan.n_neg..(a + 1) * plan.n_neg].iter().map(|&f| f as usize));
                            for (j, f) in cand.enumerate() {
                                let coef = (pr[j] - if j == 0 { R::one() } else { R::zero() }) * upstream;
                                if coef == R::zero() {
                                    continue;
                                }
                                let zf = &z[f * dz..(f + 1) * dz];
                                for (d, &v) in dpred[row..row + dz].iter_mut().zip(zf) {
                                    *d += coef * v;
                                }
                                for (d, &v) in dz_all[f * dz..(f + 1) * dz].iter_mut().zip(p) {
                                    *d += coef * v;
                                }
                            }
                        }
                    }
                    if self.rg(*contexts) {
                        gemm(
                            R::one(),
                            Mat::new(&dpred, batch * time, dz),
                            Mat::new(self.value(w).data(), dz, dc),
                            R::one(),
                            &mut dc_all,
                        );
                    }
                    if self.rg(w) {
                        let mut dw = vec![R::zero(); dz * dc];
                        gemm(
                            R::one(),
                            Mat::new(&dpred, batch * time, dz).t(),
                            Mat::new(vc.data(), batch * time, dc),
                            R::zero(),
                            &mut dw,
                        );
                        send(w, shaped(w, dw)?, grads);
                    }
                }
                send(*targets, shaped(*targets, dz_all)?, grads);
                send(*contexts, shaped(*contexts, dc_all)?, grads);
            }
            Op::KlStdNormal { mu, sigma, frames } => {
                let s = g.item() / R::of(*frames as f64);
                if self.rg(*mu) {
                    send(*mu, self.value(*mu).map(|m| m * s), grads);
                }
                if self.rg(*sigma) {
                    send(*sigma, self.value(*sigma).map(|sg| (sg - sg.recip()) * s), grads);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).dim(1);
                let s = g.item() / R::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= R::one();
                }
                for v in &mut d {
                    *v *= s;
                }
                send(*logits, shaped(*logits, d)?, grads);
            }
            Op::Mse { pred, target } => {
                let s = R::of(2.0) * g.item() / R::of(target.len() as f64);
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| (p - t) * s)
                    .collect();
                send(*pred, shaped(*pred, d)?, grads);
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<R: Real = f32> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add the gradient of every bound parameter into the store. A parameter
    /// bound several times receives the sum over its uses.
    pub fn accumulate_into(&self, graph: &Graph<R>, store: &mut ParamStore<R>) -> Result<()> {
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                g.ensure_finite("parameter gradient")?;
                store.grad_mut(*id).add_assign(g);
            }
        }
        Ok(())
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Stable softmax of `logits` into `out`; returns the log-sum-exp.
pub(crate) fn softmax_into<R: Real>(logits: &[R], out: &mut [R]) -> f64 {
    let max = logits.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l.as_f64() - max).exp();
        *o = R::of(e);
        sum += e;
    }
    for o in out.iter_mut() {
        *o = R::of(o.as_f64() / sum);
    }
    max + sum.ln()
}

/// `Σ ½(μ² + σ² − 1 − ln σ²)` in f64.
pub(crate) fn kl_sum<R: Real>(mu: &[R], sigma: &[R]) -> Result<f64> {
    let mut total = 0.0f64;
    for (&m, &s) in mu.iter().zip(sigma) {
        let (m, s) = (m.as_f64(), s.as_f64());
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be positive and finite, got {s}")));
        }
        total += 0.5 * (m * m + s * s - 1.0 - (s * s).ln());
    }
    Ok(total)
}
