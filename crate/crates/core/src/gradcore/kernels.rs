//! Forward and backward kernels for the layer primitives.
//!
//! All activations are batched and row-major: convolutions take
//! `[batch, channels, length]`, the GRU takes `[batch, time, features]`.

use super::linalg::{gemm, Mat};
use super::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub l_in: usize,
    pub l_out: usize,
}

pub fn conv1d_out_len(l: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = l + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_len(
    l: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let full = (l.checked_sub(1)?) * stride + kernel + output_padding;
    full.checked_sub(2 * padding).filter(|&n| n > 0)
}

/// `cols[(c·K + k), t] = x[c, t·stride + k − padding]`, zero outside `x`.
fn im2col<R: Real>(
    x: &[R],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
    cols: &mut [R],
) {
    debug_assert_eq!(cols.len(), channels * kernel * positions);
    for c in 0..channels {
        let row_src = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let dst = &mut cols[(c * kernel + k) * positions..(c * kernel + k + 1) * positions];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                *d = if pos >= 0 && (pos as usize) < len {
                    row_src[pos as usize]
                } else {
                    R::zero()
                };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `x`.
fn col2im<R: Real>(
    cols: &[R],
    channels: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    positions: usize,
    x: &mut [R],
) {
    for c in 0..channels {
        let row_dst = &mut x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let src = &cols[(c * kernel + k) * positions..(c * kernel + k + 1) * positions];
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * stride + k) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    row_dst[pos as usize] += v;
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `w` is `[c_out, c_in, kernel]`.
pub fn conv1d_forward<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, g: &ConvGeom) -> Vec<R> {
    let ck = g.c_in * g.kernel;
    let mut cols = vec![R::zero(); ck * g.l_out];
    let mut out = vec![R::zero(); g.batch * g.c_out * g.l_out];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
        im2col(xb, g.c_in, g.l_in, g.kernel, g.stride, g.padding, g.l_out, &mut cols);
        let ob = &mut out[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
        if let Some(bias) = bias {
            for (c, row) in ob.chunks_mut(g.l_out).enumerate() {
                row.fill(bias[c]);
            }
        }
        let beta = if bias.is_some() { R::one() } else { R::zero() };
        gemm(
            R::one(),
            Mat::new(w, g.c_out, ck),
            Mat::new(&cols, ck, g.l_out),
            beta,
            ob,
        );
    }
    out
}

pub struct ConvGrads<R> {
    pub dx: Option<Vec<R>>,
    pub dw: Option<Vec<R>>,
    pub db: Option<Vec<R>>,
}

pub fn conv1d_backward<R: Real>(
    x: &[R],
    w: &[R],
    dout: &[R],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<R> {
    let (need_x, need_w, need_b) = need;
    let ck = g.c_in * g.kernel;
    let mut cols = vec![R::zero(); ck * g.l_out];
    let mut dx = need_x.then(|| vec![R::zero(); g.batch * g.c_in * g.l_in]);
    let mut dw = need_w.then(|| vec![R::zero(); g.c_out * ck]);
    let mut db = need_b.then(|| vec![R::zero(); g.c_out]);
    for b in 0..g.batch {
        let db_out = &dout[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
            im2col(xb, g.c_in, g.l_in, g.kernel, g.stride, g.padding, g.l_out, &mut cols);
            gemm(
                R::one(),
                Mat::new(db_out, g.c_out, g.l_out),
                Mat::new(&cols, ck, g.l_out).t(),
                R::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                R::one(),
                Mat::new(w, g.c_out, ck).t(),
                Mat::new(db_out, g.c_out, g.l_out),
                R::zero(),
                &mut cols,
            );
            let dxb = &mut dx[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
            col2im(&cols, g.c_in, g.l_in, g.kernel, g.stride, g.padding, g.l_out, dxb);
        }
        if let Some(db) = db.as_mut() {
            for (c, row) in db_out.chunks(g.l_out).enumerate() {
                db[c] += R::of(row.iter().map(|v| v.as_f64()).sum::<f64>());
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution (the data-gradient of [`conv1d_forward`]).
/// `w` is `[c_in, c_out, kernel]`; output length is
/// `(l_in − 1)·stride − 2·padding + kernel + output_padding`.
pub fn conv_transpose_forward<R: Real>(
    x: &[R],
    w: &[R],
    bias: Option<&[R]>,
    g: &ConvGeom,
) -> Vec<R> {
    let ck = g.c_out * g.kernel;
    let mut cols = vec![R::zero(); ck * g.l_in];
    let mut out = vec![R::zero(); g.batch * g.c_out * g.l_out];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
        gemm(
            R::one(),
            Mat::new(w, g.c_in, ck).t(),
            Mat::new(xb, g.c_in, g.l_in),
            R::zero(),
            &mut cols,
        );
        let ob = &mut out[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
        if let Some(bias) = bias {
            for (c, row) in ob.chunks_mut(g.l_out).enumerate() {
                row.fill(bias[c]);
            }
        }
        col2im(&cols, g.c_out, g.l_out, g.kernel, g.stride, g.padding, g.l_in, ob);
    }
    out
}

pub fn conv_transpose_backward<R: Real>(
    x: &[R],
    w: &[R],
    dout: &[R],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<R> {
    let (need_x, need_w, need_b) = need;
    let ck = g.c_out * g.kernel;
    let mut cols = vec![R::zero(); ck * g.l_in];
    let mut dx = need_x.then(|| vec![R::zero(); g.batch * g.c_in * g.l_in]);
    let mut dw = need_w.then(|| vec![R::zero(); g.c_in * ck]);
    let mut db = need_b.then(|| vec![R::zero(); g.c_out]);
    for b in 0..g.batch {
        let dob = &dout[b * g.c_out * g.l_out..(b + 1) * g.c_out * g.l_out];
        if need_x || need_w {
            im2col(dob, g.c_out, g.l_out, g.kernel, g.stride, g.padding, g.l_in, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
            gemm(
                R::one(),
                Mat::new(w, g.c_in, ck),
                Mat::new(&cols, ck, g.l_in),
                R::zero(),
                dxb,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * g.c_in * g.l_in..(b + 1) * g.c_in * g.l_in];
            gemm(
                R::one(),
                Mat::new(xb, g.c_in, g.l_in),
                Mat::new(&cols, ck, g.l_in).t(),
                R::one(),
                dw,
            );
        }
        if let Some(db) = db.as_mut() {
            for (c, row) in dob.chunks(g.l_out).enumerate() {
                db[c] += R::of(row.iter().map(|v| v.as_f64()).sum::<f64>());
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn sigmoid<R: Real>(v: R) -> R {
    R::one() / (R::one() + (-v).exp())
}

#[derive(Clone, Copy, Debug)]
pub struct GruDims {
    pub batch: usize,
    pub time: usize,
    pub d_in: usize,
    pub hidden: usize,
}

/// Saved activations for back-propagation through time. All per-step
/// buffers are laid out `[time, batch, hidden]`.
#[derive(Clone, Debug)]
pub struct GruCache<R> {
    r: Vec<R>,
    z: Vec<R>,
    n: Vec<R>,
    hn: Vec<R>,
    h_prev: Vec<R>,
}

/// GRU with PyTorch gate conventions (reset, update, new):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
///
/// `x` is `[batch, time, d_in]`, `h0` is `[batch, hidden]`; returns the
/// hidden state after every step, `[batch, time, hidden]`.
pub fn gru_forward<R: Real>(
    x: &[R],
    h0: &[R],
    w_ih: &[R],
    w_hh: &[R],
    b_ih: &[R],
    b_hh: &[R],
    d: GruDims,
) -> (Vec<R>, GruCache<R>) {
    let GruDims {
        batch,
        time,
        d_in,
        hidden: h,
    } = d;
    let g3 = 3 * h;
    let mut gi = vec![R::zero(); batch * time * g3];
    for row in gi.chunks_mut(g3) {
        row.copy_from_slice(b_ih);
    }
    gemm(
        R::one(),
        Mat::new(x, batch * time, d_in),
        Mat::new(w_ih, g3, d_in).t(),
        R::one(),
        &mut gi,
    );

    let step = batch * h;
    let mut cache = GruCache {
        r: vec![R::zero(); time * step],
        z: vec![R::zero(); time * step],
        n: vec![R::zero(); time * step],
        hn: vec![R::zero(); time * step],
        h_prev: vec![R::zero(); time * step],
    };
    let mut out = vec![R::zero(); batch * time * h];
    let mut state = h0.to_vec();
    let mut gh = vec![R::zero(); batch * g3];
    for t in 0..time {
        for row in gh.chunks_mut(g3) {
            row.copy_from_slice(b_hh);
        }
        gemm(
            R::one(),
            Mat::new(&state, batch, h),
            Mat::new(w_hh, g3, h).t(),
            R::one(),
            &mut gh,
        );
        let off = t * step;
        cache.h_prev[off..off + step].copy_from_slice(&state);
        for b in 0..batch {
            let gi_row = &gi[(b * time + t) * g3..(b * time + t + 1) * g3];
            let gh_row = &gh[b * g3..(b + 1) * g3];
            for j in 0..h {
                let r = sigmoid(gi_row[j] + gh_row[j]);
                let z = sigmoid(gi_row[h + j] + gh_row[h + j]);
                let hn = gh_row[2 * h + j];
                let n = (gi_row[2 * h + j] + r * hn).tanh();
                let idx = b * h + j;
                let new = (R::one() - z) * n + z * state[idx];
                cache.r[off + idx] = r;
                cache.z[off + idx] = z;
                cache.n[off + idx] = n;
                cache.hn[off + idx] = hn;
                state[idx] = new;
                out[(b * time + t) * h + j] = new;
            }
        }
    }
    (out, cache)
}

pub struct GruGrads<R> {
    pub dx: Vec<R>,
    pub dh0: Vec<R>,
    pub dw_ih: Vec<R>,
    pub dw_hh: Vec<R>,
    pub db_ih: Vec<R>,
    pub db_hh: Vec<R>,
}

pub fn gru_backward<R: Real>(
    x: &[R],
    w_ih: &[R],
    w_hh: &[R],
    cache: &GruCache<R>,
    dout: &[R],
    d: GruDims,
) -> GruGrads<R> {
    let GruDims {
        batch,
        time,
        d_in,
        hidden: h,
    } = d;
    let g3 = 3 * h;
    let step = batch * h;
    let mut dgi = vec![R::zero(); batch * time * g3];
    let mut dw_hh = vec![R::zero(); g3 * h];
    let mut db_hh = vec![0.0f64; g3];
    let mut dh_next = vec![R::zero(); step];
    let mut dgh = vec![R::zero(); batch * g3];
    for t in (0..time).rev() {
        let off = t * step;
        for b in 0..batch {
            for j in 0..h {
                let idx = b * h + j;
                let dh = dout[(b * time + t) * h + j] + dh_next[idx];
                let r = cache.r[off + idx];
                let z = cache.z[off + idx];
                let n = cache.n[off + idx];
                let hn = cache.hn[off + idx];
                let hp = cache.h_prev[off + idx];
                let one = R::one();
                let dn = dh * (one - z);
                let dz = dh * (hp - n);
                dh_next[idx] = dh * z;
                let dn_pre = dn * (one - n * n);
                let dr_pre = dn_pre * hn * r * (one - r);
                let dz_pre = dz * z * (one - z);
                let gi_row = &mut dgi[(b * time + t) * g3..(b * time + t + 1) * g3];
                gi_row[j] = dr_pre;
                gi_row[h + j] = dz_pre;
                gi_row[2 * h + j] = dn_pre;
                let gh_row = &mut dgh[b * g3..(b + 1) * g3];
                gh_row[j] = dr_pre;
                gh_row[h + j] = dz_pre;
                gh_row[2 * h + j] = dn_pre * r;
            }
        }
        gemm(
            R::one(),
            Mat::new(&dgh, batch, g3).t(),
            Mat::new(&cache.h_prev[off..off + step], batch, h),
            R::one(),
            &mut dw_hh,
        );
        for row in dgh.chunks(g3) {
            for (acc, &v) in db_hh.iter_mut().zip(row) {
                *acc += v.as_f64();
            }
        }
        gemm(
            R::one(),
            Mat::new(&dgh, batch, g3),
            Mat::new(w_hh, g3, h),
            R::one(),
            &mut dh_next,
        );
    }
    let mut dw_ih = vec![R::zero(); g3 * d_in];
    gemm(
        R::one(),
        Mat::new(&dgi, batch * time, g3).t(),
        Mat::new(x, batch * time, d_in),
        R::zero(),
        &mut dw_ih,
    );
    let mut db_ih = vec![0.0f64; g3];
    for row in dgi.chunks(g3) {
        for (acc, &v) in db_ih.iter_mut().zip(row) {
            *acc += v.as_f64();
        }
    }
    let mut dx = vec![R::zero(); batch * time * d_in];
    gemm(
        R::one(),
        Mat::new(&dgi, batch * time, g3),
        Mat::new(w_ih, g3, d_in),
        R::zero(),
        &mut dx,
    );
    GruGrads {
        dx,
        dh0: dh_next,
        dw_ih,
        dw_hh,
        db_ih: db_ih.into_iter().map(R::of).collect(),
        db_hh: db_hh.into_iter().map(R::of).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_formulas() {
        assert_eq!(conv1d_out_len(10240, 10, 5, 2), Some(2047));
        assert_eq!(conv1d_out_len(2047, 8, 4, 2), Some(511));
        assert_eq!(conv1d_out_len(3, 8, 1, 0), None);
        assert_eq!(conv_transpose_out_len(2047, 10, 5, 2, 4), Some(10240));
        assert_eq!(conv_transpose_out_len(2047, 10, 5, 2, 0), Some(10236));
    }
}
