use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::simnet::{channel_major, Decoder};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn time_by_dim(op: &'static str, z: &Tensor) -> Result<(usize, usize)> {
    if z.rank() != 2 || z.is_empty() {
        return Err(Error::shape(op, format!("expected non-empty [T, D], got {:?}", z.shape())));
    }
    Ok((z.dim(0), z.dim(1)))
}

/// `(1 − α)·a + α·b`, exact at both ends.
pub fn interpolate(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    same_shape("interpolate", a, b)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((1.0 - alpha) * x as f64 + alpha * y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `mean_t |start − target|` per dimension of `[T, D]` latents.
pub fn importance_scores(z_start: &Tensor, z_target: &Tensor) -> Result<Vec<f64>> {
    same_shape("rank_importance", z_start, z_target)?;
    let (t, d) = time_by_dim("rank_importance", z_start)?;
    let mut score = vec![0.0f64; d];
    for (ra, rb) in z_start.data().chunks(d).zip(z_target.data().chunks(d)) {
        for (s, (&a, &b)) in score.iter_mut().zip(ra.iter().zip(rb)) {
            *s += (a as f64 - b as f64).abs();
        }
    }
    Ok(score.into_iter().map(|s| s / t as f64).collect())
}

/// Dimensions by descending importance; ties keep ascending index.
pub fn rank_importance(z_start: &Tensor, z_target: &Tensor) -> Result<Vec<usize>> {
    let score = importance_scores(z_start, z_target)?;
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&i, &j| score[j].total_cmp(&score[i]).then(i.cmp(&j)));
    Ok(order)
}

/// Target values in the `n` top-ranked dimensions, start values elsewhere.
pub fn partial_swap(z_start: &Tensor, z_target: &Tensor, ranking: &[usize], n: usize) -> Result<Tensor> {
    same_shape("partial_swap", z_start, z_target)?;
    let (_, d) = time_by_dim("partial_swap", z_start)?;
    let mut seen = vec![false; d];
    if ranking.len() != d || ranking.iter().any(|&i| i >= d || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::InvalidArgument(format!("ranking is not a permutation of 0..{d}")));
    }
    if n > d {
        return Err(Error::InvalidArgument(format!("cannot swap {n} of {d} dimensions")));
    }
    let mut out = z_start.clone();
    let target = z_target.data();
    for (row, chunk) in out.data_mut().chunks_mut(d).enumerate() {
        for &i in &ranking[..n] {
            chunk[i] = target[row * d + i];
        }
    }
    Ok(out)
}

/// Mean absolute difference over all elements.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mae", a, b)?;
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n)
}

/// Below this denominator δ is undefined.
pub const DELTA_EPS: f64 = 1e-8;

/// `MAE(D(target), D(zα)) / MAE(D(start), D(zα))` from decoded waveforms,
/// or `None` when the denominator is below [`DELTA_EPS`]. Not clamped.
pub fn delta_from_waves(start: &Tensor, target: &Tensor, swapped: &Tensor) -> Result<Option<f64>> {
    let den = mae(start, swapped)?;
    if den < DELTA_EPS {
        return Ok(None);
    }
    Ok(Some(mae(target, swapped)? / den))
}

/// Decode a `[T, D]` latent to a `[1, 1, L]` waveform.
pub fn decode_frames(decoder: &Decoder, z: &Tensor) -> Result<Tensor> {
    let (_, d) = time_by_dim("decode", z)?;
    if d != decoder.config.channels {
        return Err(Error::shape(
            "decode",
            format!("module {} decoder takes {} dims, latent has {d}", decoder.config.module, decoder.config.channels),
        ));
    }
    decoder.decode(&channel_major(z)?)
}

/// δ for swapping the top `n` ranked dimensions of `z_start` to `z_target`.
pub fn delta(decoder: &Decoder, z_start: &Tensor, z_target: &Tensor, n: usize) -> Result<Option<f64>> {
    let ranking = rank_importance(z_start, z_target)?;
    let swapped = partial_swap(z_start, z_target, &ranking, n)?;
    let ws = decode_frames(decoder, z_start)?;
    let wt = decode_frames(decoder, z_target)?;
    let wa = decode_frames(decoder, &swapped)?;
    delta_from_waves(&ws, &wt, &wa)
}

/// δ for every `n` in `ns`, decoding the start and target once.
pub fn delta_curve(decoder: &Decoder, z_start: &Tensor, z_target: &Tensor, ns: &[usize]) -> Result<Vec<Option<f64>>> {
    let ranking = rank_importance(z_start, z_target)?;
    let ws = decode_frames(decoder, z_start)?;
    let wt = decode_frames(decoder, z_target)?;
    ns.iter()
        .map(|&n| {
            let wa = decode_frames(decoder, &partial_swap(z_start, z_target, &ranking, n)?)?;
            delta_from_waves(&ws, &wt, &wa)
        })
        .collect()
}

/// `N ∈ {2, 4, 8, …}` up to and including `dims`.
pub fn swap_counts(dims: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(2usize), |n| n.checked_mul(2))
        .take_while(|&n| n < dims)
        .collect();
    out.push(dims);
    out
}

/// Decodes at `steps + 1` evenly spaced α from 0 to 1.
pub fn interpolation_strip(decoder: &Decoder, a: &Tensor, b: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("an interpolation strip needs at least one step".into()));
    }
    (0..=steps)
        .map(|i| decode_frames(decoder, &interpolate(a, b, i as f64 / steps as f64)?))
        .collect()
}

/// MAE between consecutive decodes of a strip.
pub fn adjacent_mae(strip: &[Tensor]) -> Result<Vec<f64>> {
    strip.windows(2).map(|w| mae(&w[0], &w[1])).collect()
}
