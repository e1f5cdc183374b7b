//! Contrastive objectives: the per-image spatial loss that spreads
//! foreground features, and the class loss that separates per-class
//! texture means.

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::likelihood::FeatureMap;
use crate::mesh::ModelBank;
use crate::scalar::{real, Real};

/// Spatial contrastive loss over one feature map:
/// `-sum_{i,j in FG} ||f_i - f_j||^2 - sum_{i in FG, j in BG} ||f_i - f_j||^2`.
///
/// With `pair_cap = None` the double sums are exact; otherwise each term is
/// an unbiased estimate from `cap` uniformly sampled ordered pairs, scaled
/// back to the population size (deterministic under the caller's rng).
pub fn con_loss<S: Real>(
    map: &FeatureMap<S>,
    fg_mask: &[bool],
    pair_cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<S> {
    con_loss_impl(map, fg_mask, pair_cap, rng, None)
}

/// [`con_loss`] plus its gradient with respect to the feature map.
pub fn con_loss_with_grad<S: Real>(
    map: &FeatureMap<S>,
    fg_mask: &[bool],
    pair_cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(S, Array3<S>)> {
    let (h, w, c) = map.dims();
    let mut grad = Array3::zeros((h, w, c));
    let loss = con_loss_impl(map, fg_mask, pair_cap, rng, Some(&mut grad))?;
    Ok((loss, grad))
}

fn con_loss_impl<S: Real>(
    map: &FeatureMap<S>,
    fg_mask: &[bool],
    pair_cap: Option<usize>,
    rng: &mut impl Rng,
    mut grad: Option<&mut Array3<S>>,
) -> Result<S> {
    let (h, w, c) = map.dims();
    if fg_mask.len() != h * w {
        return Err(Error::invalid_argument("mask size != lattice size"));
    }
    let fg: Vec<usize> = (0..h * w).filter(|&i| fg_mask[i]).collect();
    let bg: Vec<usize> = (0..h * w).filter(|&i| !fg_mask[i]).collect();
    if fg.is_empty() {
        return Err(Error::invalid_state("empty foreground"));
    }
    let data = map.as_slice();
    let feature = |cell: usize| &data[cell * c..cell * c + c];

    let mut loss = S::zero();
    let mut add_pair = |i: usize, j: usize, scale: S, grad: &mut Option<&mut Array3<S>>| {
        let fi = feature(i);
        let fj = feature(j);
        let mut d2 = S::zero();
        for k in 0..c {
            let d = fi[k] - fj[k];
            d2 = d2 + d * d;
        }
        loss = loss - scale * d2;
        if let Some(g) = grad.as_deref_mut() {
            let gs = g.as_slice_mut().expect("standard layout");
            let two = real::<S>(2.0);
            for k in 0..c {
                let d = (fi[k] - fj[k]) * two * scale;
                gs[i * c + k] = gs[i * c + k] - d;
                gs[j * c + k] = gs[j * c + k] + d;
            }
        }
    };

    // Foreground-foreground term (ordered pairs, i != j).
    let n_ff = fg.len() * (fg.len() - 1);
    match pair_cap {
        Some(cap) if n_ff > cap && cap > 0 => {
            let scale = real::<S>(n_ff as f64 / cap as f64);
            for _ in 0..cap {
                let i = fg[rng.random_range(0..fg.len())];
                let mut j = i;
                while j == i {
                    j = fg[rng.random_range(0..fg.len())];
                }
                add_pair(i, j, scale, &mut grad);
            }
        }
        _ => {
            for &i in &fg {
                for &j in &fg {
                    if i != j {
                        add_pair(i, j, S::one(), &mut grad);
                    }
                }
            }
        }
    }

    // Foreground-background term.
    if !bg.is_empty() {
        let n_fb = fg.len() * bg.len();
        match pair_cap {
            Some(cap) if n_fb > cap && cap > 0 => {
                let scale = real::<S>(n_fb as f64 / cap as f64);
                for _ in 0..cap {
                    let i = fg[rng.random_range(0..fg.len())];
                    let j = bg[rng.random_range(0..bg.len())];
                    add_pair(i, j, scale, &mut grad);
                }
            }
            _ => {
                for &i in &fg {
                    for &j in &bg {
                        add_pair(i, j, S::one(), &mut grad);
                    }
                }
            }
        }
    }

    Ok(loss)
}

/// Class-contrastive loss over the bank's texture means:
/// `-sum_y sum_{ybar != y} ||mu(y) - mu(ybar)||^2`.
pub fn class_loss<S: Real>(bank: &ModelBank<S>) -> Result<S> {
    if bank.class_count() < 2 {
        return Err(Error::invalid_state("class loss needs at least two classes"));
    }
    let means: Vec<Vec<S>> = bank
        .models
        .iter()
        .map(|m| m.texture_class_mean())
        .collect::<Result<_>>()?;
    Ok(class_loss_from_means(&means))
}

/// Same loss over explicit mean vectors (ordered pairs).
pub fn class_loss_from_means<S: Real>(means: &[Vec<S>]) -> S {
    let mut loss = S::zero();
    for (y, my) in means.iter().enumerate() {
        for (yb, myb) in means.iter().enumerate() {
            if y == yb {
                continue;
            }
            let mut d2 = S::zero();
            for (a, b) in my.iter().zip(myb.iter()) {
                let d = *a - *b;
                d2 = d2 + d * d;
            }
            loss = loss - d2;
        }
    }
    loss
}

/// Gradient of [`class_loss_from_means`] wrt each mean.
pub fn class_loss_mean_grads<S: Real>(means: &[Vec<S>]) -> Vec<Vec<S>> {
    let y_count = means.len();
    let c = means.first().map_or(0, |m| m.len());
    let four = real::<S>(4.0);
    let mut grads = vec![vec![S::zero(); c]; y_count];
    for y in 0..y_count {
        for yb in 0..y_count {
            if y == yb {
                continue;
            }
            for k in 0..c {
                let d = means[y][k] - means[yb][k];
                grads[y][k] = grads[y][k] - four * d;
            }
        }
    }
    grads
}
